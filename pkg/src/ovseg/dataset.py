"""On-disk dataset layout shared by the generator, miner and pipeline.

A dataset directory holds PNG images, PNG ground-truth index maps, per-image
JSON files with RLE-encoded ground-truth segments and mask proposals
(optionally with per-proposal confidences and embeddings), a captions JSONL
and a vocabulary JSON mapping class indices to names with a seen/unseen flag.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .numerics import Array, default_dtype
from .preprocess import read_image, read_index_map, rle_decode, rle_encode

UNLABELED = 255


@dataclass(frozen=True)
class VocabEntry:
    index: int
    name: str
    seen: bool = True


def save_vocab(path, entries: list[VocabEntry], unlabeled_index: int = UNLABELED) -> None:
    payload = {
        "classes": [{"index": e.index, "name": e.name, "seen": bool(e.seen)}
                    for e in entries],
        "unlabeled_index": unlabeled_index,
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_vocab(path) -> tuple[list[VocabEntry], int]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    entries = [VocabEntry(index=int(c["index"]), name=c["name"], seen=bool(c["seen"]))
               for c in payload["classes"]]
    entries.sort(key=lambda e: e.index)
    return entries, int(payload.get("unlabeled_index", UNLABELED))


@dataclass
class Proposals:
    masks: list[Array]                 # each (H, W) uint8
    confidences: list[float]
    embeddings: Array | None = None    # (N, E) or None

    def __len__(self) -> int:
        return len(self.masks)


def save_proposals(path, masks, confidences=None, embeddings=None) -> None:
    masks = [np.asarray(m, dtype=np.uint8) for m in masks]
    if not masks:
        raise ValueError("proposal file needs at least one mask")
    h, w = masks[0].shape
    if confidences is None:
        confidences = [1.0] * len(masks)
    payload = {
        "height": h,
        "width": w,
        "masks": [{"rle": rle_encode(m), "confidence": float(c)}
                  for m, c in zip(masks, confidences)],
        "embeddings": None if embeddings is None
        else [[float(x) for x in row] for row in np.asarray(embeddings)],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_proposals(path) -> Proposals:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    h, w = int(payload["height"]), int(payload["width"])
    masks = [rle_decode(m["rle"], h, w) for m in payload["masks"]]
    confidences = [float(m.get("confidence", 1.0)) for m in payload["masks"]]
    embeddings = payload.get("embeddings")
    if embeddings is not None:
        embeddings = np.asarray(embeddings, dtype=default_dtype())
        if embeddings.shape[0] != len(masks):
            raise ValueError("one embedding row per proposal required")
    return Proposals(masks=masks, confidences=confidences, embeddings=embeddings)


@dataclass
class GtSegment:
    class_index: int
    mask: Array


def save_segments(path, segments: list[GtSegment]) -> None:
    if not segments:
        raise ValueError("segment file needs at least one segment")
    h, w = segments[0].mask.shape
    payload = {
        "height": h,
        "width": w,
        "segments": [{"rle": rle_encode(s.mask), "class_index": int(s.class_index)}
                     for s in segments],
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def load_segments(path) -> list[GtSegment]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    h, w = int(payload["height"]), int(payload["width"])
    return [GtSegment(class_index=int(s["class_index"]), mask=rle_decode(s["rle"], h, w))
            for s in payload["segments"]]


def write_captions(path, rows: list[tuple[str, str]]) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for image_id, caption in rows:
            fh.write(json.dumps({"image_id": image_id, "caption": caption},
                                sort_keys=True) + "\n")


def read_captions(path) -> dict[str, list[str]]:
    """Captions grouped per image id, preserving file order."""
    grouped: dict[str, list[str]] = {}
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            grouped.setdefault(row["image_id"], []).append(row["caption"])
    return grouped


@dataclass
class Scene:
    image_id: str
    image: Array
    gt_map: Array
    gt_segments: list[GtSegment]
    proposals: Proposals
    captions: list[str]


class SegmentationDataset:
    """Read access to one dataset directory."""

    def __init__(self, root):
        self.root = Path(root)
        if not self.root.is_dir():
            raise FileNotFoundError(f"dataset directory not found: {self.root}")
        self.vocab_entries, self.unlabeled_index = load_vocab(self.root / "vocab.json")
        captions_path = self.root / "captions.jsonl"
        self._captions = read_captions(captions_path) if captions_path.is_file() else {}
        manifest_path = self.root / "manifest.json"
        self.manifest = (json.loads(manifest_path.read_text(encoding="utf-8"))
                         if manifest_path.is_file() else {})

    @property
    def class_names(self) -> list[str]:
        return [e.name for e in self.vocab_entries]

    @property
    def seen_names(self) -> list[str]:
        return [e.name for e in self.vocab_entries if e.seen]

    def image_ids(self) -> list[str]:
        return sorted(p.stem for p in (self.root / "images").glob("*.png"))

    def captions_for(self, image_id: str) -> list[str]:
        return list(self._captions.get(image_id, []))

    def load_image(self, image_id: str) -> Array:
        return read_image(self.root / "images" / f"{image_id}.png")

    def load_gt_map(self, image_id: str) -> Array:
        return read_index_map(self.root / "gt" / f"{image_id}.png")

    def load_gt_segments(self, image_id: str) -> list[GtSegment]:
        return load_segments(self.root / "gt_segments" / f"{image_id}.json")

    def load_proposals(self, image_id: str) -> Proposals:
        return load_proposals(self.root / "proposals" / f"{image_id}.json")

    def load_scene(self, image_id: str) -> Scene:
        return Scene(
            image_id=image_id,
            image=self.load_image(image_id),
            gt_map=self.load_gt_map(image_id),
            gt_segments=self.load_gt_segments(image_id),
            proposals=self.load_proposals(image_id),
            captions=self.captions_for(image_id),
        )
