"""Synthetic shapes dataset: colored geometric shapes on textured, optionally
cluttered backdrops, with ground truth, jittered proposals, captions and
(optional) synthetic proposal embeddings for the first prediction branch.

Shapes are chosen so their silhouettes stay distinguishable after the tight
crop and anisotropic resize (a thin bar and a square would both become a
full foreground square, so neither is in the palette).
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import GtSegment, VocabEntry, save_proposals, save_segments, save_vocab, write_captions
from .encoder import DEFAULT_TEMPLATES, embed_text
from .numerics import l2_normalize, make_rng
from .preprocess import write_image, write_index_map

SHAPE_NAMES = ("circle", "square", "triangle", "ring", "cross", "diamond",
               "frame", "target")

COLOR_VALUES = {
    "red": (0.85, 0.16, 0.16),
    "green": (0.18, 0.72, 0.22),
    "blue": (0.20, 0.32, 0.86),
    "yellow": (0.90, 0.84, 0.18),
    "purple": (0.60, 0.24, 0.74),
    "cyan": (0.20, 0.78, 0.80),
    "white": (0.95, 0.95, 0.95),
}

BACKDROP_ADJECTIVES = ("plain", "striped", "dotted", "textured", "noisy",
                       "dark", "bright", "grainy")
EXTRA_NOUNS = ("corner", "edge", "border", "stripe")


@dataclass(frozen=True)
class SynthConfig:
    count: int = 100
    image_size: int = 64
    num_classes: int = 8
    min_shapes: int = 1
    max_shapes: int = 3
    min_radius: int = 9
    max_radius: int = 15
    proposal_jitter: int = 0
    clutter: int = 0
    captions_per_image: int = 1
    with_embeddings: bool = True
    embedding_noise: float = 0.3
    embed_dim: int = 32
    seed: int = 0

    def __post_init__(self):
        if self.count < 1:
            raise ValueError("count must be >= 1")
        if not 1 <= self.num_classes <= len(SHAPE_NAMES):
            raise ValueError(f"num_classes must be in [1, {len(SHAPE_NAMES)}]")
        if self.min_shapes < 1 or self.max_shapes < self.min_shapes:
            raise ValueError("need 1 <= min_shapes <= max_shapes")
        if self.max_radius * 2 + 4 > self.image_size:
            raise ValueError("max_radius too large for the image size")


def shape_mask(name: str, size: int, cy: int, cx: int, r: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    dy = yy - cy
    dx = xx - cx
    dist2 = dy * dy + dx * dx
    if name == "circle":
        mask = dist2 <= r * r
    elif name == "square":
        mask = (np.abs(dy) <= r) & (np.abs(dx) <= r)
    elif name == "triangle":
        half_width = (dy + r) * 0.5
        mask = (dy >= -r) & (dy <= r) & (np.abs(dx) <= half_width)
    elif name == "ring":
        inner = 0.55 * r
        mask = (dist2 <= r * r) & (dist2 > inner * inner)
    elif name == "cross":
        arm = max(1, int(round(0.33 * r)))
        mask = (((np.abs(dx) <= arm) & (np.abs(dy) <= r))
                | ((np.abs(dy) <= arm) & (np.abs(dx) <= r)))
    elif name == "diamond":
        mask = np.abs(dy) + np.abs(dx) <= r
    elif name == "frame":
        cheb = np.maximum(np.abs(dy), np.abs(dx))
        mask = (cheb <= r) & (cheb > 0.55 * r)
    elif name == "target":
        mask = (dist2 <= (0.4 * r) ** 2) | ((dist2 >= (0.7 * r) ** 2) & (dist2 <= r * r))
    else:
        raise ValueError(f"unknown shape {name!r}")
    return mask.astype(np.uint8)


def _jitter_mask(mask: np.ndarray, dy: int, dx: int) -> np.ndarray:
    out = np.zeros_like(mask)
    h, w = mask.shape
    src_r = slice(max(0, -dy), min(h, h - dy))
    src_c = slice(max(0, -dx), min(w, w - dx))
    dst_r = slice(max(0, dy), min(h, h + dy))
    dst_c = slice(max(0, dx), min(w, w + dx))
    out[dst_r, dst_c] = mask[src_r, src_c]
    return out


def _caption(shapes, colors, variant: int, rng) -> str:
    phrases = [f"a {color} {shape}" for color, shape in zip(colors, shapes)]
    listed = phrases[0] if len(phrases) == 1 else \
        ", ".join(phrases[:-1]) + " and " + phrases[-1]
    adj = BACKDROP_ADJECTIVES[int(rng.integers(len(BACKDROP_ADJECTIVES)))]
    if variant == 0:
        return f"{listed} on a {adj} backdrop."
    extra = EXTRA_NOUNS[int(rng.integers(len(EXTRA_NOUNS)))]
    return f"{listed} near the {extra} of a {adj} backdrop."


def generate(out_dir, config: SynthConfig) -> dict:
    """Write a full dataset directory; byte-identical for identical configs."""
    root = Path(out_dir)
    for sub in ("images", "gt", "gt_segments", "proposals"):
        (root / sub).mkdir(parents=True, exist_ok=True)

    size = config.image_size
    class_names = list(SHAPE_NAMES[:config.num_classes])
    color_names = list(COLOR_VALUES)
    text_vectors = None
    if config.with_embeddings:
        text_vectors = {name: embed_text(name, DEFAULT_TEMPLATES, config.embed_dim)
                        for name in class_names}

    caption_rows: list[tuple[str, str]] = []
    for i in range(config.count):
        rng = make_rng(config.seed, "scene", i)
        image_id = f"{i:06d}"

        base = rng.uniform(0.30, 0.55)
        image = np.clip(base + rng.uniform(-0.06, 0.06, (size, size, 3)), 0.0, 1.0)
        for _ in range(config.clutter):
            ch = int(rng.integers(3, 7))
            cw = int(rng.integers(3, 7))
            top = int(rng.integers(0, size - ch))
            left = int(rng.integers(0, size - cw))
            tint = rng.uniform(0.15, 0.85, 3)
            image[top:top + ch, left:left + cw] = \
                0.5 * image[top:top + ch, left:left + cw] + 0.5 * tint

        num_shapes = int(rng.integers(config.min_shapes, config.max_shapes + 1))
        class_order = rng.permutation(config.num_classes)[:num_shapes]
        gt_map = np.full((size, size), 255, dtype=np.uint8)
        segments: list[GtSegment] = []
        shape_names_used: list[str] = []
        shape_colors_used: list[str] = []
        boxes: list[tuple[int, int, int, int]] = []
        for class_idx in class_order:
            name = class_names[int(class_idx)]
            r = int(rng.integers(config.min_radius, config.max_radius + 1))
            placed = False
            for _attempt in range(40):
                cy = int(rng.integers(r + 1, size - r - 1))
                cx = int(rng.integers(r + 1, size - r - 1))
                box = (cy - r, cx - r, cy + r, cx + r)
                if all(box[2] < b[0] - 1 or box[0] > b[2] + 1
                       or box[3] < b[1] - 1 or box[1] > b[3] + 1 for b in boxes):
                    placed = True
                    break
            if not placed and boxes:
                continue
            mask = shape_mask(name, size, cy, cx, r)
            boxes.append(box)
            color_name = color_names[int(rng.integers(len(color_names)))]
            color = np.array(COLOR_VALUES[color_name])
            shading = rng.uniform(-0.04, 0.04, (size, size, 3))
            region = mask.astype(bool)
            image[region] = np.clip(color + shading[region], 0.0, 1.0)
            gt_map[region] = int(class_idx)
            segments.append(GtSegment(class_index=int(class_idx), mask=mask))
            shape_names_used.append(name)
            shape_colors_used.append(color_name)

        write_image(root / "images" / f"{image_id}.png", image)
        write_index_map(root / "gt" / f"{image_id}.png", gt_map)
        save_segments(root / "gt_segments" / f"{image_id}.json", segments)

        proposal_masks = []
        embeddings = [] if config.with_embeddings else None
        for seg in segments:
            mask = seg.mask
            if config.proposal_jitter > 0:
                j = config.proposal_jitter
                dy = int(rng.integers(-j, j + 1))
                dx = int(rng.integers(-j, j + 1))
                jittered = _jitter_mask(mask, dy, dx)
                if jittered.any():
                    mask = jittered
            proposal_masks.append(mask)
            if config.with_embeddings:
                noise = config.embedding_noise * rng.standard_normal(config.embed_dim)
                vec = l2_normalize(text_vectors[class_names[seg.class_index]] + noise)
                embeddings.append(vec)
        save_proposals(root / "proposals" / f"{image_id}.json", proposal_masks,
                       confidences=[1.0] * len(proposal_masks),
                       embeddings=np.stack(embeddings) if embeddings else None)

        for variant in range(config.captions_per_image):
            caption_rows.append((image_id, _caption(shape_names_used,
                                                    shape_colors_used, variant, rng)))

    write_captions(root / "captions.jsonl", caption_rows)
    save_vocab(root / "vocab.json",
               [VocabEntry(index=i, name=name, seen=(i % 2 == 0))
                for i, name in enumerate(class_names)])
    manifest = dict(asdict(config))
    manifest["classes"] = class_names
    manifest["format_version"] = 1
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return manifest
