"""Mine mask-category pairs from images, captions and mask proposals.

Nouns are pulled from captions with a rule-based tagger (tokenize, drop
lexicon-listed non-nouns, singularize, drop generic scene words). Each noun
is then paired with its best-matching proposal by cosine similarity between
the noun's text embedding and the masked-crop embeddings.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .dataset import SegmentationDataset
from .encoder import DEFAULT_TEMPLATES, EncoderState, embed_text, encode_batch
from .parallel import ordered_map
from .preprocess import crop_resize_mask

_TOKEN_RE = re.compile(r"[a-z0-9]+")


def _load_lexicon() -> dict[str, frozenset[str]]:
    raw = json.loads(resources.files("ovseg.data").joinpath("lexicon.json")
                     .read_text(encoding="utf-8"))
    return {key: frozenset(words) for key, words in raw.items()}


_LEXICON = _load_lexicon()
_DROPPED = (_LEXICON["stopwords"] | _LEXICON["verbs"] | _LEXICON["adjectives"]
            | _LEXICON["numbers"])
_SCENE = _LEXICON["scene"]


def singularize(word: str) -> str:
    """Suffix-rule singularization (-ies, -es, -s)."""
    if len(word) > 4 and word.endswith("ies"):
        return word[:-3] + "y"
    if len(word) > 3 and word.endswith(("ches", "shes", "xes", "ses", "zes")):
        return word[:-2]
    if len(word) > 2 and word.endswith("s") and not word.endswith(("ss", "us", "is")):
        return word[:-1]
    return word


def normalize_noun(word: str) -> str:
    return singularize(word.strip().lower())


def extract_nouns(caption: str) -> list[str]:
    """Nouns of a caption, lowercased, singularized, deduplicated in order."""
    nouns: list[str] = []
    seen: set[str] = set()
    for token in _TOKEN_RE.findall(caption.lower()):
        if len(token) < 2 or token in _DROPPED or token in _SCENE:
            continue
        noun = singularize(token)
        if noun in _DROPPED or noun in _SCENE or noun in seen:
            continue
        seen.add(noun)
        nouns.append(noun)
    return nouns


@dataclass(frozen=True)
class MaskCategoryPair:
    image_id: str
    proposal_idx: int
    noun: str
    score: float


def match_pairs(image, masks, nouns, state: EncoderState, image_id: str = "",
                embed_noun=None) -> list[MaskCategoryPair]:
    """Assign each noun its argmax-cosine proposal (ties: lowest index).

    ``masks`` is a sequence of binary proposal masks over ``image``; empty
    masks are skipped but retain their original indices. Several nouns may
    share one proposal.
    """
    if not nouns:
        raise ValueError("noun list is empty")
    cfg = state.config
    if embed_noun is None:
        embed_noun = lambda noun: embed_text(noun, DEFAULT_TEMPLATES, cfg.embed_dim)
    valid = [i for i, m in enumerate(masks) if np.asarray(m).any()]
    if not valid:
        raise ValueError("no proposal with foreground pixels")
    crops = [crop_resize_mask(image, masks[i], cfg.image_size, cfg.patch_size)
             for i in valid]
    crop_embs = encode_batch(crops, state)
    pairs = []
    for noun in nouns:
        sims = crop_embs @ embed_noun(noun)
        best = int(np.argmax(sims))
        pairs.append(MaskCategoryPair(image_id=image_id, proposal_idx=valid[best],
                                      noun=noun, score=float(sims[best])))
    return pairs


def write_pairs_jsonl(path, pairs) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for p in pairs:
            fh.write(json.dumps({"image_id": p.image_id, "proposal_idx": p.proposal_idx,
                                 "noun": p.noun, "score": p.score}, sort_keys=True) + "\n")


def load_pairs_jsonl(path) -> list[MaskCategoryPair]:
    pairs = []
    with Path(path).open("r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            pairs.append(MaskCategoryPair(image_id=row["image_id"],
                                          proposal_idx=int(row["proposal_idx"]),
                                          noun=row["noun"], score=float(row["score"])))
    return pairs


def mine_dataset(dataset, state: EncoderState, out_dir=None,
                 captions_per_image: int = 1, use_gt_masks: bool = False,
                 use_gt_classes: bool = False, min_score: float | None = None,
                 templates=DEFAULT_TEMPLATES, jobs: int = 1):
    """Mine pairs for a whole dataset directory; returns (pairs, stats).

    Mask source is either the stored proposals or the ground-truth segments;
    the category source is either caption nouns or the ground-truth class
    names. With both ground-truth sources each labeled segment is paired
    directly with its own class. Writes pairs.jsonl and stats.json into
    ``out_dir`` when given. Images are independent, so ``jobs`` may fan out
    without changing the output order.
    """
    if not isinstance(dataset, SegmentationDataset):
        dataset = SegmentationDataset(dataset)
    cfg = state.config
    cache: dict[str, np.ndarray] = {}

    def embed_noun(noun):
        if noun not in cache:
            cache[noun] = embed_text(noun, templates, cfg.embed_dim)
        return cache[noun]

    class_names = dataset.class_names

    def mine_image(image_id: str) -> list[MaskCategoryPair]:
        image = dataset.load_image(image_id)
        if use_gt_masks:
            segments = dataset.load_gt_segments(image_id)
            masks = [s.mask for s in segments]
        else:
            segments = None
            masks = dataset.load_proposals(image_id).masks

        if use_gt_classes and use_gt_masks:
            # direct ground-truth pairing: one pair per labeled segment
            direct = []
            for idx, seg in enumerate(segments):
                if not seg.mask.any():
                    continue
                noun = normalize_noun(class_names[seg.class_index])
                crop = crop_resize_mask(image, seg.mask, cfg.image_size, cfg.patch_size)
                emb = encode_batch([crop], state)[0]
                score = float(emb @ embed_noun(noun))
                direct.append(MaskCategoryPair(image_id, idx, noun, score))
            return direct

        if use_gt_classes:
            gt_map = dataset.load_gt_map(image_id)
            present = sorted(int(c) for c in np.unique(gt_map)
                             if c != dataset.unlabeled_index)
            nouns = [normalize_noun(class_names[c]) for c in present]
        else:
            captions = dataset.captions_for(image_id)[:captions_per_image]
            nouns = []
            seen: set[str] = set()
            for caption in captions:
                for noun in extract_nouns(caption):
                    if noun not in seen:
                        seen.add(noun)
                        nouns.append(noun)
        if not nouns:
            return []
        return match_pairs(image, masks, nouns, state, image_id=image_id,
                           embed_noun=embed_noun)

    pairs: list[MaskCategoryPair] = []
    for image_pairs in ordered_map(mine_image, dataset.image_ids(), jobs=jobs):
        pairs.extend(image_pairs)

    if min_score is not None:
        pairs = [p for p in pairs if p.score >= min_score]

    stats = {
        "pairs": len(pairs),
        "unique_nouns": len({p.noun for p in pairs}),
        "mask_source": "gt" if use_gt_masks else "proposals",
        "category_source": "gt" if use_gt_classes else "captions",
        "captions_per_image": captions_per_image,
        "min_score": min_score,
    }
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_pairs_jsonl(out / "pairs.jsonl", pairs)
        (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True) + "\n",
                                        encoding="utf-8")
    return pairs, stats


def build_crop_pairs(dataset, pairs, image_size: int, patch_size: int,
                     mask_source: str = "proposals", keep_background: bool = False):
    """Materialize (MaskedCrop, noun) tuples for training from mined pairs."""
    if not isinstance(dataset, SegmentationDataset):
        dataset = SegmentationDataset(dataset)
    if mask_source not in ("proposals", "gt"):
        raise ValueError(f"unknown mask source {mask_source!r}")
    out = []
    masks_cache: dict[str, list] = {}
    for p in pairs:
        if p.image_id not in masks_cache:
            if mask_source == "gt":
                masks_cache[p.image_id] = [s.mask for s in
                                           dataset.load_gt_segments(p.image_id)]
            else:
                masks_cache[p.image_id] = dataset.load_proposals(p.image_id).masks
            masks_cache[p.image_id + "/img"] = dataset.load_image(p.image_id)
        image = masks_cache[p.image_id + "/img"]
        mask = masks_cache[p.image_id][p.proposal_idx]
        crop = crop_resize_mask(image, mask, image_size, patch_size,
                                keep_background=keep_background)
        out.append((crop, p.noun))
    return out
