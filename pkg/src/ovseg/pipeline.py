"""Two-stage inference, segmentation fusion, mIoU evaluation and the
oracle bottleneck analyses (oracle masks vs oracle classes)."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .classify import class_probs, ensemble
from .dataset import UNLABELED, Proposals, SegmentationDataset
from .encoder import DEFAULT_TEMPLATES, EncoderState, Vocabulary, encode_batch
from .numerics import Array
from .parallel import ordered_map
from .preprocess import crop_resize_mask, read_index_map, write_index_map

ProposalSet = Proposals  # domain name for the pipeline-facing type


# ---------------------------------------------------------------------------
# fusion
# ---------------------------------------------------------------------------

def fuse(masks, distributions, confidences=None, unlabeled: int = UNLABELED) -> Array:
    """Weighted-argmax fusion of per-proposal class distributions.

    Pixel x gets argmax_k sum_i mask_i(x) * conf_i * dist_i[k]; ties resolve
    to the lowest class index, pixels covered by no proposal stay unlabeled.
    Distributions must exclude any no-object slot.
    """
    masks = np.asarray([np.asarray(m) for m in masks])
    distributions = np.asarray(distributions, dtype=np.float64)
    if masks.ndim != 3 or distributions.ndim != 2:
        raise ValueError("expected (N,H,W) masks and (N,K) distributions")
    if masks.shape[0] != distributions.shape[0]:
        raise ValueError("one distribution per mask required")
    num_classes = distributions.shape[1]
    if num_classes > unlabeled:
        raise ValueError(f"class count {num_classes} collides with unlabeled={unlabeled}")
    if confidences is None:
        confidences = np.ones(masks.shape[0])
    confidences = np.asarray(confidences, dtype=np.float64)
    weighted = masks.astype(np.float64) * confidences[:, None, None]
    scores = np.einsum("nhw,nk->hwk", weighted, distributions)
    labels = np.argmax(scores, axis=-1).astype(np.int64)
    labels[~masks.astype(bool).any(axis=0)] = unlabeled
    return labels.astype(np.uint8 if unlabeled <= 255 else np.int64)


# ---------------------------------------------------------------------------
# evaluation
# ---------------------------------------------------------------------------

@dataclass
class EvalReport:
    """Per-class IoU bookkeeping with seen/unseen split means."""

    class_names: list[str]
    intersection: Array          # (K,) int64
    union: Array                 # (K,) int64
    confusion: Array             # (K, K+1) int64, last column = predicted-unlabeled
    seen_flags: list[bool] | None = None

    def per_class_iou(self) -> dict[str, float | None]:
        out = {}
        for i, name in enumerate(self.class_names):
            u = int(self.union[i])
            out[name] = (int(self.intersection[i]) / u) if u > 0 else None
        return out

    def _mean_over(self, keep) -> float | None:
        ious = [int(self.intersection[i]) / int(self.union[i])
                for i in range(len(self.class_names))
                if keep(i) and self.union[i] > 0]
        return float(np.mean(ious)) if ious else None

    @property
    def miou(self) -> float | None:
        # classes absent from both prediction and ground truth are excluded
        return self._mean_over(lambda i: True)

    @property
    def seen_miou(self) -> float | None:
        if self.seen_flags is None:
            return None
        return self._mean_over(lambda i: self.seen_flags[i])

    @property
    def unseen_miou(self) -> float | None:
        if self.seen_flags is None:
            return None
        return self._mean_over(lambda i: not self.seen_flags[i])

    def to_dict(self) -> dict:
        return {
            "miou": self.miou,
            "seen_miou": self.seen_miou,
            "unseen_miou": self.unseen_miou,
            "per_class": {
                name: {
                    "iou": iou,
                    "intersection": int(self.intersection[i]),
                    "union": int(self.union[i]),
                }
                for i, (name, iou) in enumerate(self.per_class_iou().items())
            },
        }


class IouAccumulator:
    """Streams (pred, gt) map pairs into per-class intersection/union counts.

    Ground-truth pixels marked unlabeled are excluded from the bookkeeping
    entirely; predicted-unlabeled pixels at valid positions count as a miss.
    """

    def __init__(self, num_classes: int, unlabeled: int = UNLABELED):
        self.num_classes = num_classes
        self.unlabeled = unlabeled
        self.confusion = np.zeros((num_classes, num_classes + 1), dtype=np.int64)

    def update(self, pred: Array, gt: Array) -> None:
        pred = np.asarray(pred)
        gt = np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"map dims differ: {pred.shape} vs {gt.shape}")
        valid = gt != self.unlabeled
        gt_v = gt[valid].astype(np.int64)
        pred_v = pred[valid].astype(np.int64)
        if gt_v.size and gt_v.max() >= self.num_classes:
            raise ValueError("ground-truth index out of range")
        pred_v = np.where((pred_v == self.unlabeled) | (pred_v >= self.num_classes),
                          self.num_classes, pred_v)
        flat = gt_v * (self.num_classes + 1) + pred_v
        counts = np.bincount(flat, minlength=self.num_classes * (self.num_classes + 1))
        self.confusion += counts.reshape(self.num_classes, self.num_classes + 1)

    def report(self, class_names, seen_flags=None) -> EvalReport:
        k = self.num_classes
        inter = np.diagonal(self.confusion[:, :k]).copy()
        gt_count = self.confusion.sum(axis=1)
        pred_count = self.confusion[:, :k].sum(axis=0)
        union = gt_count + pred_count - inter
        return EvalReport(class_names=list(class_names), intersection=inter,
                          union=union, confusion=self.confusion.copy(),
                          seen_flags=None if seen_flags is None else list(seen_flags))


def miou(pred: Array, gt: Array, class_names, seen_flags=None,
         unlabeled: int = UNLABELED) -> EvalReport:
    """Single-pair evaluation; see IouAccumulator for the dataset version."""
    acc = IouAccumulator(len(class_names), unlabeled=unlabeled)
    acc.update(pred, gt)
    return acc.report(class_names, seen_flags)


# ---------------------------------------------------------------------------
# two-stage inference
# ---------------------------------------------------------------------------

def segment(image, proposals: ProposalSet, vocab: Vocabulary, state: EncoderState,
            lam: float, tau: float | None = None, keep_background: bool = False,
            conf_threshold: float | None = None, no_object_floor: float | None = None,
            unlabeled: int = UNLABELED):
    """Classify every proposal along both branches, ensemble, then fuse.

    Branch 1 scores stored proposal embeddings against the vocabulary (plus
    the no-object slot when present; proposals whose branch-1 argmax is
    no-object are dropped before fusion). Branch 2 classifies the masked
    crop with the image encoder. Without proposal embeddings the ensemble
    weight is forced to 1 and recorded in the returned info dict.

    Returns (segmentation map, per-kept-proposal distributions, info).
    """
    tau = state.config.temperature if tau is None else tau
    k = len(vocab.names)

    kept = [i for i, m in enumerate(proposals.masks) if np.asarray(m).any()]
    if conf_threshold is not None:
        kept = [i for i in kept if proposals.confidences[i] >= conf_threshold]
    if not kept:
        raise ValueError("no valid proposals to segment with")

    info: dict = {"lambda_requested": lam, "tau": tau, "forced_lambda": False,
                  "dropped_no_object": []}

    if proposals.embeddings is None:
        lam_used = 1.0
        info["forced_lambda"] = True
        branch1 = None
    else:
        lam_used = lam
        rows = vocab.vectors
        if vocab.no_object is not None:
            rows = np.vstack([rows, vocab.no_object[None]])
        branch1_full = class_probs(proposals.embeddings[kept], rows, tau)
        if vocab.no_object is not None:
            is_object = np.argmax(branch1_full, axis=-1) != k
            info["dropped_no_object"] = [kept[i] for i in range(len(kept))
                                         if not is_object[i]]
            floor = 1.0 / (k + 1) if no_object_floor is None else no_object_floor
            info["no_object_scores"] = (branch1_full[:, k] ** (1.0 - lam_used)
                                        * floor ** lam_used).tolist()
            kept = [kept[i] for i in range(len(kept)) if is_object[i]]
            branch1_full = branch1_full[is_object]
            if not kept:
                raise ValueError("all proposals classified as no-object")
        branch1 = branch1_full[:, :k]
    info["lambda"] = lam_used
    info["kept"] = list(kept)

    cfg = state.config
    crops = [crop_resize_mask(image, proposals.masks[i], cfg.image_size,
                              cfg.patch_size, keep_background=keep_background)
             for i in kept]
    branch2 = class_probs(encode_batch(crops, state), vocab.vectors, tau)

    dists = branch2 if branch1 is None else ensemble(branch1, branch2, lam_used)
    confidences = [proposals.confidences[i] for i in kept]
    seg = fuse([proposals.masks[i] for i in kept], dists, confidences,
               unlabeled=unlabeled)
    return seg, dists, info


def segment_dataset(dataset, state: EncoderState, lam: float, out_dir,
                    tau: float | None = None, keep_background: bool = False,
                    templates=DEFAULT_TEMPLATES, jobs: int = 1) -> dict:
    """Run two-stage inference over a dataset directory, writing PNG maps."""
    if not isinstance(dataset, SegmentationDataset):
        dataset = SegmentationDataset(dataset)
    vocab = Vocabulary.from_names(dataset.class_names, state.config.embed_dim,
                                  templates)
    out = Path(out_dir)
    (out / "pred").mkdir(parents=True, exist_ok=True)

    def run_image(image_id: str) -> bool:
        scene = dataset.load_scene(image_id)
        seg, _, info = segment(scene.image, scene.proposals, vocab, state, lam,
                               tau=tau, keep_background=keep_background,
                               unlabeled=dataset.unlabeled_index)
        write_index_map(out / "pred" / f"{image_id}.png", seg)
        return bool(info["forced_lambda"])

    image_ids = dataset.image_ids()
    forced = any(ordered_map(run_image, image_ids, jobs=jobs))
    return {"lambda": 1.0 if forced else lam, "lambda_requested": lam,
            "forced_lambda": forced,
            "tau": state.config.temperature if tau is None else tau,
            "keep_background": keep_background,
            "images": len(image_ids)}


def evaluate_predictions(dataset, pred_dir, seen_names=None) -> EvalReport:
    """Score a directory of predicted index maps against dataset ground truth."""
    if not isinstance(dataset, SegmentationDataset):
        dataset = SegmentationDataset(dataset)
    names = dataset.class_names
    if seen_names is None:
        seen = [e.seen for e in dataset.vocab_entries]
    else:
        seen_set = set(seen_names)
        seen = [n in seen_set for n in names]
    acc = IouAccumulator(len(names), unlabeled=dataset.unlabeled_index)
    pred_root = Path(pred_dir)
    if (pred_root / "pred").is_dir():
        pred_root = pred_root / "pred"
    for image_id in dataset.image_ids():
        pred_path = pred_root / f"{image_id}.png"
        if not pred_path.is_file():
            raise FileNotFoundError(f"missing prediction for image {image_id}")
        acc.update(read_index_map(pred_path), dataset.load_gt_map(image_id))
    return acc.report(names, seen)


# ---------------------------------------------------------------------------
# bottleneck analyses
# ---------------------------------------------------------------------------

def oracle_mask_analysis(dataset, state: EncoderState, tau: float | None = None,
                         templates=DEFAULT_TEMPLATES, jobs: int = 1) -> EvalReport:
    """Ground-truth masks as proposals, encoder as classifier.

    Isolates classifier quality: a perfect classifier scores mIoU 1.0 here,
    a degraded one falls towards chance.
    """
    if not isinstance(dataset, SegmentationDataset):
        dataset = SegmentationDataset(dataset)
    cfg = state.config
    tau = cfg.temperature if tau is None else tau
    vocab = Vocabulary.from_names(dataset.class_names, cfg.embed_dim, templates)
    acc = IouAccumulator(len(vocab.names), unlabeled=dataset.unlabeled_index)

    def run_image(image_id: str):
        scene = dataset.load_scene(image_id)
        masks = [s.mask for s in scene.gt_segments if s.mask.any()]
        if not masks:
            return None
        crops = [crop_resize_mask(scene.image, m, cfg.image_size, cfg.patch_size)
                 for m in masks]
        dists = class_probs(encode_batch(crops, state), vocab.vectors, tau)
        return fuse(masks, dists, unlabeled=dataset.unlabeled_index), scene.gt_map

    for result in ordered_map(run_image, dataset.image_ids(), jobs=jobs):
        if result is not None:
            acc.update(*result)
    return acc.report(vocab.names, [e.seen for e in dataset.vocab_entries])


def _mask_iou(a: Array, b: Array) -> float:
    a = a.astype(bool)
    b = b.astype(bool)
    union = int(np.logical_or(a, b).sum())
    return (int(np.logical_and(a, b).sum()) / union) if union else 0.0


def oracle_class_analysis(dataset, jobs: int = 1) -> EvalReport:
    """Stored proposals labeled by their max-overlap ground-truth class.

    Isolates proposal quality: ground-truth proposals score mIoU 1.0 here
    regardless of any classifier.
    """
    if not isinstance(dataset, SegmentationDataset):
        dataset = SegmentationDataset(dataset)
    names = dataset.class_names
    acc = IouAccumulator(len(names), unlabeled=dataset.unlabeled_index)

    def run_image(image_id: str):
        scene = dataset.load_scene(image_id)
        masks, dists = [], []
        for mask in scene.proposals.masks:
            if not mask.any():
                continue
            overlaps = [_mask_iou(mask, s.mask) for s in scene.gt_segments]
            if not overlaps or max(overlaps) == 0.0:
                continue
            best = scene.gt_segments[int(np.argmax(overlaps))].class_index
            onehot = np.zeros(len(names))
            onehot[best] = 1.0
            masks.append(mask)
            dists.append(onehot)
        if not masks:
            return None
        return fuse(masks, dists, unlabeled=dataset.unlabeled_index), scene.gt_map

    for result in ordered_map(run_image, dataset.image_ids(), jobs=jobs):
        if result is not None:
            acc.update(*result)
    return acc.report(names, [e.seen for e in dataset.vocab_entries])
