"""Finetune the encoder on mask-category pairs.

Modes: prompt tuning only (mpt), full finetuning (ft), the two-phase
combinations (ft_then_mpt, mpt_then_ft) and simultaneous optimization
(ft_plus_mpt). The text side stays frozen throughout; the loss is a
batch-wise cross-entropy of each crop's class probabilities over the
batch's unique nouns against its own noun.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .encoder import (DEFAULT_TEMPLATES, EncoderConfig, EncoderState, backward_batch,
                      embed_text, forward_batch, init_prompts, init_weights)
from .numerics import Array, make_rng, softmax
from .preprocess import MaskedCrop

MODES = ("mpt", "ft", "ft_then_mpt", "mpt_then_ft", "ft_plus_mpt")


class DegenerateBatchError(ValueError):
    """Raised when a batch has fewer than two unique nouns."""


@dataclass(frozen=True)
class TrainConfig:
    mode: str = "mpt"
    epochs: int = 5
    batch_size: int = 256
    mpt_lr: float = 2e-2
    mpt_weight_decay: float = 0.0
    ft_lr: float = 5e-6
    ft_weight_decay: float = 0.2
    schedule: str = "cosine"
    seed: int = 0
    tau: float = 0.1
    prompt_depth: int | None = None  # None -> encoder config default

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown mode {self.mode!r}, expected one of {MODES}")
        if self.epochs < 0 or self.batch_size < 1:
            raise ValueError("epochs must be >= 0 and batch size >= 1")
        if self.mpt_lr <= 0 or self.ft_lr <= 0:
            raise ValueError("learning rates must be positive")
        if self.schedule not in ("cosine", "constant"):
            raise ValueError(f"unknown schedule {self.schedule!r}")


# "paper" keeps the documented large-scale recipe for reference; "desk"
# is calibrated so the toy encoder actually trains in seconds.
PRESETS: dict[str, TrainConfig] = {
    "paper": TrainConfig(epochs=5, batch_size=256, mpt_lr=2e-2, mpt_weight_decay=0.0,
                         ft_lr=5e-6, ft_weight_decay=0.2, tau=0.01),
    "desk": TrainConfig(epochs=12, batch_size=32, mpt_lr=2e-2, mpt_weight_decay=0.0,
                        ft_lr=3e-3, ft_weight_decay=0.01, tau=0.1),
}


def make_config(preset: str = "desk", **overrides) -> TrainConfig:
    if preset not in PRESETS:
        raise ValueError(f"unknown preset {preset!r}, expected one of {sorted(PRESETS)}")
    return replace(PRESETS[preset], **overrides)


@dataclass
class PairBatch:
    """A minibatch of (masked crop, noun) finetuning pairs."""

    crops: list[MaskedCrop]
    nouns: list[str]

    def __post_init__(self):
        if len(self.crops) != len(self.nouns):
            raise ValueError("one noun per crop required")
        if any(not n for n in self.nouns):
            raise ValueError("nouns must be nonempty")

    def unique_nouns(self) -> list[str]:
        return list(dict.fromkeys(self.nouns))


def build_text_table(nouns, dim: int, templates=DEFAULT_TEMPLATES) -> dict[str, Array]:
    """Frozen noun -> unit embedding lookup."""
    table = {}
    for noun in nouns:
        if noun not in table:
            table[noun] = embed_text(noun, templates, dim)
    return table


def _batch_inputs(batch: PairBatch, table: dict[str, Array] | None, dim: int):
    labels = batch.unique_nouns()
    if len(labels) < 2:
        raise DegenerateBatchError("batch needs at least two unique nouns")
    if table is None:
        table = build_text_table(labels, dim)
    text = np.stack([table[n] for n in labels])
    targets = np.array([labels.index(n) for n in batch.nouns])
    pixels = np.stack([c.pixels for c in batch.crops])
    masks = np.stack([c.patch_mask for c in batch.crops])
    return labels, text, targets, pixels, masks


def pair_loss(batch: PairBatch, state: EncoderState, tau: float,
              text_table: dict[str, Array] | None = None):
    """Mean cross-entropy over the batch; also returns (B, U) probabilities."""
    _, text, targets, pixels, masks = _batch_inputs(batch, text_table,
                                                    state.config.embed_dim)
    emb, _ = forward_batch(pixels, masks, state)
    logits = (emb @ text.T) / tau
    probs = softmax(logits, axis=-1)
    picked = probs[np.arange(len(targets)), targets]
    loss = float(np.mean(-np.log(picked)))
    return loss, probs


def pair_loss_and_grads(batch: PairBatch, state: EncoderState, tau: float,
                        text_table: dict[str, Array] | None = None):
    """Loss, probabilities and exact gradients (weights and prompt stack)."""
    _, text, targets, pixels, masks = _batch_inputs(batch, text_table,
                                                    state.config.embed_dim)
    emb, cache = forward_batch(pixels, masks, state, want_cache=True)
    logits = (emb @ text.T) / tau
    probs = softmax(logits, axis=-1)
    picked = probs[np.arange(len(targets)), targets]
    loss = float(np.mean(-np.log(picked)))

    dlogits = probs.copy()
    dlogits[np.arange(len(targets)), targets] -= 1.0
    dlogits /= len(targets)
    d_emb = (dlogits @ text.astype(emb.dtype)) / tau
    weight_grads, prompt_grads = backward_batch(d_emb, cache, state)
    return loss, probs, weight_grads, prompt_grads


def pair_grads(batch: PairBatch, state: EncoderState, tau: float,
               text_table: dict[str, Array] | None = None) -> dict[str, Array]:
    """Gradient dictionary keyed like the weights plus ``prompt.{d}`` entries."""
    _, _, weight_grads, prompt_grads = pair_loss_and_grads(batch, state, tau, text_table)
    grads = dict(weight_grads)
    if prompt_grads is not None:
        for d, g in enumerate(prompt_grads):
            grads[f"prompt.{d}"] = g
    return grads


class AdamW:
    """Adam with decoupled weight decay over a named parameter dict."""

    def __init__(self, param_names, lr: float, weight_decay: float = 0.0,
                 betas=(0.9, 0.999), eps: float = 1e-8):
        self.names = list(param_names)
        self.lr = lr
        self.weight_decay = weight_decay
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.step_count = 0
        self._m: dict[str, Array] = {}
        self._v: dict[str, Array] = {}

    def step(self, params: dict[str, Array], grads: dict[str, Array],
             lr_scale: float = 1.0) -> None:
        self.step_count += 1
        t = self.step_count
        lr = self.lr * lr_scale
        for name in self.names:
            p = params[name]
            g = grads[name]
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m += (1.0 - self.beta1) * (g - m)
            v += (1.0 - self.beta2) * (g * g - v)
            m_hat = m / (1.0 - self.beta1**t)
            v_hat = v / (1.0 - self.beta2**t)
            p -= lr * (m_hat / (np.sqrt(v_hat) + self.eps) + self.weight_decay * p)


def cosine_lr_scale(step: int, total_steps: int) -> float:
    """Cosine annealing from 1 at step 0 towards 0 at the final step."""
    if total_steps <= 1:
        return 1.0
    return 0.5 * (1.0 + math.cos(math.pi * step / (total_steps - 1)))


def evaluate_top1(pairs: Sequence[tuple[MaskedCrop, str]], state: EncoderState,
                  tau: float, text_table: dict[str, Array],
                  class_names: Sequence[str] | None = None,
                  batch_size: int = 256) -> float:
    """Top-1 accuracy of crop classification over ``class_names``."""
    if not pairs:
        raise ValueError("cannot evaluate on an empty pair list")
    names = list(class_names) if class_names is not None \
        else list(dict.fromkeys(n for _, n in pairs))
    text = np.stack([text_table[n] for n in names])
    index = {n: i for i, n in enumerate(names)}
    hits = 0
    for start in range(0, len(pairs), batch_size):
        chunk = pairs[start:start + batch_size]
        pixels = np.stack([c.pixels for c, _ in chunk])
        masks = np.stack([c.patch_mask for c, _ in chunk])
        emb, _ = forward_batch(pixels, masks, state)
        pred = np.argmax(emb @ text.T, axis=-1)
        hits += int(sum(int(pred[i]) == index[n] for i, (_, n) in enumerate(chunk)))
    return hits / len(pairs)


def _epoch_batches(num_items: int, batch_size: int, nouns: Sequence[str],
                   rng) -> list[list[int]]:
    order = list(rng.permutation(num_items))
    batches = [order[i:i + batch_size] for i in range(0, num_items, batch_size)]
    # repair degenerate batches (single unique noun) by swapping in an item
    # with a different noun, but only when the donor batch stays nondegenerate;
    # deterministic scan order keeps runs reproducible
    for bi, batch in enumerate(batches):
        if len(set(nouns[i] for i in batch)) >= 2:
            continue
        noun = nouns[batch[0]]
        done = False
        for bj, other in enumerate(batches):
            if done or bj == bi:
                continue
            for k, idx in enumerate(other):
                if nouns[idx] == noun:
                    continue
                donor_after = {nouns[j] for j in other if j != idx} | {noun}
                if len(donor_after) >= 2:
                    batch[0], other[k] = other[k], batch[0]
                    done = True
                    break
    return batches


@dataclass
class TrainResult:
    state: EncoderState
    metrics: list[dict]


def _phases(mode: str) -> list[tuple[str, bool, bool]]:
    # (phase name, train prompts, train weights)
    return {
        "mpt": [("mpt", True, False)],
        "ft": [("ft", False, True)],
        "ft_then_mpt": [("ft", False, True), ("mpt", True, False)],
        "mpt_then_ft": [("mpt", True, False), ("ft", False, True)],
        "ft_plus_mpt": [("ft+mpt", True, True)],
    }[mode]


def train(pairs: Sequence[tuple[MaskedCrop, str]], config: TrainConfig,
          encoder_config: EncoderConfig | None = None,
          init_state: EncoderState | None = None,
          log_path=None) -> TrainResult:
    """Run the configured finetuning recipe and return the trained state.

    Prompt-only phases never touch encoder weights; weight phases never
    allocate prompts on their own. Two-phase modes freeze the first phase's
    parameters before the second starts. All randomness (prompt init, batch
    order) flows from ``config.seed``.
    """
    if not pairs:
        raise ValueError("training dataset is empty")
    if init_state is not None:
        state = init_state.copy()
    else:
        enc_cfg = encoder_config or EncoderConfig()
        state = EncoderState(enc_cfg, init_weights(enc_cfg, config.seed))
    enc_cfg = state.config

    nouns = [n for _, n in pairs]
    table = build_text_table(nouns, enc_cfg.embed_dim)
    metrics: list[dict] = []

    if config.epochs == 0:
        return TrainResult(state=state, metrics=metrics)

    for phase_idx, (phase, train_prompts, train_weights) in enumerate(_phases(config.mode)):
        if train_prompts and state.prompts is None:
            depth = config.prompt_depth or enc_cfg.prompt_depth
            state.prompts = init_prompts(enc_cfg, config.seed, depth=depth)

        optimizers = []
        if train_weights:
            optimizers.append((AdamW(sorted(state.weights), config.ft_lr,
                                     config.ft_weight_decay), "weights"))
        if train_prompts:
            prompt_names = [f"prompt.{d}" for d in range(len(state.prompts))]
            optimizers.append((AdamW(prompt_names, config.mpt_lr,
                                     config.mpt_weight_decay), "prompts"))

        steps_per_epoch = math.ceil(len(pairs) / config.batch_size)
        total_steps = max(1, steps_per_epoch * config.epochs)
        step = 0
        for epoch in range(config.epochs):
            rng = make_rng(config.seed, "batch-order", phase_idx, epoch)
            batches = _epoch_batches(len(pairs), config.batch_size, nouns, rng)
            losses = []
            for batch_idx in batches:
                batch = PairBatch([pairs[i][0] for i in batch_idx],
                                  [pairs[i][1] for i in batch_idx])
                loss, _, wgrads, pgrads = pair_loss_and_grads(batch, state,
                                                              config.tau, table)
                scale = (cosine_lr_scale(step, total_steps)
                         if config.schedule == "cosine" else 1.0)
                params = dict(state.weights)
                grads = dict(wgrads)
                if state.prompts is not None and pgrads is not None:
                    for d in range(len(state.prompts)):
                        params[f"prompt.{d}"] = state.prompts[d]
                        grads[f"prompt.{d}"] = pgrads[d]
                for opt, _group in optimizers:
                    opt.step(params, grads, lr_scale=scale)
                losses.append(loss)
                step += 1
            top1 = evaluate_top1(pairs, state, config.tau, table)
            metrics.append({"phase": phase, "epoch": epoch + 1,
                            "loss": float(np.mean(losses)), "top1": top1})

    if log_path is not None:
        path = Path(log_path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8") as fh:
            for row in metrics:
                fh.write(json.dumps(row, sort_keys=True) + "\n")
    return TrainResult(state=state, metrics=metrics)
