"""Similarity-based class probabilities and the two-branch ensemble."""

from __future__ import annotations

import numpy as np

from .numerics import Array, l2_normalize, softmax


def cosine_scores(v: Array, text_vectors: Array) -> Array:
    """Cosine similarity of embedding(s) ``v`` against unit text rows."""
    v = np.asarray(v)
    text_vectors = np.asarray(text_vectors)
    if v.shape[-1] != text_vectors.shape[-1]:
        raise ValueError(
            f"embedding dim {v.shape[-1]} != text dim {text_vectors.shape[-1]}")
    return l2_normalize(v, axis=-1) @ text_vectors.T


def class_probs(v: Array, text_vectors: Array, tau: float) -> Array:
    """Softmax over cosine similarities scaled by 1/tau.

    ``v`` may be a single embedding (E,) or a batch (..., E); the class axis
    is last in the result. ``text_vectors`` rows are assumed unit norm (the
    vocabulary type guarantees this).
    """
    if not tau > 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    return softmax(cosine_scores(v, text_vectors) / tau, axis=-1)


def ensemble(p: Array, p_hat: Array, lam: float, renormalize: bool = False) -> Array:
    """Elementwise geometric blend p^(1-lam) * p_hat^lam.

    The result is not renormalized (downstream fusion and argmax are
    scale-tolerant); pass ``renormalize=True`` only for inspection. 0^0 is
    taken as 1, so lam=0 returns ``p`` exactly and lam=1 returns ``p_hat``
    exactly.
    """
    p = np.asarray(p)
    p_hat = np.asarray(p_hat)
    if p.shape != p_hat.shape:
        raise ValueError(f"branch shapes differ: {p.shape} vs {p_hat.shape}")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"ensemble weight must be in [0, 1], got {lam}")
    if np.any(p < 0) or np.any(p_hat < 0):
        raise ValueError("ensemble inputs must be nonnegative")
    if lam == 0.0:
        return p.copy()
    if lam == 1.0:
        return p_hat.copy()
    blended = np.power(p, 1.0 - lam) * np.power(p_hat, lam)
    if renormalize:
        total = blended.sum(axis=-1, keepdims=True)
        if np.any(total == 0):
            raise ValueError("cannot renormalize an all-zero blend")
        blended = blended / total
    return blended
