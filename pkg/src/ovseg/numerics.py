"""Dense-array math kernels shared by every other module.

Everything here is plain numpy with deterministic, fixed-order reductions so
repeated runs on the same inputs are bitwise identical. A global precision
switch selects float32 (default) or float64; the gradient checks flip to
float64 because float32 rounding noise swamps central finite differences.
"""

from __future__ import annotations

import hashlib
from contextlib import contextmanager

import numpy as np

Array = np.ndarray

DTYPES = {"f32": np.dtype(np.float32), "f64": np.dtype(np.float64)}

_default_dtype_name = "f32"


def default_dtype() -> np.dtype:
    """Currently active compute dtype (float32 unless switched)."""
    return DTYPES[_default_dtype_name]


def set_default_dtype(name: str) -> None:
    global _default_dtype_name
    if name not in DTYPES:
        raise ValueError(f"unknown dtype {name!r}, expected one of {sorted(DTYPES)}")
    _default_dtype_name = name


@contextmanager
def precision(name: str):
    """Temporarily switch the global compute dtype ("f32" or "f64")."""
    previous = _default_dtype_name
    set_default_dtype(name)
    try:
        yield
    finally:
        set_default_dtype(previous)


def dtype_name(dtype) -> str:
    for name, dt in DTYPES.items():
        if np.dtype(dtype) == dt:
            return name
    raise ValueError(f"unsupported dtype {dtype!r}, expected float32 or float64")


def make_rng(seed: int, *stream: object) -> np.random.Generator:
    """Seeded PCG64 generator, identical stream on every platform.

    Optional ``stream`` labels derive independent substreams from one root
    seed; labels are folded in through a blake2 hash so the derivation does
    not depend on Python's per-process string hashing.
    """
    entropy = [int(seed) & 0xFFFFFFFFFFFFFFFF]
    for part in stream:
        digest = hashlib.blake2b(repr(part).encode("utf-8"), digest_size=8).digest()
        entropy.append(int.from_bytes(digest, "little"))
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))


def matmul(a: Array, b: Array) -> Array:
    """Matrix product with an explicit inner-dimension check."""
    a = np.asarray(a)
    b = np.asarray(b)
    inner_b = b.shape[0] if b.ndim == 1 else b.shape[-2]
    if a.ndim == 0 or b.ndim == 0 or a.shape[-1] != inner_b:
        raise ValueError(f"matmul shape mismatch: {a.shape} x {b.shape}")
    return np.matmul(a, b)


def softmax(x: Array, axis: int = -1) -> Array:
    """Softmax along ``axis`` with max-subtraction for overflow safety."""
    x = np.asarray(x)
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def layernorm(x: Array, gamma: Array | None = None, beta: Array | None = None,
              eps: float = 1e-5) -> Array:
    """Layer normalization over the last axis, optional affine."""
    x = np.asarray(x)
    mean = np.mean(x, axis=-1, keepdims=True)
    var = np.mean((x - mean) ** 2, axis=-1, keepdims=True)
    normed = (x - mean) / np.sqrt(var + eps)
    if gamma is not None:
        normed = normed * gamma
    if beta is not None:
        normed = normed + beta
    return normed


# tanh-form GELU; its derivative stays cheap for the manual backward pass
_GELU_C = 0.7978845608028654  # sqrt(2/pi)
_GELU_A = 0.044715


def gelu_fwd(x: Array) -> tuple[Array, Array]:
    """(gelu(x), tanh-inner term); the second output feeds gelu_grad."""
    x = np.asarray(x)
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def gelu(x: Array) -> Array:
    return gelu_fwd(x)[0]


def gelu_grad(x: Array, tanh_inner: Array | None = None) -> Array:
    """d gelu(x) / dx; pass tanh((2/pi)^.5 (x + a x^3)) to reuse the forward's."""
    x = np.asarray(x)
    x2 = x * x
    t = np.tanh(_GELU_C * (x + _GELU_A * x2 * x)) if tanh_inner is None else tanh_inner
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * _GELU_C * (1.0 + 3.0 * _GELU_A * x2)


def l2_normalize(x: Array, axis: int = -1) -> Array:
    """Scale vectors along ``axis`` to unit Euclidean norm."""
    x = np.asarray(x)
    norm = np.sqrt(np.sum(x * x, axis=axis, keepdims=True))
    if np.any(norm == 0.0):
        raise ValueError("cannot l2-normalize a zero vector")
    return x / norm
