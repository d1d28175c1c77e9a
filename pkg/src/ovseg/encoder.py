"""Toy vision-transformer image encoder with mask-prompt insertion.

The image side is a small ViT written directly in numpy, with an explicit
reverse-mode backward pass so gradients can be checked against finite
differences. Masked patch positions are replaced by learnable prompt rows:
at tokenization time for layer 0 and, for deep prompt stacks, by overwriting
the hidden state at masked positions before each deeper prompted layer.

The text side is deliberately tiny and frozen: a deterministic hash-based
token embedder with template averaging, plus a load-from-file path for
precomputed class embeddings.
"""

from __future__ import annotations

import hashlib
import json
import math
import re
from dataclasses import dataclass, replace
from functools import lru_cache
from pathlib import Path

import numpy as np

from . import bundle
from .numerics import Array, default_dtype, gelu_fwd, gelu_grad, l2_normalize, make_rng, softmax
from .preprocess import MaskedCrop

DEFAULT_TEMPLATES = (
    "a photo of a {}.",
    "This is a photo of a {}",
    "There is a {} in the scene",
    "There is the {} in the scene",
    "a photo of a {} in the scene",
    "a photo of a small {}.",
    "a photo of a medium {}.",
    "a photo of a large {}.",
    "This is a photo of a small {}.",
    "This is a photo of a medium {}.",
    "This is a photo of a large {}.",
    "There is a small {} in the scene.",
    "There is a medium {} in the scene.",
    "There is a large {} in the scene.",
)

_PROMPT_INIT_RANGE = 0.02
_EMBED_INIT_STD = 0.02
_LN_EPS = 1e-5


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 32
    patch_size: int = 4
    embed_dim: int = 32
    layers: int = 4
    heads: int = 4
    prompt_depth: int = 3
    temperature: float = 0.01
    mlp_ratio: int = 4

    def __post_init__(self):
        if self.image_size % self.patch_size != 0:
            raise ValueError("patch size must divide image size")
        if self.embed_dim % self.heads != 0:
            raise ValueError("head count must divide embedding dim")
        if not 1 <= self.prompt_depth <= self.layers:
            raise ValueError("prompt depth must be in [1, layers]")
        if self.temperature <= 0:
            raise ValueError("temperature must be positive")

    @property
    def grid(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid * self.grid

    @property
    def patch_dim(self) -> int:
        return self.patch_size * self.patch_size * 3

    def to_dict(self) -> dict:
        return {
            "image_size": self.image_size,
            "patch_size": self.patch_size,
            "embed_dim": self.embed_dim,
            "layers": self.layers,
            "heads": self.heads,
            "prompt_depth": self.prompt_depth,
            "temperature": self.temperature,
            "mlp_ratio": self.mlp_ratio,
        }


def init_weights(config: EncoderConfig, seed: int) -> dict[str, Array]:
    """Freshly initialized encoder weights, keyed by canonical names.

    Projection matrices use fan-in scaling (1/sqrt(fan_in)); the tiny widths
    here make a flat 0.02 init collapse activations and stall training.
    """
    rng = make_rng(seed, "encoder-weights")
    dt = default_dtype()
    e = config.embed_dim
    hidden = config.mlp_ratio * e

    def matrix(fan_in, *shape):
        return (rng.standard_normal(shape) / math.sqrt(fan_in)).astype(dt)

    def embedding(*shape):
        return (rng.standard_normal(shape) * _EMBED_INIT_STD).astype(dt)

    w: dict[str, Array] = {
        "patch_proj.w": matrix(config.patch_dim, config.patch_dim, e),
        "patch_proj.b": np.zeros(e, dtype=dt),
        "cls_token": embedding(e),
        "pos_embed": embedding(config.num_patches + 1, e),
    }
    for i in range(config.layers):
        p = f"layer{i}"
        w[f"{p}.ln1.g"] = np.ones(e, dtype=dt)
        w[f"{p}.ln1.b"] = np.zeros(e, dtype=dt)
        w[f"{p}.attn.qkv.w"] = matrix(e, e, 3 * e)
        w[f"{p}.attn.qkv.b"] = np.zeros(3 * e, dtype=dt)
        w[f"{p}.attn.out.w"] = matrix(e, e, e)
        w[f"{p}.attn.out.b"] = np.zeros(e, dtype=dt)
        w[f"{p}.ln2.g"] = np.ones(e, dtype=dt)
        w[f"{p}.ln2.b"] = np.zeros(e, dtype=dt)
        w[f"{p}.mlp.fc1.w"] = matrix(e, e, hidden)
        w[f"{p}.mlp.fc1.b"] = np.zeros(hidden, dtype=dt)
        w[f"{p}.mlp.fc2.w"] = matrix(hidden, hidden, e)
        w[f"{p}.mlp.fc2.b"] = np.zeros(e, dtype=dt)
    w["ln_f.g"] = np.ones(e, dtype=dt)
    w["ln_f.b"] = np.zeros(e, dtype=dt)
    w["out_proj.w"] = matrix(e, e, e)
    return w


def init_prompts(config: EncoderConfig, seed: int, depth: int | None = None) -> list[Array]:
    """Random prompt stack, one (N_p, E) tensor per prompted layer."""
    depth = config.prompt_depth if depth is None else depth
    if not 1 <= depth <= config.layers:
        raise ValueError("prompt depth must be in [1, layers]")
    rng = make_rng(seed, "prompt-init")
    dt = default_dtype()
    shape = (config.num_patches, config.embed_dim)
    return [rng.uniform(-_PROMPT_INIT_RANGE, _PROMPT_INIT_RANGE, shape).astype(dt)
            for _ in range(depth)]


@dataclass
class EncoderState:
    """Weights plus an optional prompt stack; immutable during inference."""

    config: EncoderConfig
    weights: dict[str, Array]
    prompts: list[Array] | None = None

    def without_prompts(self) -> "EncoderState":
        return replace(self, prompts=None)

    def copy(self) -> "EncoderState":
        prompts = None if self.prompts is None else [p.copy() for p in self.prompts]
        return EncoderState(self.config,
                            {k: v.copy() for k, v in self.weights.items()},
                            prompts)


def save_state(path, state: EncoderState) -> None:
    root = Path(path)
    arrays = dict(state.weights)
    if state.prompts is not None:
        for d, p in enumerate(state.prompts):
            arrays[f"prompt.{d}"] = p
    bundle.save_bundle(root, arrays)
    meta = {"encoder": state.config.to_dict(),
            "prompt_depth_stored": 0 if state.prompts is None else len(state.prompts)}
    (root / "encoder.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n",
                                       encoding="utf-8")


def load_state(path) -> EncoderState:
    root = Path(path)
    meta = json.loads((root / "encoder.json").read_text(encoding="utf-8"))
    config = EncoderConfig(**meta["encoder"])
    arrays = bundle.load_bundle(root)
    prompt_keys = sorted((k for k in arrays if k.startswith("prompt.")),
                         key=lambda k: int(k.split(".")[1]))
    prompts = [arrays.pop(k) for k in prompt_keys] or None
    return EncoderState(config=config, weights=arrays, prompts=prompts)


def apply_mask_prompts(tokens: Array, patch_mask: Array, prompts: Array) -> Array:
    """Row-select T*M_p + P*(1-M_p): kept rows from T, masked rows from P."""
    tokens = np.asarray(tokens)
    prompts = np.asarray(prompts)
    mask = np.asarray(patch_mask)
    if tokens.shape[-2] != mask.shape[-1] or tokens.shape[-2:] != prompts.shape[-2:]:
        raise ValueError(
            f"shape mismatch: tokens {tokens.shape}, mask {mask.shape}, prompts {prompts.shape}")
    keep = mask.astype(bool)[..., None]
    return np.where(keep, tokens, prompts)


# ---------------------------------------------------------------------------
# forward / backward
# ---------------------------------------------------------------------------

def _patchify(pixels: Array, config: EncoderConfig) -> Array:
    b = pixels.shape[0]
    n, p = config.grid, config.patch_size
    x = pixels.reshape(b, n, p, n, p, 3)
    x = x.transpose(0, 1, 3, 2, 4, 5)
    return x.reshape(b, n * n, config.patch_dim)


def _layernorm_fwd(x, gamma, beta):
    mean = x.mean(axis=-1, keepdims=True)
    var = ((x - mean) ** 2).mean(axis=-1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + _LN_EPS)
    xhat = (x - mean) * inv_std
    return xhat * gamma + beta, (xhat, inv_std)


def _layernorm_bwd(g, cache, gamma):
    xhat, inv_std = cache
    reduce_axes = tuple(range(g.ndim - 1))
    dbeta = g.sum(axis=reduce_axes)
    dgamma = (g * xhat).sum(axis=reduce_axes)
    dxhat = g * gamma
    dx = inv_std * (dxhat
                    - dxhat.mean(axis=-1, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True))
    return dx, dgamma, dbeta


def _split_heads(x, heads):
    b, t, e = x.shape
    return x.reshape(b, t, heads, e // heads).transpose(0, 2, 1, 3)


def _merge_heads(x):
    b, h, t, d = x.shape
    return x.transpose(0, 2, 1, 3).reshape(b, t, h * d)


def _attention_fwd(x, w, prefix, heads):
    e = x.shape[-1]
    qkv = x @ w[f"{prefix}.qkv.w"] + w[f"{prefix}.qkv.b"]
    q = _split_heads(qkv[..., :e], heads)
    k = _split_heads(qkv[..., e:2 * e], heads)
    v = _split_heads(qkv[..., 2 * e:], heads)
    scale = 1.0 / math.sqrt(q.shape[-1])
    scores = (q @ k.transpose(0, 1, 3, 2)) * scale
    attn = softmax(scores, axis=-1)
    merged = _merge_heads(attn @ v)
    out = merged @ w[f"{prefix}.out.w"] + w[f"{prefix}.out.b"]
    return out, (x, q, k, v, attn, merged, scale)


def _attention_bwd(g, cache, w, prefix, grads):
    x, q, k, v, attn, merged, scale = cache
    b, t, e = x.shape
    heads = q.shape[1]

    grads[f"{prefix}.out.w"] += merged.reshape(-1, e).T @ g.reshape(-1, e)
    grads[f"{prefix}.out.b"] += g.sum(axis=(0, 1))
    dmerged = g @ w[f"{prefix}.out.w"].T
    do = _split_heads(dmerged, heads)

    dattn = do @ v.transpose(0, 1, 3, 2)
    dv = attn.transpose(0, 1, 3, 2) @ do
    dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True))
    dscores *= scale
    dq = dscores @ k
    dk = dscores.transpose(0, 1, 3, 2) @ q

    dqkv = np.concatenate([_merge_heads(dq), _merge_heads(dk), _merge_heads(dv)], axis=-1)
    grads[f"{prefix}.qkv.w"] += x.reshape(-1, e).T @ dqkv.reshape(-1, 3 * e)
    grads[f"{prefix}.qkv.b"] += dqkv.sum(axis=(0, 1))
    return dqkv @ w[f"{prefix}.qkv.w"].T


def _mlp_fwd(x, w, prefix):
    pre = x @ w[f"{prefix}.fc1.w"] + w[f"{prefix}.fc1.b"]
    act, tanh_inner = gelu_fwd(pre)
    out = act @ w[f"{prefix}.fc2.w"] + w[f"{prefix}.fc2.b"]
    return out, (x, pre, tanh_inner, act)


def _mlp_bwd(g, cache, w, prefix, grads):
    x, pre, tanh_inner, act = cache
    e_in = x.shape[-1]
    hidden = act.shape[-1]
    grads[f"{prefix}.fc2.w"] += act.reshape(-1, hidden).T @ g.reshape(-1, e_in)
    grads[f"{prefix}.fc2.b"] += g.sum(axis=(0, 1))
    dact = g @ w[f"{prefix}.fc2.w"].T
    dpre = dact * gelu_grad(pre, tanh_inner)
    grads[f"{prefix}.fc1.w"] += x.reshape(-1, e_in).T @ dpre.reshape(-1, hidden)
    grads[f"{prefix}.fc1.b"] += dpre.sum(axis=(0, 1))
    return dpre @ w[f"{prefix}.fc1.w"].T


def forward_batch(pixels: Array, patch_masks: Array, state: EncoderState,
                  want_cache: bool = False):
    """Encode a batch of masked crops to unit-norm embeddings.

    ``pixels``: (B, S, S, 3); ``patch_masks``: (B, N_p) with 1 for kept
    patches. Returns (embeddings, cache); the cache is None unless requested
    and feeds :func:`backward_batch`.
    """
    cfg = state.config
    w = state.weights
    prompts = state.prompts
    dt = w["patch_proj.w"].dtype

    pixels = np.asarray(pixels, dtype=dt)
    if pixels.shape[1:] != (cfg.image_size, cfg.image_size, 3):
        raise ValueError(f"crop shape {pixels.shape[1:]} does not match config")
    keep = np.asarray(patch_masks).astype(bool)
    if keep.shape[1:] != (cfg.num_patches,):
        raise ValueError(f"patch mask shape {keep.shape[1:]} does not match config")
    if prompts is not None and len(prompts) > cfg.layers:
        raise ValueError("prompt stack deeper than the encoder")
    depth = 0 if prompts is None else len(prompts)
    keep_col = keep[..., None]

    patches = _patchify(pixels, cfg)
    tokens = patches @ w["patch_proj.w"] + w["patch_proj.b"]
    x_patch = np.where(keep_col, tokens, prompts[0][None]) if depth else tokens
    cls = np.broadcast_to(w["cls_token"], (pixels.shape[0], 1, cfg.embed_dim))
    x = np.concatenate([cls, x_patch], axis=1) + w["pos_embed"][None]

    layer_caches = []
    for i in range(cfg.layers):
        overwritten = depth > i >= 1
        if overwritten:
            x = np.concatenate(
                [x[:, :1], np.where(keep_col, x[:, 1:], prompts[i][None])], axis=1)
        p = f"layer{i}"
        normed1, ln1_cache = _layernorm_fwd(x, w[f"{p}.ln1.g"], w[f"{p}.ln1.b"])
        attn_out, attn_cache = _attention_fwd(normed1, w, f"{p}.attn", cfg.heads)
        x1 = x + attn_out
        normed2, ln2_cache = _layernorm_fwd(x1, w[f"{p}.ln2.g"], w[f"{p}.ln2.b"])
        mlp_out, mlp_cache = _mlp_fwd(normed2, w, f"{p}.mlp")
        x = x1 + mlp_out
        if want_cache:
            layer_caches.append((overwritten, ln1_cache, attn_cache, ln2_cache, mlp_cache))

    h = x[:, 0, :]
    hn, lnf_cache = _layernorm_fwd(h, w["ln_f.g"], w["ln_f.b"])
    out = hn @ w["out_proj.w"]
    emb = l2_normalize(out, axis=-1)

    cache = None
    if want_cache:
        cache = {
            "patches": patches,
            "keep": keep,
            "depth": depth,
            "layers": layer_caches,
            "hn": hn,
            "out": out,
            "emb": emb,
            "lnf": lnf_cache,
        }
    return emb, cache


def backward_batch(d_emb: Array, cache: dict, state: EncoderState):
    """Reverse-mode gradients for every weight and, if present, the prompts.

    Returns (weight_grads, prompt_grads); prompt gradients are exactly zero
    at positions kept (mask 1) in every batch element, because replacement
    severs the dependence there.
    """
    cfg = state.config
    w = state.weights
    grads = {k: np.zeros_like(v) for k, v in w.items()}
    prompt_grads = (None if state.prompts is None
                    else [np.zeros_like(p) for p in state.prompts])
    keep_col = cache["keep"][..., None]
    depth = cache["depth"]

    # unit-normalize: dx = (g - (g.y) y) / |x|
    emb, out = cache["emb"], cache["out"]
    norm = np.sqrt((out * out).sum(axis=-1, keepdims=True))
    dout = (d_emb - (d_emb * emb).sum(axis=-1, keepdims=True) * emb) / norm

    hn = cache["hn"]
    grads["out_proj.w"] += hn.T @ dout
    dhn = dout @ w["out_proj.w"].T
    dh, dg, db = _layernorm_bwd(dhn, cache["lnf"], w["ln_f.g"])
    grads["ln_f.g"] += dg
    grads["ln_f.b"] += db

    b = dh.shape[0]
    dx = np.zeros((b, cfg.num_patches + 1, cfg.embed_dim), dtype=dh.dtype)
    dx[:, 0, :] = dh

    for i in reversed(range(cfg.layers)):
        overwritten, ln1_cache, attn_cache, ln2_cache, mlp_cache = cache["layers"][i]
        p = f"layer{i}"
        # x2 = x1 + mlp(ln2(x1)); dx holds d(x2) on entry
        dnormed2 = _mlp_bwd(dx, mlp_cache, w, f"{p}.mlp", grads)
        dx1_branch, dg, db = _layernorm_bwd(dnormed2, ln2_cache, w[f"{p}.ln2.g"])
        grads[f"{p}.ln2.g"] += dg
        grads[f"{p}.ln2.b"] += db
        dx = dx + dx1_branch
        # x1 = x + attn(ln1(x)); dx now holds d(x1)
        dnormed1 = _attention_bwd(dx, attn_cache, w, f"{p}.attn", grads)
        dx_branch, dg, db = _layernorm_bwd(dnormed1, ln1_cache, w[f"{p}.ln1.g"])
        grads[f"{p}.ln1.g"] += dg
        grads[f"{p}.ln1.b"] += db
        dx = dx + dx_branch
        if overwritten:
            g_patch = dx[:, 1:]
            prompt_grads[i] += np.where(keep_col, 0.0, g_patch).sum(axis=0)
            dx = np.concatenate([dx[:, :1], np.where(keep_col, g_patch, 0.0)], axis=1)

    grads["pos_embed"] += dx.sum(axis=0)
    grads["cls_token"] += dx[:, 0, :].sum(axis=0)
    dtok = dx[:, 1:]
    if depth:
        prompt_grads[0] += np.where(keep_col, 0.0, dtok).sum(axis=0)
        dtok = np.where(keep_col, dtok, 0.0)
    patches = cache["patches"]
    grads["patch_proj.w"] += (patches.reshape(-1, cfg.patch_dim).T
                              @ dtok.reshape(-1, cfg.embed_dim))
    grads["patch_proj.b"] += dtok.sum(axis=(0, 1))
    return grads, prompt_grads


def encode_batch(crops, state: EncoderState) -> Array:
    """Embed a sequence of MaskedCrop objects, one unit vector per crop."""
    pixels = np.stack([c.pixels for c in crops])
    masks = np.stack([c.patch_mask for c in crops])
    emb, _ = forward_batch(pixels, masks, state)
    return emb


def encode_image(crop: MaskedCrop, state: EncoderState) -> Array:
    return encode_batch([crop], state)[0]


# ---------------------------------------------------------------------------
# frozen text side
# ---------------------------------------------------------------------------

_TOKEN_RE = re.compile(r"[a-z0-9]+")


@lru_cache(maxsize=65536)
def _token_vector(token: str, dim: int) -> Array:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    rng = np.random.Generator(np.random.PCG64(int.from_bytes(digest, "little")))
    vec = rng.standard_normal(dim)
    vec.flags.writeable = False
    return vec


def embed_text(class_name: str, templates=DEFAULT_TEMPLATES, dim: int = 32) -> Array:
    """Frozen toy text embedding: hashed token vectors, template-averaged.

    Each template is instantiated with the class name, tokenized, and
    mean-pooled over token vectors; template embeddings are averaged and the
    result is l2-normalized. Deterministic by construction.
    """
    name = class_name.strip()
    if not name:
        raise ValueError("class name must be nonempty")
    templates = tuple(templates)
    if not templates:
        raise ValueError("need at least one template")
    per_template = np.zeros((len(templates), dim), dtype=np.float64)
    for t_idx, template in enumerate(templates):
        tokens = _TOKEN_RE.findall(template.format(name).lower())
        stacked = np.stack([_token_vector(tok, dim) for tok in tokens])
        per_template[t_idx] = stacked.mean(axis=0)
    avg = per_template.mean(axis=0)
    return l2_normalize(avg).astype(default_dtype())


@dataclass
class Vocabulary:
    """Per-class unit text embeddings plus an optional no-object slot."""

    names: list[str]
    vectors: Array  # (K, E), unit rows
    no_object: Array | None = None

    def __post_init__(self):
        if len(self.names) < 1:
            raise ValueError("vocabulary needs at least one class")
        if self.vectors.shape[0] != len(self.names):
            raise ValueError("one embedding row per class name required")

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    @classmethod
    def from_names(cls, names, dim: int, templates=DEFAULT_TEMPLATES) -> "Vocabulary":
        vectors = np.stack([embed_text(n, templates, dim) for n in names])
        return cls(names=list(names), vectors=vectors)


def save_text_table(path, vocab: Vocabulary) -> None:
    arrays = {f"class.{name}": vocab.vectors[i] for i, name in enumerate(vocab.names)}
    if vocab.no_object is not None:
        arrays["no_object"] = vocab.no_object
    bundle.save_bundle(path, arrays)
    meta = {"names": vocab.names, "has_no_object": vocab.no_object is not None}
    (Path(path) / "classes.json").write_text(
        json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def load_text_table(path) -> Vocabulary:
    """Load a saved class-embedding table; vectors are re-normalized."""
    root = Path(path)
    meta_path = root / "classes.json"
    if not meta_path.is_file():
        raise ValueError(f"not a text table (missing classes.json): {root}")
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    arrays = bundle.load_bundle(root)
    names = list(meta["names"])
    rows = []
    dim = None
    for name in names:
        key = f"class.{name}"
        if key not in arrays:
            raise ValueError(f"text table missing embedding for class {name!r}")
        vec = arrays[key]
        if vec.ndim != 1:
            raise ValueError(f"class embedding {name!r} must be a vector")
        if dim is None:
            dim = vec.shape[0]
        elif vec.shape[0] != dim:
            raise ValueError(f"class embedding {name!r} has length {vec.shape[0]}, expected {dim}")
        rows.append(l2_normalize(vec))
    no_object = None
    if meta.get("has_no_object"):
        no_object = l2_normalize(arrays["no_object"])
        if no_object.shape[0] != dim:
            raise ValueError("no-object embedding length differs from class embeddings")
    return Vocabulary(names=names, vectors=np.stack(rows), no_object=no_object)
