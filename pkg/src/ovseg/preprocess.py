"""Turn an image plus a binary mask proposal into the encoder's input.

The chain is: tight bounding box around the foreground, zero the background,
bilinear-resize the box to the encoder side, re-binarize the resized mask and
re-zero, then condense the pixel mask to a per-patch keep/masked vector.
Also houses the mask RLE codec and PNG helpers used by the dataset formats.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .numerics import Array, default_dtype


class EmptyMaskError(ValueError):
    """Raised when an operation needs at least one foreground pixel."""


@dataclass(frozen=True)
class MaskedCrop:
    """Encoder-ready crop of one mask proposal.

    ``pixels`` is (S, S, 3) float; with the default background masking every
    pixel outside the resized foreground (``pixel_mask``) is exactly zero.
    ``patch_mask`` has one {0,1} entry per patch (row-major patch order);
    0 means the patch contains no foreground pixel at all.
    """

    pixels: Array
    patch_mask: Array
    pixel_mask: Array
    bbox: tuple[int, int, int, int]  # (row0, col0, row1, col1), inclusive


def tight_bbox(mask: Array) -> tuple[int, int, int, int]:
    """Minimal axis-aligned box containing every foreground pixel."""
    mask = np.asarray(mask)
    rows = np.flatnonzero(mask.any(axis=1))
    cols = np.flatnonzero(mask.any(axis=0))
    if rows.size == 0:
        raise EmptyMaskError("mask has no foreground pixels")
    return int(rows[0]), int(cols[0]), int(rows[-1]), int(cols[-1])


def _sample_coords(n_in: int, n_out: int) -> Array:
    # corner-aligned sampling grid; a 1-wide axis collapses to its center
    if n_out == 1 or n_in == 1:
        return np.full(n_out, (n_in - 1) / 2.0)
    return np.arange(n_out) * ((n_in - 1) / (n_out - 1))


def bilinear_resize(img: Array, out_h: int, out_w: int) -> Array:
    """Corner-aligned bilinear resampling for (H, W) or (H, W, C) arrays."""
    img = np.asarray(img, dtype=default_dtype())
    in_h, in_w = img.shape[:2]
    rows = _sample_coords(in_h, out_h)
    cols = _sample_coords(in_w, out_w)
    r0 = np.floor(rows).astype(np.int64)
    c0 = np.floor(cols).astype(np.int64)
    r1 = np.minimum(r0 + 1, in_h - 1)
    c1 = np.minimum(c0 + 1, in_w - 1)
    fr = (rows - r0).astype(img.dtype)
    fc = (cols - c0).astype(img.dtype)
    if img.ndim == 3:
        fr = fr[:, None, None]
        fc = fc[None, :, None]
    else:
        fr = fr[:, None]
        fc = fc[None, :]
    top = img[r0][:, c0] * (1 - fc) + img[r0][:, c1] * fc
    bottom = img[r1][:, c0] * (1 - fc) + img[r1][:, c1] * fc
    return top * (1 - fr) + bottom * fr


def condense_mask(resized_mask: Array, patch_size: int) -> Array:
    """Per-patch keep vector: 1 iff the patch has >= 1 foreground pixel."""
    mask = np.asarray(resized_mask)
    side = mask.shape[0]
    if mask.ndim != 2 or mask.shape[1] != side:
        raise ValueError(f"expected a square mask, got shape {mask.shape}")
    if side % patch_size != 0:
        raise ValueError(f"patch size {patch_size} does not divide side {side}")
    n = side // patch_size
    blocks = mask.reshape(n, patch_size, n, patch_size)
    return blocks.any(axis=(1, 3)).reshape(n * n).astype(np.uint8)


def crop_resize_mask(image: Array, mask: Array, size: int, patch_size: int,
                     keep_background: bool = False) -> MaskedCrop:
    """Crop the mask's tight box, background-zero, resize to ``size``.

    Background zeroing happens before the resize and again after it with the
    re-binarized (>= 0.5) resized mask, so masked-out patches are exactly
    zero. ``keep_background=True`` skips both zeroing steps and yields the
    plain crop+resize pixels (the patch mask is still computed).
    """
    if size % patch_size != 0:
        raise ValueError(f"patch size {patch_size} does not divide crop size {size}")
    image = np.asarray(image)
    mask = np.asarray(mask)
    if image.shape[:2] != mask.shape:
        raise ValueError(f"image {image.shape[:2]} and mask {mask.shape} dims differ")
    r0, c0, r1, c1 = tight_bbox(mask)
    sub_img = image[r0:r1 + 1, c0:c1 + 1].astype(default_dtype())
    sub_mask = mask[r0:r1 + 1, c0:c1 + 1].astype(default_dtype())
    if not keep_background:
        sub_img = sub_img * sub_mask[:, :, None]
    pixels = bilinear_resize(sub_img, size, size)
    resized_mask = (bilinear_resize(sub_mask, size, size) >= 0.5).astype(np.uint8)
    if not keep_background:
        pixels = pixels * resized_mask[:, :, None]
    patch_mask = condense_mask(resized_mask, patch_size)
    return MaskedCrop(pixels=pixels, patch_mask=patch_mask, pixel_mask=resized_mask,
                      bbox=(r0, c0, r1, c1))


# ---------------------------------------------------------------------------
# mask run-length encoding: row-major alternating run counts, background first
# ---------------------------------------------------------------------------

def rle_encode(mask: Array) -> str:
    """Encode a binary mask, e.g. an all-foreground 2x2 mask -> "0 4"."""
    flat = np.asarray(mask).astype(np.uint8).ravel()
    if flat.size == 0:
        raise ValueError("cannot RLE-encode an empty mask")
    if not np.isin(flat, (0, 1)).all():
        raise ValueError("mask values must be strictly 0/1")
    boundaries = np.flatnonzero(np.diff(flat)) + 1
    edges = np.concatenate(([0], boundaries, [flat.size]))
    counts = np.diff(edges).tolist()
    if flat[0] == 1:
        counts.insert(0, 0)
    return " ".join(str(int(c)) for c in counts)


def rle_decode(rle: str, height: int, width: int) -> Array:
    """Decode back to an (height, width) uint8 mask."""
    text = rle.strip()
    counts = [int(tok) for tok in text.split()] if text else []
    if any(c < 0 for c in counts):
        raise ValueError(f"negative run count in RLE {rle!r}")
    total = sum(counts)
    if total != height * width:
        raise ValueError(f"RLE covers {total} pixels, expected {height * width}")
    flat = np.zeros(total, dtype=np.uint8)
    pos = 0
    value = 0
    for count in counts:
        if value:
            flat[pos:pos + count] = 1
        pos += count
        value = 1 - value
    return flat.reshape(height, width)


# ---------------------------------------------------------------------------
# PNG I/O (8-bit): RGB images in [0,1] and uint8 index maps
# ---------------------------------------------------------------------------

def read_image(path) -> Array:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=default_dtype())
    return np.clip(arr / 255.0, 0.0, 1.0)


def write_image(path, image: Array) -> None:
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    data = np.round(arr * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def read_index_map(path) -> Array:
    with Image.open(path) as im:
        if im.mode != "L":
            im = im.convert("L")
        return np.asarray(im, dtype=np.uint8).copy()


def write_index_map(path, indices: Array) -> None:
    arr = np.asarray(indices)
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("index map values must fit in uint8")
        arr = arr.astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")
