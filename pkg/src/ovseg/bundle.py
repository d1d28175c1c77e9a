"""Tensor bundle serialization.

A bundle is a directory with a ``manifest.json`` listing every array
({name, dtype, shape, file, byte_order}) next to raw row-major
little-endian blobs. Round-trips are required to be bit exact; this is
the shared on-disk format for weights, prompt stacks and debug dumps.
"""

from __future__ import annotations

import json
import re
from pathlib import Path
from typing import Mapping

import numpy as np

from .numerics import DTYPES, Array, dtype_name

MANIFEST_NAME = "manifest.json"

_NAME_RE = re.compile(r"^[A-Za-z0-9._<>-]+$")


def _blob_filename(name: str) -> str:
    return name + ".bin"


def save_bundle(path, arrays: Mapping[str, Array]) -> None:
    """Write ``arrays`` to directory ``path`` (created if missing)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name in sorted(arrays):
        if not _NAME_RE.match(name):
            raise ValueError(f"invalid array name {name!r}")
        arr = np.ascontiguousarray(arrays[name])
        kind = dtype_name(arr.dtype)
        blob = arr.astype("<" + ("f4" if kind == "f32" else "f8"), copy=False)
        filename = _blob_filename(name)
        (root / filename).write_bytes(blob.tobytes(order="C"))
        entries.append({
            "name": name,
            "dtype": kind,
            "shape": [int(d) for d in arr.shape],
            "file": filename,
            "byte_order": "little",
        })
    manifest = json.dumps(entries, indent=2, sort_keys=True) + "\n"
    (root / MANIFEST_NAME).write_text(manifest, encoding="utf-8")


def load_bundle(path) -> dict[str, Array]:
    """Read a bundle directory back into {name: array}, bit exact."""
    root = Path(path)
    manifest_path = root / MANIFEST_NAME
    if not manifest_path.is_file():
        raise ValueError(f"not a tensor bundle (missing {MANIFEST_NAME}): {root}")
    try:
        entries = json.loads(manifest_path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ValueError(f"malformed bundle manifest: {exc}") from exc
    if not isinstance(entries, list):
        raise ValueError("malformed bundle manifest: expected a list of entries")

    arrays: dict[str, Array] = {}
    for entry in entries:
        try:
            name = entry["name"]
            kind = entry["dtype"]
            shape = tuple(int(d) for d in entry["shape"])
            filename = entry["file"]
            byte_order = entry["byte_order"]
        except (KeyError, TypeError) as exc:
            raise ValueError(f"malformed bundle entry: {entry!r}") from exc
        if kind not in DTYPES:
            raise ValueError(f"unsupported dtype {kind!r} for array {name!r}")
        if byte_order != "little":
            raise ValueError(f"unsupported byte order {byte_order!r}")
        raw = (root / filename).read_bytes()
        wire = np.dtype("<" + ("f4" if kind == "f32" else "f8"))
        expected = int(np.prod(shape, dtype=np.int64)) * wire.itemsize
        if len(raw) != expected:
            raise ValueError(
                f"blob size mismatch for {name!r}: expected {expected} bytes, got {len(raw)}")
        arr = np.frombuffer(raw, dtype=wire).reshape(shape).astype(DTYPES[kind])
        arrays[name] = arr
    return arrays
