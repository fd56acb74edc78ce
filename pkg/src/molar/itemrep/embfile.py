"""Binary item-embedding files.

Layout (little-endian): magic ``MOLEMB1``, u32 count, u32 d, then ``count``
records of (u64 item_id, d x f32).
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

from molar.errors import FormatError

MAGIC = b"MOLEMB1"
_HEADER = struct.Struct("<II")


def save_embeddings(embeddings: dict[int, np.ndarray], path: str | Path) -> None:
    ids = sorted(embeddings)
    d = len(embeddings[ids[0]]) if ids else 0
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (d,))])
    arr = np.empty(len(ids), dtype=rec)
    for row, i in enumerate(ids):
        v = np.asarray(embeddings[i])
        if v.shape != (d,):
            raise FormatError(f"item {i}: vector has shape {v.shape}, expected ({d},)")
        arr[row] = (i, v.astype("<f4"))
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(_HEADER.pack(len(ids), d))
        fh.write(arr.tobytes())


def load_embeddings(path: str | Path) -> tuple[dict[int, np.ndarray], int]:
    blob = Path(path).read_bytes()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not an embedding file (bad magic)")
    if len(blob) < len(MAGIC) + _HEADER.size:
        raise FormatError(f"{path}: truncated header")
    count, d = _HEADER.unpack_from(blob, len(MAGIC))
    rec = np.dtype([("id", "<u8"), ("vec", "<f4", (d,))])
    body = blob[len(MAGIC) + _HEADER.size:]
    if len(body) != count * rec.itemsize:
        raise FormatError(f"{path}: expected {count} records of {rec.itemsize} bytes, found {len(body)} bytes")
    arr = np.frombuffer(body, dtype=rec)
    out: dict[int, np.ndarray] = {}
    for i, v in zip(arr["id"].tolist(), arr["vec"]):
        if i in out:
            raise FormatError(f"{path}: duplicate item_id {i}")
        out[i] = v.copy()
    return out, d


def load_external_embeddings(path: str | Path, expected_d: int, catalog_ids=None) -> dict[int, np.ndarray]:
    """Load vectors produced elsewhere, checking dimension and catalog coverage."""
    emb, d = load_embeddings(path)
    if d != expected_d:
        raise FormatError(f"{path}: embedding dimension {d} does not match expected dimension {expected_d}")
    if catalog_ids is not None:
        missing = sorted(set(int(i) for i in catalog_ids) - set(emb))
        if missing:
            shown = ", ".join(map(str, missing[:20]))
            raise FormatError(f"{path}: {len(missing)} catalog item(s) have no embedding: {shown}")
    return emb
