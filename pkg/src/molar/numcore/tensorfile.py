"""Self-describing binary tensor files.

Layout: magic bytes, u32 header length, UTF-8 JSON header, then each tensor's
raw little-endian bytes in header order.  The header lists name, dtype and
shape for every tensor plus free-form metadata.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from molar.errors import FormatError

_LEN = struct.Struct("<I")
_DTYPES = {"f4": "<f4", "f8": "<f8", "i8": "<i8", "u8": "<u8", "u4": "<u4"}


def dump_tensors(magic: bytes, meta: dict, tensors: list[tuple[str, np.ndarray]], dtype: str = "f4") -> bytes:
    """Serialize ``tensors`` (in the given order) with ``meta`` into one blob."""
    entries, blobs = [], []
    for name, arr in tensors:
        arr = np.asarray(arr)
        kind = dtype if arr.dtype.kind == "f" else {"i": "i8", "u": "u8"}[arr.dtype.kind]
        entries.append({"name": name, "dtype": kind, "shape": list(arr.shape)})
        blobs.append(np.ascontiguousarray(arr, dtype=_DTYPES[kind]).tobytes())
    header = json.dumps({"meta": meta, "tensors": entries}, sort_keys=True, separators=(",", ":")).encode()
    return magic + _LEN.pack(len(header)) + header + b"".join(blobs)


def parse_tensors(magic: bytes, blob: bytes, source: str = "<bytes>") -> tuple[dict, dict[str, np.ndarray]]:
    if blob[: len(magic)] != magic:
        raise FormatError(f"{source}: bad magic, expected {magic!r}")
    off = len(magic)
    if len(blob) < off + _LEN.size:
        raise FormatError(f"{source}: truncated header")
    (hlen,) = _LEN.unpack_from(blob, off)
    off += _LEN.size
    try:
        header = json.loads(blob[off:off + hlen].decode())
        entries = header["tensors"]
    except (ValueError, KeyError, UnicodeDecodeError) as exc:
        raise FormatError(f"{source}: corrupt header ({exc})") from exc
    off += hlen
    out: dict[str, np.ndarray] = {}
    for e in entries:
        dt = np.dtype(_DTYPES[e["dtype"]])
        n = int(np.prod(e["shape"], dtype=np.int64)) * dt.itemsize
        if off + n > len(blob):
            raise FormatError(f"{source}: tensor {e['name']!r} runs past end of file")
        out[e["name"]] = np.frombuffer(blob[off:off + n], dtype=dt).reshape(e["shape"]).copy()
        off += n
    if off != len(blob):
        raise FormatError(f"{source}: {len(blob) - off} trailing bytes")
    return header["meta"], out


def save_tensors(path: str | Path, magic: bytes, meta: dict, tensors, dtype: str = "f4") -> None:
    Path(path).write_bytes(dump_tensors(magic, meta, tensors, dtype))


def load_tensors(path: str | Path, magic: bytes) -> tuple[dict, dict[str, np.ndarray]]:
    return parse_tensors(magic, Path(path).read_bytes(), str(path))
