"""Self-describing binary container: JSON header + little-endian float32/int32 blocks.

Layout:
    bytes 0..8    magic b"AVFBIN1\\n"
    bytes 8..16   uint64 LE header length in bytes
    header        UTF-8 JSON
    data          raw blocks, back to back, in header order

The header carries ``{"format_version": 1, "meta": {...}, "blocks": [...]}``
where each block entry is ``{"name", "dtype", "shape", "offset", "nbytes"}``
with ``offset`` relative to the start of the data section.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"AVFBIN1\n"
FORMAT_VERSION = 1

_DTYPES = {"float32": "<f4", "float64": "<f8", "int32": "<i4"}


class ContainerError(RuntimeError):
    pass


def write_container(path, blocks: dict, meta: dict | None = None) -> None:
    """Write named arrays to ``path``. Floats are stored as little-endian
    float32 unless the array is float64 (kept) or integer (int32)."""
    entries = []
    payloads = []
    offset = 0
    for name, arr in blocks.items():
        arr = np.asarray(arr)
        if np.issubdtype(arr.dtype, np.integer):
            dtype = "int32"
        elif arr.dtype == np.float64:
            dtype = "float64"
        else:
            dtype = "float32"
        raw = np.ascontiguousarray(arr.astype(_DTYPES[dtype])).tobytes()
        entries.append({
            "name": name,
            "dtype": dtype,
            "shape": list(arr.shape),
            "offset": offset,
            "nbytes": len(raw),
        })
        payloads.append(raw)
        offset += len(raw)

    header = json.dumps({
        "format_version": FORMAT_VERSION,
        "meta": meta or {},
        "blocks": entries,
    }).encode("utf-8")

    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(header)))
        fh.write(header)
        for raw in payloads:
            fh.write(raw)


def read_container(path) -> tuple[dict, dict]:
    """Read a container file; returns ``(blocks, meta)``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise ContainerError(f"{path}: bad magic {magic!r}")
        (hlen,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hlen).decode("utf-8"))
        if header.get("format_version") != FORMAT_VERSION:
            raise ContainerError(
                f"{path}: unsupported format_version {header.get('format_version')}")
        data = fh.read()

    blocks = {}
    for entry in header["blocks"]:
        raw = data[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=_DTYPES[entry["dtype"]])
        blocks[entry["name"]] = arr.reshape(entry["shape"]).copy()
    return blocks, header.get("meta", {})
