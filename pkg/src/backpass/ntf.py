"""NTF: named-tensor file.

Layout::

    8 bytes   little-endian uint64 N, the header length
    N bytes   UTF-8 JSON header
    rest      raw little-endian float64 data

The header is ``{"schema_version": 1, "tensors": [{"name", "dims", "offset"}...],
"meta": {...}}`` where ``offset`` is the byte offset of the tensor inside the
data section. Tensors are stored in the order given, row-major.
"""
from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

SCHEMA_VERSION = 1


def dumps(tensors: dict, meta: dict | None = None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in tensors.items():
        a = np.ascontiguousarray(np.asarray(arr, dtype="<f8"))
        entries.append({"name": name, "dims": list(a.shape), "offset": offset})
        chunks.append(a.tobytes())
        offset += a.nbytes
    header = json.dumps(
        {"schema_version": SCHEMA_VERSION, "tensors": entries, "meta": meta or {}},
        sort_keys=True,
    ).encode("utf-8")
    return struct.pack("<Q", len(header)) + header + b"".join(chunks)


def loads(buf: bytes):
    """Return ``(tensors, meta)``; tensors keep their stored order."""
    if len(buf) < 8:
        raise ValueError("truncated NTF file")
    (n,) = struct.unpack("<Q", buf[:8])
    header = json.loads(buf[8:8 + n].decode("utf-8"))
    if header.get("schema_version") != SCHEMA_VERSION:
        raise ValueError(f"unsupported NTF schema version {header.get('schema_version')}")
    data = memoryview(buf)[8 + n:]
    tensors = {}
    for e in header["tensors"]:
        count = int(np.prod(e["dims"])) if e["dims"] else 1
        arr = np.frombuffer(data, dtype="<f8", count=count, offset=e["offset"])
        tensors[e["name"]] = arr.astype(np.float64).reshape(e["dims"])
    return tensors, header.get("meta", {})


def save(path, tensors: dict, meta: dict | None = None):
    Path(path).write_bytes(dumps(tensors, meta))


def load(path):
    return loads(Path(path).read_bytes())
