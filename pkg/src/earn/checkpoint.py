"""Binary weight container.

Layout: ``b"EARN"``, a little-endian uint32 format version, a little-endian
uint32 header length, the UTF-8 JSON header, then the tensor payload as
contiguous little-endian float32 arrays. The header lists every tensor's
name, shape and byte offset (relative to the payload start) plus any
caller metadata. Keys are written sorted so identical weights give
identical bytes.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .errors import DataError
from .model import Weights

MAGIC = b"EARN"
VERSION = 1
_DTYPE = np.dtype("<f4")


def encode(weights, meta=None) -> bytes:
    entries, chunks, offset = [], [], 0
    for name in sorted(weights):
        arr = np.ascontiguousarray(np.asarray(weights[name]), dtype=_DTYPE)
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = json.dumps({"tensors": entries, "meta": meta or {}}, sort_keys=True,
                        separators=(",", ":")).encode()
    return MAGIC + struct.pack("<II", VERSION, len(header)) + header + b"".join(chunks)


def decode(blob: bytes):
    """Returns (Weights, meta). Rejects bad magic, versions and out-of-bounds or overlapping tensors."""
    if blob[:4] != MAGIC:
        raise DataError("not a checkpoint (bad magic)")
    if len(blob) < 12:
        raise DataError("truncated header")
    version, hlen = struct.unpack("<II", blob[4:12])
    if version != VERSION:
        raise DataError(f"unsupported checkpoint version {version}")
    try:
        header = json.loads(blob[12:12 + hlen])
    except (json.JSONDecodeError, UnicodeDecodeError):
        raise DataError("corrupt header") from None
    payload = memoryview(blob)[12 + hlen:]
    spans, tensors = [], {}
    for e in header["tensors"]:
        shape = tuple(e["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        start = e["offset"]
        if start < 0 or start + n > len(payload):
            raise DataError(f"tensor {e['name']} out of bounds")
        spans.append((start, start + n, e["name"]))
        tensors[e["name"]] = np.frombuffer(payload[start:start + n], dtype=_DTYPE).reshape(shape).astype(np.float32)
    spans.sort()
    for (_, end, a), (start, _, b) in zip(spans, spans[1:]):
        if start < end:
            raise DataError(f"tensors {a} and {b} overlap")
    return Weights(tensors), header.get("meta", {})


def save(path, weights, meta=None):
    with open(path, "wb") as f:
        f.write(encode(weights, meta))


def load(path):
    with open(path, "rb") as f:
        return decode(f.read())
