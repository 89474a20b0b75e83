"""Chunked binary weight files.

Layout: magic ``IRCN1``, then one record per array — u32 name length, UTF-8
name, u32 rank, u32 extents, raw little-endian float32 data — then a trailer:
u32 zero sentinel, u32 metadata length, UTF-8 JSON metadata, and a 32-byte
SHA-256 digest of every preceding byte.  Round-trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct

import numpy as np

from .model import ModelWeights

MAGIC = b"IRCN1"


class WeightFormatError(ValueError):
    """The file is not a valid weight file."""


def dump_weights(weights: ModelWeights) -> bytes:
    out = bytearray(MAGIC)
    for name, arr in weights.arrays.items():
        arr = np.ascontiguousarray(arr, dtype=np.float32)
        encoded = name.encode("utf-8")
        out += struct.pack("<I", len(encoded))
        out += encoded
        out += struct.pack("<I", arr.ndim)
        out += struct.pack(f"<{arr.ndim}I", *arr.shape)
        out += arr.astype("<f4", copy=False).tobytes()
    meta = json.dumps(weights.metadata, sort_keys=True).encode("utf-8")
    out += struct.pack("<I", 0)
    out += struct.pack("<I", len(meta))
    out += meta
    out += hashlib.sha256(bytes(out)).digest()
    return bytes(out)


def parse_weights(blob: bytes) -> ModelWeights:
    if blob[:5] != MAGIC:
        raise WeightFormatError(f"bad magic {blob[:5]!r}, expected {MAGIC!r}")
    if len(blob) < 5 + 4 + 4 + 32:
        raise WeightFormatError("truncated weight file")
    digest = blob[-32:]
    if hashlib.sha256(blob[:-32]).digest() != digest:
        raise WeightFormatError("weight file digest mismatch")

    pos = 5
    arrays = {}

    def read(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        vals = struct.unpack_from(fmt, blob, pos)
        pos += size
        return vals

    while True:
        (name_len,) = read("<I")
        if name_len == 0:
            break
        name = blob[pos:pos + name_len].decode("utf-8")
        pos += name_len
        (rank,) = read("<I")
        shape = read(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=pos).reshape(shape)
        pos += 4 * count
        arrays[name] = np.ascontiguousarray(arr)

    (meta_len,) = read("<I")
    meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
    return ModelWeights(arrays=arrays, metadata=meta)


def save_weights(weights: ModelWeights, path):
    with open(path, "wb") as fh:
        fh.write(dump_weights(weights))


def load_weights(path) -> ModelWeights:
    with open(path, "rb") as fh:
        return parse_weights(fh.read())
