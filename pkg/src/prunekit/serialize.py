"""Binary container for named tensors with a JSON metadata header.

Layout: magic, u64 header length, UTF-8 JSON metadata (sorted keys, so
identical content gives identical bytes), u32 tensor count, then per tensor
a length-prefixed name, dtype string, shape, and raw little-endian data.
Round trips are bit-exact.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractError

MAGIC = b"PKTC0001"


def save_container(path, metadata: dict, tensors: dict) -> None:
    buf = bytearray()
    buf += MAGIC
    header = json.dumps(metadata, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf += struct.pack("<Q", len(header))
    buf += header
    buf += struct.pack("<I", len(tensors))
    for name in sorted(tensors):
        arr = np.ascontiguousarray(tensors[name])
        nb = name.encode("utf-8")
        dt = arr.dtype.newbyteorder("<").str.encode("ascii")
        buf += struct.pack("<I", len(nb))
        buf += nb
        buf += struct.pack("<I", len(dt))
        buf += dt
        buf += struct.pack("<B", arr.ndim)
        for dim in arr.shape:
            buf += struct.pack("<Q", dim)
        raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
        buf += struct.pack("<Q", len(raw))
        buf += raw
    Path(path).write_bytes(bytes(buf))


def load_container(path):
    raw = Path(path).read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise ContractError(f"{path}: not a tensor container")
    off = len(MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, off)
    off += 8
    metadata = json.loads(raw[off : off + hlen].decode("utf-8"))
    off += hlen
    (count,) = struct.unpack_from("<I", raw, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        name = raw[off : off + nlen].decode("utf-8")
        off += nlen
        (dlen,) = struct.unpack_from("<I", raw, off)
        off += 4
        dtype = np.dtype(raw[off : off + dlen].decode("ascii"))
        off += dlen
        (ndim,) = struct.unpack_from("<B", raw, off)
        off += 1
        shape = struct.unpack_from(f"<{ndim}Q", raw, off) if ndim else ()
        off += 8 * ndim
        (nbytes,) = struct.unpack_from("<Q", raw, off)
        off += 8
        arr = np.frombuffer(raw[off : off + nbytes], dtype=dtype).reshape(shape).copy()
        off += nbytes
        tensors[name] = arr
    return metadata, tensors


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()
