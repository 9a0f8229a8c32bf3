"""Named-tensor checkpoint container.

Layout: magic "CAPCTL1" (7 bytes), format version u8, u32 tensor count,
then per tensor a u16 name length, the UTF-8 name, a u8 rank, u32 extents,
and float32 row-major data; all integers little-endian. A CRC32 of every
preceding byte closes the file. Tensors are written in sorted name order
so save -> load -> save is byte-identical.
"""
from __future__ import annotations

import struct
import zlib

import numpy as np

from .errors import DataError

MAGIC = b"CAPCTL1"
VERSION = 1


def save_checkpoint(path, tensors):
    """Write a mapping of name -> ndarray as a CAPCTL1 file."""
    body = bytearray()
    body += MAGIC
    body += struct.pack("<B", VERSION)
    names = sorted(tensors)
    body += struct.pack("<I", len(names))
    for name in names:
        arr = np.asarray(tensors[name], dtype=np.float32)
        if arr.ndim and not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        encoded = name.encode("utf-8")
        if len(encoded) > 0xFFFF:
            raise DataError(f"tensor name too long: {name!r}")
        if arr.ndim > 0xFF:
            raise DataError(f"tensor rank {arr.ndim} exceeds container limit")
        body += struct.pack("<H", len(encoded))
        body += encoded
        body += struct.pack("<B", arr.ndim)
        for extent in arr.shape:
            body += struct.pack("<I", extent)
        body += arr.astype("<f4").tobytes()
    body += struct.pack("<I", zlib.crc32(bytes(body)) & 0xFFFFFFFF)
    with open(path, "wb") as fh:
        fh.write(bytes(body))


def load_checkpoint(path):
    """Read a CAPCTL1 file back into a name -> float32 ndarray mapping."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < len(MAGIC) + 1 + 4 + 4:
        raise DataError(f"checkpoint {path} truncated")
    if blob[:len(MAGIC)] != MAGIC:
        raise DataError(f"checkpoint {path} has wrong magic {blob[:7]!r}")
    stored_crc = struct.unpack("<I", blob[-4:])[0]
    if zlib.crc32(blob[:-4]) & 0xFFFFFFFF != stored_crc:
        raise DataError(f"checkpoint {path} failed its CRC32 check")
    offset = len(MAGIC)
    version = blob[offset]
    offset += 1
    if version != VERSION:
        raise DataError(f"checkpoint {path} has unsupported version {version}")
    (count,) = struct.unpack_from("<I", blob, offset)
    offset += 4
    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", blob, offset)
        offset += 2
        name = blob[offset:offset + name_len].decode("utf-8")
        offset += name_len
        rank = blob[offset]
        offset += 1
        shape = struct.unpack_from(f"<{rank}I", blob, offset) if rank else ()
        offset += 4 * rank
        n_values = int(np.prod(shape)) if rank else 1
        data = np.frombuffer(blob, dtype="<f4", count=n_values, offset=offset)
        offset += 4 * n_values
        tensors[name] = data.reshape(shape).astype(np.float32)
    if offset != len(blob) - 4:
        raise DataError(f"checkpoint {path} has trailing bytes")
    return tensors


def scalar(value):
    return np.asarray(float(value), dtype=np.float32)


def meta_value(payload, name):
    """Read a metadata scalar regardless of its stored rank."""
    if name not in payload:
        raise DataError(f"checkpoint is missing metadata tensor {name!r}")
    return float(np.asarray(payload[name]).reshape(-1)[0])


def vocab_hash_tensor(fingerprint):
    # crc32 split into two exact-in-float32 16-bit halves
    return np.asarray([fingerprint >> 16, fingerprint & 0xFFFF], dtype=np.float32)


def vocab_hash_value(arr):
    hi, lo = (int(x) for x in np.asarray(arr).reshape(-1))
    return (hi << 16) | lo
