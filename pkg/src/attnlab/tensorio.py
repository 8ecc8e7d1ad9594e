"""ATNB binary tensor files: a tiny bit-exact container for float64/bool arrays.

Layout (all integers little-endian):

    offset 0   magic          4 bytes  b"ATNB"
    offset 4   version        u32      currently 1
    offset 8   dtype code     u8       1 = float64, 2 = boolean byte (0/1)
    offset 9   ndim           u32
    offset 13  dims           ndim x u64
    then       payload        row-major, little-endian; 8 bytes/element for
                              float64, 1 byte/element for boolean

The payload length must match the declared dims exactly — no trailing bytes.
Every decode error names the byte offset where the problem sits.
"""

from __future__ import annotations

import math
import struct

import numpy as np

MAGIC = b"ATNB"
VERSION = 1
DTYPE_FLOAT64 = 1
DTYPE_BOOL = 2
# Sanity cap; a corrupt ndim field must not drive a giant dims read.
_MAX_NDIM = 32


class TensorFormatError(ValueError):
    """Malformed ATNB bytes; the message names the offending byte offset."""


def encode_tensor(array) -> bytes:
    """Serialize a float64 or boolean array to ATNB bytes."""
    a = np.asarray(array)
    if a.dtype == np.bool_:
        code = DTYPE_BOOL
        payload = np.ascontiguousarray(a, dtype=np.uint8).tobytes()
    else:
        a = np.asarray(a, dtype=np.float64)
        code = DTYPE_FLOAT64
        payload = np.ascontiguousarray(a, dtype="<f8").tobytes()
    header = (
        MAGIC
        + struct.pack("<I", VERSION)
        + struct.pack("<B", code)
        + struct.pack("<I", a.ndim)
        + b"".join(struct.pack("<Q", d) for d in a.shape)
    )
    return header + payload


def decode_tensor(buf: bytes) -> np.ndarray:
    """Parse ATNB bytes back into an array; strict about every field."""
    offset = 0

    def take(n: int, what: str) -> bytes:
        nonlocal offset
        if offset + n > len(buf):
            raise TensorFormatError(
                f"truncated {what} at byte {offset}: need {n} bytes, have {len(buf) - offset}"
            )
        chunk = buf[offset : offset + n]
        offset += n
        return chunk

    magic = take(4, "magic")
    if magic != MAGIC:
        raise TensorFormatError(f"bad magic at byte 0: {magic!r} != {MAGIC!r}")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise TensorFormatError(f"unsupported version {version} at byte 4")
    (code,) = struct.unpack("<B", take(1, "dtype code"))
    if code not in (DTYPE_FLOAT64, DTYPE_BOOL):
        raise TensorFormatError(f"unknown dtype code {code} at byte 8")
    (ndim,) = struct.unpack("<I", take(4, "ndim"))
    if ndim > _MAX_NDIM:
        raise TensorFormatError(f"ndim {ndim} at byte 9 exceeds limit {_MAX_NDIM}")
    dims = []
    for i in range(ndim):
        (d,) = struct.unpack("<Q", take(8, f"dim {i}"))
        dims.append(int(d))
    count = math.prod(dims)
    item = 8 if code == DTYPE_FLOAT64 else 1
    payload_offset = offset
    payload = take(count * item, "payload")
    if offset != len(buf):
        raise TensorFormatError(
            f"trailing data at byte {offset}: {len(buf) - offset} extra bytes"
        )
    if code == DTYPE_FLOAT64:
        return np.frombuffer(payload, dtype="<f8").astype(np.float64).reshape(dims)
    raw = np.frombuffer(payload, dtype=np.uint8)
    bad = np.nonzero((raw != 0) & (raw != 1))[0]
    if bad.size:
        i = int(bad[0])
        raise TensorFormatError(
            f"invalid boolean byte {raw[i]} at byte {payload_offset + i}"
        )
    return (raw == 1).reshape(dims)


def write_tensor(path, array) -> None:
    """Write an array to ``path`` in ATNB format."""
    data = encode_tensor(array)
    with open(path, "wb") as f:
        f.write(data)


def read_tensor(path) -> np.ndarray:
    """Read an ATNB file; raises TensorFormatError on malformed content."""
    with open(path, "rb") as f:
        return decode_tensor(f.read())
