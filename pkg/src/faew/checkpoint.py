"""
Binary checkpoint container.

Layout (all integers little-endian)::

    b"FAEW" | u16 version=1 | u32 count |
    count x ( u16 name_len | name utf-8 | u8 rank | rank x u32 extent | f32 payload ) |
    u32 crc32 of every byte after the magic
"""
from __future__ import annotations

import os
import struct
import zlib
from typing import Mapping

import numpy as np

from .errors import FormatError
from .nn import LayerParams, Parameter
from .tensor import Tensor

MAGIC = b"FAEW"
VERSION = 1


def encode(params: Mapping[str, Tensor]) -> bytes:
    body = bytearray(struct.pack("<HI", VERSION, len(params)))
    for name, t in params.items():
        raw = name.encode("utf-8")
        data = t.data if isinstance(t, Tensor) else np.asarray(t)
        body += struct.pack("<H", len(raw)) + raw
        body += struct.pack("<B", data.ndim)
        body += struct.pack(f"<{data.ndim}I", *data.shape)
        body += np.ascontiguousarray(data, dtype="<f4").tobytes()
    return MAGIC + bytes(body) + struct.pack("<I", zlib.crc32(body))


def decode(buf: bytes) -> LayerParams:
    pos = 0

    def take(n: int, what: str) -> bytes:
        nonlocal pos
        if pos + n > len(buf):
            raise FormatError(f"truncated while reading {what}", pos)
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise FormatError("bad magic", 0)
    (version,) = struct.unpack("<H", take(2, "version"))
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    out = LayerParams()
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        name = take(nlen, "name").decode("utf-8")
        (rank,) = struct.unpack("<B", take(1, "rank"))
        shape = struct.unpack(f"<{rank}I", take(4 * rank, "extents"))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        payload = take(nbytes, f"payload of {name!r}")
        out[name] = Parameter(np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(shape),
                              init="checkpoint", requires_grad=False)
    crc_at = pos
    (crc,) = struct.unpack("<I", take(4, "crc"))
    if pos != len(buf):
        raise FormatError("trailing bytes after crc", pos)
    if zlib.crc32(buf[4:crc_at]) != crc:
        raise FormatError("crc mismatch", crc_at)
    return out


def checkpoint_save(params: Mapping[str, Tensor], path) -> None:
    with open(path, "wb") as fh:
        fh.write(encode(params))


def checkpoint_load(path) -> LayerParams:
    with open(os.fspath(path), "rb") as fh:
        return decode(fh.read())
