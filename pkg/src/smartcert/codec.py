"""Canonical argument encoding: a sequence of u32-length-prefixed byte fields."""
from __future__ import annotations

import struct


class DecodeError(ValueError):
    pass


def pack(*fields: bytes) -> bytes:
    return b"".join(struct.pack(">I", len(f)) + bytes(f) for f in fields)


def unpack(data: bytes, count: int | None = None) -> list[bytes]:
    out = []
    pos = 0
    while pos < len(data):
        if pos + 4 > len(data):
            raise DecodeError("truncated length prefix")
        (n,) = struct.unpack(">I", data[pos : pos + 4])
        pos += 4
        if pos + n > len(data):
            raise DecodeError("truncated field")
        out.append(data[pos : pos + n])
        pos += n
    if count is not None and len(out) != count:
        raise DecodeError(f"expected {count} fields, got {len(out)}")
    return out


def pack_list(items) -> bytes:
    return pack(*items)


def unpack_list(data: bytes) -> list[bytes]:
    return unpack(data)
