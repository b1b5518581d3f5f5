"""Flat container of named float32 arrays.

Layout (all integers little-endian)::

    b"OAFKCKPT"            magic, 8 bytes
    u8                     format version (1)
    u32 + bytes            header text, UTF-8 ``key=value`` lines
    u32                    number of arrays
    repeated:
        u16 + bytes        array name, UTF-8
        u8                 ndim
        u32 * ndim         shape
        f32 * prod(shape)  data, C order
"""
from __future__ import annotations

import struct

import numpy as np

from .errors import InvalidInput, ParseError, UnsupportedFormat

MAGIC = b"OAFKCKPT"
VERSION = 1


def format_header(header: dict) -> str:
    lines = []
    for k, v in header.items():
        k, v = str(k), str(v)
        if "=" in k or "\n" in k or "\n" in v:
            raise InvalidInput(f"header entry {k!r} cannot be encoded")
        lines.append(f"{k}={v}")
    return "\n".join(lines)


def parse_header(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ParseError(f"expected key=value, got {line!r}", line=n)
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def dumps(arrays: dict, header: dict | None = None) -> bytes:
    parts = [MAGIC, struct.pack("<B", VERSION)]
    htext = format_header(header or {}).encode("utf-8")
    parts.append(struct.pack("<I", len(htext)))
    parts.append(htext)
    parts.append(struct.pack("<I", len(arrays)))
    for name, arr in arrays.items():
        arr = np.asarray(arr, dtype="<f4", order="C")
        bname = name.encode("utf-8")
        parts.append(struct.pack("<H", len(bname)))
        parts.append(bname)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def loads(blob: bytes, source=None):
    """Inverse of :func:`dumps`; returns ``(arrays, header)``."""
    view = memoryview(blob)
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(view):
            raise ParseError("truncated checkpoint", path=source)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise ParseError("not a checkpoint file (bad magic)", path=source)
    (version,) = struct.unpack("<B", take(1))
    if version != VERSION:
        raise UnsupportedFormat(f"checkpoint version {version} (expected {VERSION})")
    (hlen,) = struct.unpack("<I", take(4))
    header = parse_header(bytes(take(hlen)).decode("utf-8"))
    (count,) = struct.unpack("<I", take(4))
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(bytes(take(nbytes)), dtype="<f4").reshape(shape).copy()
    if pos != len(view):
        raise ParseError(f"{len(view) - pos} trailing bytes after last array", path=source)
    return arrays, header


def save(path, arrays: dict, header: dict | None = None) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(arrays, header))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read(), source=str(path))
