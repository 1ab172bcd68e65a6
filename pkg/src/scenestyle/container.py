"""Flat binary container for float planes (g-buffer cache, checkpoints).

Byte layout, all integers little-endian::

    offset  size  field
    0       4     magic b"SSGB"
    4       2     version (uint16)
    6       4     height H (uint32)
    10      4     width W (uint32)
    14      2     channel count C (uint16)
    16      ...   C channel names, each uint16 length + UTF-8 bytes
    ...     ...   C planes of H*W float32 values, row-major

Planes follow the header in channel order with no padding.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"SSGB"
VERSION = 1

_HEADER = struct.Struct("<4sHIIH")


class ContainerError(ValueError):
    pass


def write_container(path: str | Path, planes: dict[str, np.ndarray]) -> None:
    if not planes:
        raise ContainerError("container needs at least one plane")
    shapes = {np.shape(p) for p in planes.values()}
    if len(shapes) != 1 or len(next(iter(shapes))) != 2:
        raise ContainerError(f"planes must share one 2D shape, got {shapes}")
    h, w = next(iter(shapes))
    chunks = [_HEADER.pack(MAGIC, VERSION, h, w, len(planes))]
    for name in planes:
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<H", len(raw)) + raw)
    for plane in planes.values():
        chunks.append(np.ascontiguousarray(plane, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_container(path: str | Path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise ContainerError(f"{path}: truncated header")
    magic, version, h, w, c = _HEADER.unpack_from(data, 0)
    if magic != MAGIC:
        raise ContainerError(f"{path}: bad magic {magic!r}")
    if version != VERSION:
        raise ContainerError(f"{path}: unsupported container version {version} (expected {VERSION})")
    offset = _HEADER.size
    names = []
    for _ in range(c):
        (n,) = struct.unpack_from("<H", data, offset)
        offset += 2
        names.append(data[offset:offset + n].decode("utf-8"))
        offset += n
    expected = offset + c * h * w * 4
    if len(data) != expected:
        raise ContainerError(f"{path}: expected {expected} bytes, found {len(data)}")
    values = np.frombuffer(data, dtype="<f4", offset=offset).reshape(c, h, w)
    return {name: values[i].astype(np.float32) for i, name in enumerate(names)}
