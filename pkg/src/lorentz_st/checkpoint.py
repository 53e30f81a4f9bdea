"""Binary checkpoint container.

Layout (all integers little-endian)::

    b"HSTC"  u32 version
    repeated until EOF:
        u32 name_length, name (UTF-8), u32 rank, u64 dims[rank],
        float64 values[prod(dims)]

Groups are written in the order given, so a fixed parameter order yields a
byte-identical file.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import FormatError

MAGIC = b"HSTC"
VERSION = 1


def save_checkpoint(path, groups: Mapping[str, np.ndarray]) -> None:
    out = bytearray(MAGIC + struct.pack("<I", VERSION))
    for name, arr in groups.items():
        # asarray, not ascontiguousarray: the latter promotes 0-d scalars to 1-d
        a = np.asarray(arr, dtype="<f8")
        key = name.encode("utf-8")
        out += struct.pack("<I", len(key)) + key
        out += struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape)
        out += a.tobytes(order="C")
    Path(path).write_bytes(bytes(out))


def load_checkpoint(path) -> dict[str, np.ndarray]:
    path = Path(path)
    raw = path.read_bytes()
    if len(raw) < 8:
        raise FormatError(path, "offset 0", "8-byte header", f"{len(raw)} bytes")
    if raw[:4] != MAGIC:
        raise FormatError(path, "offset 0", f"magic {MAGIC!r}", repr(raw[:4]))
    (version,) = struct.unpack_from("<I", raw, 4)
    if version != VERSION:
        raise FormatError(path, "offset 4", f"checkpoint format version {VERSION}", str(version))
    groups: dict[str, np.ndarray] = {}
    pos = 8

    def need(n: int, what: str) -> None:
        if pos + n > len(raw):
            raise FormatError(path, f"offset {pos}", f"{n} bytes of {what}", f"{len(raw) - pos} bytes")

    while pos < len(raw):
        need(4, "name length")
        (n,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(n, "group name")
        try:
            name = raw[pos:pos + n].decode("utf-8")
        except UnicodeDecodeError:
            raise FormatError(path, f"offset {pos}", "UTF-8 group name", "undecodable bytes") from None
        pos += n
        need(4, f"rank of {name!r}")
        (rank,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        need(8 * rank, f"dims of {name!r}")
        dims = struct.unpack_from(f"<{rank}Q", raw, pos)
        pos += 8 * rank
        count = int(np.prod(dims, dtype=np.int64)) if rank else 1
        need(8 * count, f"float64 values of {name!r}")
        groups[name] = np.frombuffer(raw, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return groups
