"""Single-file binary checkpoints.

Layout (all little-endian):

* magic ``LMN1`` (4 bytes), format version u32, kind u32
* config ints: count u32, then i64 each, in the order the writer declared
* config reals: count u32, then f64 each
* tables: count u32, then per table u32 name length, UTF-8 name,
  u64 rows, u64 cols, rows*cols f64 values in row-major order

Values are written via raw IEEE-754 bytes, so a load/save cycle is
bit-exact.  Files are written to a temporary sibling and renamed into
place.
"""

from __future__ import annotations

import os
import struct
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import CheckpointError

MAGIC = b"LMN1"
FORMAT_VERSION = 1

KIND_MEMORY = 1
KIND_MODEL = 2
KIND_SHARD = 3


@dataclass
class Checkpoint:
    kind: int
    ints: tuple[int, ...]
    reals: tuple[float, ...]
    tables: list[tuple[str, np.ndarray]]

    def table(self, name: str) -> np.ndarray:
        for key, arr in self.tables:
            if key == name:
                return arr
        raise CheckpointError(f"checkpoint has no table {name!r}")

    @property
    def table_names(self) -> list[str]:
        return [name for name, _ in self.tables]


def write_checkpoint(path: str, kind: int, ints: Sequence[int],
                     reals: Sequence[float],
                     tables: Sequence[tuple[str, np.ndarray]]) -> None:
    parts = [MAGIC, struct.pack("<II", FORMAT_VERSION, kind)]
    parts.append(struct.pack("<I", len(ints)))
    for v in ints:
        parts.append(struct.pack("<q", int(v)))
    parts.append(struct.pack("<I", len(reals)))
    for v in reals:
        parts.append(struct.pack("<d", float(v)))
    parts.append(struct.pack("<I", len(tables)))
    for name, arr in tables:
        a = np.ascontiguousarray(arr, dtype=np.float64)
        if a.ndim == 1:
            a = a.reshape(1, -1)
        if a.ndim != 2:
            raise CheckpointError(f"table {name!r} must be 1-D or 2-D")
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<I", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<QQ", a.shape[0], a.shape[1]))
        parts.append(a.astype("<f8", copy=False).tobytes())
    blob = b"".join(parts)
    tmp = f"{path}.tmp.{os.getpid()}"
    with open(tmp, "wb") as fh:
        fh.write(blob)
    os.replace(tmp, path)


class _Reader:
    def __init__(self, blob: bytes, path: str):
        self.blob = blob
        self.at = 0
        self.path = path

    def take(self, n: int) -> bytes:
        if self.at + n > len(self.blob):
            raise CheckpointError(f"{self.path}: truncated checkpoint")
        out = self.blob[self.at:self.at + n]
        self.at += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as fh:
        blob = fh.read()
    r = _Reader(blob, path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: bad magic (not an LMN1 checkpoint)")
    version, kind = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: unsupported format version {version}")
    (n_ints,) = r.unpack("<I")
    ints = tuple(r.unpack(f"<{n_ints}q")) if n_ints else ()
    (n_reals,) = r.unpack("<I")
    reals = tuple(r.unpack(f"<{n_reals}d")) if n_reals else ()
    (n_tables,) = r.unpack("<I")
    tables = []
    for _ in range(n_tables):
        (name_len,) = r.unpack("<I")
        name = r.take(name_len).decode("utf-8")
        rows, cols = r.unpack("<QQ")
        raw = r.take(rows * cols * 8)
        arr = np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(rows, cols)
        tables.append((name, arr))
    if r.at != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - r.at} trailing bytes")
    return Checkpoint(kind=kind, ints=ints, reals=reals, tables=tables)
