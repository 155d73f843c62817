"""Named-parameter storage and the MMNW binary weight container.

Layout (all integers little-endian)::

    b"MMNW" | u32 version | u64 creation seed | u32 entry count
    per entry:
        u32 name length | UTF-8 name | u32 rank | rank x u32 extents
        | u8 dtype code | raw little-endian values

dtype code 0 is float32, 1 is float64.
"""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from .errors import (
    BadMagicError,
    DuplicateEntryError,
    MissingParameterError,
    TruncatedFileError,
    VersionMismatchError,
    WeightFileError,
)

MAGIC = b"MMNW"
FORMAT_VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}


@dataclass
class WeightStore:
    entries: dict[str, np.ndarray] = field(default_factory=dict)
    version: int = FORMAT_VERSION
    seed: int = 0
    warnings: list[str] = field(default_factory=list)

    def __getitem__(self, name: str) -> np.ndarray:
        try:
            return self.entries[name]
        except KeyError:
            raise MissingParameterError(f"missing weight entry {name!r}") from None

    def __setitem__(self, name: str, value: np.ndarray) -> None:
        self.entries[name] = value

    def __contains__(self, name: str) -> bool:
        return name in self.entries

    def __iter__(self):
        return iter(self.entries)

    def __len__(self) -> int:
        return len(self.entries)

    def names(self) -> list[str]:
        return list(self.entries)

    def copy(self) -> "WeightStore":
        return WeightStore({k: v.copy() for k, v in self.entries.items()}, self.version, self.seed, list(self.warnings))

    def astype(self, dtype) -> "WeightStore":
        return WeightStore(
            {k: v.astype(dtype) for k, v in self.entries.items()}, self.version, self.seed, list(self.warnings)
        )

    def equals(self, other: "WeightStore") -> bool:
        """Bit-exact comparison of names, shapes, dtypes and values."""
        if list(self.entries) != list(other.entries):
            return False
        for name, a in self.entries.items():
            b = other.entries[name]
            if a.dtype != b.dtype or a.shape != b.shape or a.tobytes() != b.tobytes():
                return False
        return True

    def subset(self, names: Iterable[str]) -> dict[str, np.ndarray]:
        return {n: self[n] for n in names}


def to_bytes(store: WeightStore) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<IQI", store.version, store.seed & 0xFFFFFFFFFFFFFFFF, len(store.entries)))
    for name, value in store.entries.items():
        arr = np.asarray(value)
        code = _CODES.get(arr.dtype)
        if code is None:
            arr = arr.astype(np.float32)
            code = 0
        raw_name = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw_name)))
        buf.write(raw_name)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(struct.pack("<B", code))
        buf.write(np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes())
    return buf.getvalue()


def save_weights(store: WeightStore, path) -> None:
    Path(path).write_bytes(to_bytes(store))


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        if self.pos + n > len(self.data):
            raise TruncatedFileError(f"file truncated while reading {what} at byte {self.pos}")
        chunk = self.data[self.pos : self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def from_bytes(data: bytes, expected_names: Optional[Iterable[str]] = None) -> WeightStore:
    r = _Reader(data)
    if len(data) < len(MAGIC) or data[: len(MAGIC)] != MAGIC:
        raise BadMagicError(f"not an MMNW weight file (magic {data[:4]!r})")
    r.pos = len(MAGIC)
    version, seed, count = r.unpack("<IQI", "header")
    if version != FORMAT_VERSION:
        raise VersionMismatchError(f"weight file version {version}, this build reads {FORMAT_VERSION}")
    entries: dict[str, np.ndarray] = {}
    for i in range(count):
        (name_len,) = r.unpack("<I", f"entry {i} name length")
        try:
            name = r.take(name_len, f"entry {i} name").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFileError(f"entry {i} name is not valid UTF-8") from exc
        (rank,) = r.unpack("<I", f"{name} rank")
        shape = r.unpack(f"<{rank}I", f"{name} extents")
        (code,) = r.unpack("<B", f"{name} dtype")
        if code not in _DTYPES:
            raise WeightFileError(f"{name}: unknown dtype code {code}")
        dt = _DTYPES[code]
        n = int(np.prod(shape, dtype=np.int64)) if rank else 1
        raw = r.take(n * dt.itemsize, f"{name} values")
        if name in entries:
            raise DuplicateEntryError(f"duplicate entry {name!r}")
        entries[name] = np.frombuffer(raw, dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
    if r.pos != len(data):
        raise WeightFileError(f"{len(data) - r.pos} trailing bytes after last entry")

    warnings: list[str] = []
    if expected_names is not None:
        expected = list(expected_names)
        known = set(expected)
        for name in list(entries):
            if name not in known:
                warnings.append(f"ignored unknown entry {name!r}")
                del entries[name]
        missing = [n for n in expected if n not in entries]
        if missing:
            raise MissingParameterError(f"weight file lacks {len(missing)} entries, first {missing[0]!r}")
        entries = {n: entries[n] for n in expected}
    return WeightStore(entries, version, seed, warnings)


def load_weights(path, expected_names: Optional[Iterable[str]] = None) -> WeightStore:
    """Read a weight file.

    When ``expected_names`` is given, entries outside that set are dropped and
    reported in ``store.warnings``; missing ones raise.
    """
    return from_bytes(Path(path).read_bytes(), expected_names)
