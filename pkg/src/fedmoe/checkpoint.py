"""Named-tensor checkpoint container and its binary wire format.

Layout (all little-endian): a header of format version (u32) and
parameter count (u32), then per parameter: name length (u32), name
bytes (utf-8), rank (u32), one u32 per dimension, and the values as
32-bit floats in row-major order. Serialization round-trips byte for
byte.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

FORMAT_VERSION = 1


class ExpertCheckpoint:
    """Immutable ordered list of (name, float32 array)."""

    def __init__(self, entries: list[tuple[str, np.ndarray]]):
        names = [n for n, _ in entries]
        if len(names) != len(set(names)):
            raise ValueError("duplicate parameter names in checkpoint")
        self.entries = [(n, np.ascontiguousarray(a, dtype="<f4")) for n, a in entries]
        for _, a in self.entries:
            a.flags.writeable = False

    @property
    def names(self) -> list[str]:
        return [n for n, _ in self.entries]

    def get(self, name: str) -> np.ndarray:
        for n, a in self.entries:
            if n == name:
                return a
        raise KeyError(name)

    def __eq__(self, other) -> bool:
        if not isinstance(other, ExpertCheckpoint):
            return NotImplemented
        return self.to_bytes() == other.to_bytes()

    def __hash__(self):
        return hash(self.to_bytes())

    def to_bytes(self) -> bytes:
        chunks = [struct.pack("<II", FORMAT_VERSION, len(self.entries))]
        for name, arr in self.entries:
            raw = name.encode("utf-8")
            chunks.append(struct.pack("<I", len(raw)))
            chunks.append(raw)
            chunks.append(struct.pack("<I", arr.ndim))
            chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
            chunks.append(arr.tobytes())
        return b"".join(chunks)

    @classmethod
    def from_bytes(cls, blob: bytes) -> "ExpertCheckpoint":
        view = memoryview(blob)
        version, count = struct.unpack_from("<II", view, 0)
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported checkpoint format version {version}")
        offset = 8
        entries = []
        for _ in range(count):
            (name_len,) = struct.unpack_from("<I", view, offset)
            offset += 4
            name = bytes(view[offset:offset + name_len]).decode("utf-8")
            offset += name_len
            (rank,) = struct.unpack_from("<I", view, offset)
            offset += 4
            dims = struct.unpack_from(f"<{rank}I", view, offset)
            offset += 4 * rank
            size = int(np.prod(dims, dtype=np.int64)) if rank else 1
            arr = np.frombuffer(view, dtype="<f4", count=size, offset=offset).reshape(dims)
            offset += 4 * size
            entries.append((name, arr.copy()))
        if offset != len(blob):
            raise ValueError(f"trailing bytes in checkpoint ({len(blob) - offset})")
        return cls(entries)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "ExpertCheckpoint":
        return cls.from_bytes(Path(path).read_bytes())


def checkpoint_from_params(params) -> ExpertCheckpoint:
    """Snapshot parameters (e.g. an encoder) into a checkpoint."""
    return ExpertCheckpoint([(p.name, p.data) for p in params])


def load_into_params(ckpt: ExpertCheckpoint, params, dtype=None) -> None:
    """Copy checkpoint values into matching parameters by name."""
    by_name = {p.name: p for p in params}
    if set(by_name) != set(ckpt.names):
        missing = set(by_name) ^ set(ckpt.names)
        raise ValueError(f"checkpoint/parameter name mismatch: {sorted(missing)}")
    for name, arr in ckpt.entries:
        p = by_name[name]
        if p.data.shape != arr.shape:
            raise ValueError(f"{name}: shape {arr.shape} does not match {p.data.shape}")
        p.tensor.data = arr.astype(dtype or p.data.dtype)
