"""Flat parameter vectors with a named segment table, plus checkpoint files.

A :class:`ParameterVector` is the unit every client uploads and every
aggregation rule consumes.  All encoder weights, batch-norm affine terms and
batch-norm running statistics live in one contiguous array; the
:class:`Layout` records where each named tensor sits.

Checkpoint layout (all integers little-endian)::

    magic        8 bytes  b"FSSLCKPT"
    version      u16
    float width  u8       (32 or 64)
    spec hash    32 bytes (sha256 of the canonical encoder description)
    n segments   u32
    per segment: name_len u16, name utf-8, kind_len u8, kind ascii,
                 ndim u8, dims u32 * ndim, offset u64, length u64
    payload      length * (width / 8) bytes, little-endian floats
"""

from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from ..errors import LayoutError

MAGIC = b"FSSLCKPT"
VERSION = 1

# segment kinds
WEIGHT = "weight"
BN_AFFINE = "bn_affine"
BN_STAT = "bn_stat"
KINDS = (WEIGHT, BN_AFFINE, BN_STAT)


@dataclass(frozen=True)
class Segment:
    name: str
    offset: int
    length: int
    shape: tuple[int, ...]
    kind: str = WEIGHT

    @property
    def stop(self) -> int:
        return self.offset + self.length

    @property
    def is_bn(self) -> bool:
        return self.kind in (BN_AFFINE, BN_STAT)


class Layout:
    """Ordered, immutable segment table."""

    __slots__ = ("segments", "size", "_index")

    def __init__(self, segments: Iterable[Segment]):
        segs = tuple(segments)
        pos = 0
        index = {}
        for s in segs:
            if s.offset != pos:
                raise LayoutError(f"segment {s.name!r} starts at {s.offset}, expected {pos}")
            if int(np.prod(s.shape, dtype=np.int64)) != s.length:
                raise LayoutError(f"segment {s.name!r}: shape {s.shape} does not hold {s.length} values")
            if s.kind not in KINDS:
                raise LayoutError(f"segment {s.name!r}: unknown kind {s.kind!r}")
            if s.name in index:
                raise LayoutError(f"duplicate segment name {s.name!r}")
            index[s.name] = s
            pos = s.stop
        self.segments = segs
        self.size = pos
        self._index = index

    @classmethod
    def from_shapes(cls, entries: Sequence[tuple[str, tuple[int, ...], str]]) -> "Layout":
        segs, pos = [], 0
        for name, shape, kind in entries:
            n = int(np.prod(shape, dtype=np.int64))
            segs.append(Segment(name, pos, n, tuple(int(d) for d in shape), kind))
            pos += n
        return cls(segs)

    def __getitem__(self, name: str) -> Segment:
        return self._index[name]

    def __contains__(self, name: str) -> bool:
        return name in self._index

    def __iter__(self):
        return iter(self.segments)

    def __len__(self) -> int:
        return len(self.segments)

    def __eq__(self, other) -> bool:
        return isinstance(other, Layout) and self.segments == other.segments

    def __hash__(self) -> int:
        return hash(self.segments)

    def __repr__(self) -> str:
        return f"Layout({len(self.segments)} segments, size={self.size})"

    def mask(self, *kinds: str) -> np.ndarray:
        """Boolean mask over coordinates belonging to segments of ``kinds``."""
        m = np.zeros(self.size, dtype=bool)
        for s in self.segments:
            if s.kind in kinds:
                m[s.offset : s.stop] = True
        return m


class ParameterVector:
    """A flat float array paired with its :class:`Layout`."""

    __slots__ = ("values", "layout")

    def __init__(self, values: np.ndarray, layout: Layout):
        values = np.asarray(values)
        if values.ndim != 1 or values.shape[0] != layout.size:
            raise LayoutError(f"values of shape {values.shape} do not match layout size {layout.size}")
        if values.dtype not in (np.float32, np.float64):
            values = values.astype(np.float64)
        self.values = values
        self.layout = layout

    @classmethod
    def zeros(cls, layout: Layout, dtype=np.float64) -> "ParameterVector":
        return cls(np.zeros(layout.size, dtype=dtype), layout)

    def __len__(self) -> int:
        return self.values.shape[0]

    def __repr__(self) -> str:
        return f"ParameterVector(n={len(self)}, dtype={self.values.dtype}, segments={len(self.layout)})"

    @property
    def dtype(self):
        return self.values.dtype

    def view(self, name: str) -> np.ndarray:
        """Shaped view of one segment; writes go through to the vector."""
        s = self.layout[name]
        return self.values[s.offset : s.stop].reshape(s.shape)

    def copy(self) -> "ParameterVector":
        return ParameterVector(self.values.copy(), self.layout)

    def with_values(self, values: np.ndarray) -> "ParameterVector":
        return ParameterVector(np.asarray(values, dtype=self.values.dtype), self.layout)

    def check_layout(self, other: "ParameterVector | Layout") -> None:
        if self.layout != getattr(other, "layout", other):
            raise LayoutError("parameter layouts differ")

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, ParameterVector)
            and self.layout == other.layout
            and self.values.dtype == other.values.dtype
            and np.array_equal(self.values, other.values)
        )

    __hash__ = None

    # serialization -------------------------------------------------------

    def to_bytes(self, spec_hash: bytes = b"\0" * 32) -> bytes:
        buf = io.BytesIO()
        write_checkpoint(buf, self, spec_hash)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "ParameterVector":
        return read_checkpoint(io.BytesIO(data))[0]


def write_checkpoint(fh, params: ParameterVector, spec_hash: bytes) -> None:
    if len(spec_hash) != 32:
        raise ValueError("spec hash must be 32 bytes")
    width = 32 if params.values.dtype == np.float32 else 64
    fh.write(MAGIC)
    fh.write(struct.pack("<HB", VERSION, width))
    fh.write(spec_hash)
    fh.write(struct.pack("<I", len(params.layout)))
    for s in params.layout:
        name = s.name.encode("utf-8")
        kind = s.kind.encode("ascii")
        fh.write(struct.pack("<H", len(name)) + name)
        fh.write(struct.pack("<B", len(kind)) + kind)
        fh.write(struct.pack("<B", len(s.shape)))
        fh.write(struct.pack(f"<{len(s.shape)}I", *s.shape))
        fh.write(struct.pack("<QQ", s.offset, s.length))
    dt = "<f4" if width == 32 else "<f8"
    fh.write(params.values.astype(dt, copy=False).tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise LayoutError("truncated checkpoint")
    return data


def read_checkpoint(fh) -> tuple[ParameterVector, bytes]:
    """Return ``(params, spec_hash)`` from an open binary stream."""
    if _read_exact(fh, 8) != MAGIC:
        raise LayoutError("not a checkpoint file (bad magic)")
    version, width = struct.unpack("<HB", _read_exact(fh, 3))
    if version != VERSION:
        raise LayoutError(f"unsupported checkpoint version {version}")
    if width not in (32, 64):
        raise LayoutError(f"unsupported float width {width}")
    spec_hash = _read_exact(fh, 32)
    (n,) = struct.unpack("<I", _read_exact(fh, 4))
    segs = []
    for _ in range(n):
        (ln,) = struct.unpack("<H", _read_exact(fh, 2))
        name = _read_exact(fh, ln).decode("utf-8")
        (lk,) = struct.unpack("<B", _read_exact(fh, 1))
        kind = _read_exact(fh, lk).decode("ascii")
        (nd,) = struct.unpack("<B", _read_exact(fh, 1))
        shape = struct.unpack(f"<{nd}I", _read_exact(fh, 4 * nd))
        offset, length = struct.unpack("<QQ", _read_exact(fh, 16))
        segs.append(Segment(name, offset, length, tuple(shape), kind))
    layout = Layout(segs)
    dt = np.dtype("<f4" if width == 32 else "<f8")
    raw = _read_exact(fh, layout.size * dt.itemsize)
    values = np.frombuffer(raw, dtype=dt).astype(np.float32 if width == 32 else np.float64)
    return ParameterVector(values, layout), spec_hash


def save_checkpoint(path, params: ParameterVector, spec_hash: bytes) -> None:
    with open(Path(path), "wb") as fh:
        write_checkpoint(fh, params, spec_hash)


def load_checkpoint(path, expect_hash: bytes | None = None) -> tuple[ParameterVector, bytes]:
    with open(Path(path), "rb") as fh:
        params, spec_hash = read_checkpoint(fh)
    if expect_hash is not None and spec_hash != expect_hash:
        raise LayoutError("checkpoint was written for a different encoder spec")
    return params, spec_hash


def digest(text: str) -> bytes:
    return hashlib.sha256(text.encode("utf-8")).digest()
