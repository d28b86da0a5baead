"""Point batches, the ASCII table reader, the LPTC binary container and synthetic scenes."""

from __future__ import annotations

import io
import os
import struct
from dataclasses import dataclass, replace

import numpy as np

MAGIC = b"LPTC"
VERSION = 1
# version 2 appends a scene table so multi-scene batches round-trip
VERSION_MULTI = 2
_HEADER = struct.Struct("<4sHQHd")


class FormatError(ValueError):
    """Malformed or unsupported file content."""


class UnsupportedVersionError(FormatError):
    pass


class PayloadLengthError(FormatError):
    pass


class ParseError(ValueError):
    def __init__(self, msg: str, line: int):
        super().__init__(f"line {line}: {msg}")
        self.line = line


@dataclass(frozen=True)
class PointBatch:
    """One or more scenes stacked row-wise.

    ``batch_offsets`` holds scene start rows plus a final ``N``.
    ``grid_coords`` is ``None`` until the batch has been voxelized.
    """

    coords: np.ndarray
    features: np.ndarray
    batch_offsets: np.ndarray
    grid_coords: np.ndarray | None = None
    labels: np.ndarray | None = None
    grid_size: float = 0.0

    def __post_init__(self):
        n = self.coords.shape[0]
        if self.coords.shape != (n, 3):
            raise ValueError(f"coords must be (N, 3), got {self.coords.shape}")
        if self.features.ndim != 2 or self.features.shape[0] != n:
            raise ValueError(f"features must have {n} rows, got {self.features.shape}")
        off = self.batch_offsets
        if off.ndim != 1 or off.size < 1 or off[0] != 0 or off[-1] != n:
            raise ValueError(f"batch_offsets must start at 0 and end at {n}: {off}")
        if off.size > 2 and np.any(np.diff(off) <= 0):
            raise ValueError("batch_offsets must be strictly increasing")
        if self.grid_coords is not None and self.grid_coords.shape != (n, 3):
            raise ValueError(f"grid_coords must be (N, 3), got {self.grid_coords.shape}")
        if self.labels is not None and self.labels.shape != (n,):
            raise ValueError(f"labels must be (N,), got {self.labels.shape}")

    @property
    def n_points(self) -> int:
        return self.coords.shape[0]

    @property
    def n_channels(self) -> int:
        return self.features.shape[1]

    @property
    def n_scenes(self) -> int:
        return max(self.batch_offsets.size - 1, 1 if self.n_points else 0)

    @property
    def scene_ids(self) -> np.ndarray:
        return offsets_to_ids(self.batch_offsets)

    def with_(self, **changes) -> "PointBatch":
        return replace(self, **changes)


def offsets_to_ids(offsets: np.ndarray) -> np.ndarray:
    counts = np.diff(offsets)
    return np.repeat(np.arange(counts.size), counts)


def ids_to_offsets(ids: np.ndarray) -> np.ndarray:
    """Offsets from sorted, dense scene ids."""
    if ids.size == 0:
        return np.zeros(1, dtype=np.int64)
    counts = np.bincount(ids)
    return np.concatenate(([0], np.cumsum(counts))).astype(np.int64)


def make_batch(coords, features, labels=None, offsets=None) -> PointBatch:
    coords = np.asarray(coords, dtype=np.float64).reshape(-1, 3)
    features = np.asarray(features, dtype=np.float64)
    if features.ndim == 1:
        features = features.reshape(coords.shape[0], -1)
    if offsets is None:
        offsets = [0, coords.shape[0]]
    return PointBatch(
        coords=coords,
        features=features,
        batch_offsets=np.asarray(offsets, dtype=np.int64),
        labels=None if labels is None else np.asarray(labels, dtype=np.int64),
    )


def concat_batches(batches: list[PointBatch]) -> PointBatch:
    offsets = [0]
    for b in batches:
        for count in np.diff(b.batch_offsets):
            offsets.append(offsets[-1] + int(count))
    has_labels = all(b.labels is not None for b in batches)
    has_grid = all(b.grid_coords is not None for b in batches)
    return PointBatch(
        coords=np.concatenate([b.coords for b in batches]),
        features=np.concatenate([b.features for b in batches]),
        batch_offsets=np.asarray(offsets, dtype=np.int64),
        grid_coords=np.concatenate([b.grid_coords for b in batches]) if has_grid else None,
        labels=np.concatenate([b.labels for b in batches]) if has_labels else None,
        grid_size=batches[0].grid_size if batches else 0.0,
    )


def read_ascii(path, has_labels: bool | None = None) -> PointBatch:
    """Whitespace table ``x y z f1 .. fC [label]``.

    With ``has_labels=None`` a trailing label column is recognized only when
    every row's last token is a non-negative integer literal and at least one
    feature column remains; otherwise all columns after xyz are features.
    """
    rows: list[list[str]] = []
    width = None
    with open(path) as fh:
        for lineno, line in enumerate(fh, start=1):
            parts = line.split()
            if not parts:
                continue
            if width is None:
                width = len(parts)
                if width < 3:
                    raise ParseError(f"expected at least 3 columns, got {width}", lineno)
            elif len(parts) != width:
                raise ParseError(f"expected {width} columns, got {len(parts)}", lineno)
            try:
                vals = [float(p) for p in parts]
            except ValueError as exc:
                raise ParseError(str(exc), lineno) from None
            if not all(np.isfinite(vals)):
                raise ParseError("non-finite value", lineno)
            rows.append(parts)
    if not rows:
        return make_batch(np.zeros((0, 3)), np.zeros((0, 0)))
    table = np.array(rows, dtype=np.float64)
    labels = None
    if has_labels is None:
        last = table[:, -1]
        has_labels = (
            table.shape[1] >= 5
            and all(r[-1].isdigit() for r in rows)
            and bool(np.all(last <= 0xFFFF))
        )
    if has_labels:
        labels = table[:, -1].astype(np.int64)
        table = table[:, :-1]
    return make_batch(table[:, :3], table[:, 3:], labels)


def write_binary(batch: PointBatch, path) -> None:
    n, c = batch.features.shape
    multi = batch.batch_offsets.size > 2
    buf = io.BytesIO()
    buf.write(_HEADER.pack(MAGIC, VERSION_MULTI if multi else VERSION, n, c, float(batch.grid_size)))
    if multi:
        buf.write(struct.pack("<I", batch.batch_offsets.size - 1))
        buf.write(batch.batch_offsets.astype("<u8").tobytes())
    buf.write(np.ascontiguousarray(batch.coords, dtype="<f8").tobytes())
    buf.write(np.ascontiguousarray(batch.features, dtype="<f8").tobytes())
    if batch.labels is not None:
        if batch.labels.size and (batch.labels.min() < 0 or batch.labels.max() > 0xFFFF):
            raise ValueError("labels must fit in u16")
        buf.write(batch.labels.astype("<u2").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def read_binary(path) -> PointBatch:
    with open(path, "rb") as fh:
        blob = fh.read()
    if len(blob) < _HEADER.size:
        raise PayloadLengthError(f"{path}: file shorter than header")
    magic, version, n, c, grid = _HEADER.unpack_from(blob, 0)
    if magic != MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}")
    if version not in (VERSION, VERSION_MULTI):
        raise UnsupportedVersionError(f"{path}: unsupported version {version:#x}")
    pos = _HEADER.size
    offsets = np.array([0, n], dtype=np.int64)
    if version == VERSION_MULTI:
        if len(blob) < pos + 4:
            raise PayloadLengthError(f"{path}: truncated scene table")
        (n_scenes,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        need = 8 * (n_scenes + 1)
        if len(blob) < pos + need:
            raise PayloadLengthError(f"{path}: truncated scene table")
        offsets = np.frombuffer(blob, dtype="<u8", count=n_scenes + 1, offset=pos).astype(np.int64)
        pos += need
    body = 8 * 3 * n + 8 * c * n
    rest = len(blob) - pos
    if rest == body:
        has_labels = False
    elif rest == body + 2 * n:
        has_labels = True
    else:
        raise PayloadLengthError(f"{path}: header declares {n} points x {c} channels, payload is {rest} bytes")
    coords = np.frombuffer(blob, dtype="<f8", count=3 * n, offset=pos).reshape(n, 3).astype(np.float64)
    pos += 24 * n
    feats = np.frombuffer(blob, dtype="<f8", count=c * n, offset=pos).reshape(n, c).astype(np.float64)
    pos += 8 * c * n
    labels = None
    if has_labels:
        labels = np.frombuffer(blob, dtype="<u2", count=n, offset=pos).astype(np.int64)
    grid_coords = np.floor(coords / grid).astype(np.int64) if grid > 0 else None
    return PointBatch(coords, feats, offsets, grid_coords, labels, float(grid))


def read_any(path) -> PointBatch:
    """Dispatch on extension: ``.lptc`` binary, anything else ASCII."""
    if not os.path.exists(path):
        raise FileNotFoundError(f"no such file: {path}")
    if str(path).lower().endswith(".lptc"):
        return read_binary(path)
    return read_ascii(path)


def write_ascii(batch: PointBatch, path) -> None:
    cols = [batch.coords, batch.features]
    fmt = ["%.17g"] * (3 + batch.n_channels)
    if batch.labels is not None:
        cols.append(batch.labels.reshape(-1, 1))
        fmt.append("%d")
    np.savetxt(path, np.hstack(cols), fmt=fmt)


def write_any(batch: PointBatch, path) -> None:
    if str(path).lower().endswith(".lptc"):
        write_binary(batch, path)
    else:
        write_ascii(batch, path)


@dataclass(frozen=True)
class SlabLayout:
    axis: int
    extent: float
    n_classes: int

    def label(self, coords: np.ndarray) -> np.ndarray:
        t = (coords[:, self.axis] + self.extent / 2) / self.extent
        return np.clip(np.floor(t * self.n_classes), 0, self.n_classes - 1).astype(np.int64)


def make_synthetic_scene(seed: int, n_points: int, extent_m: float = 2.0, n_classes: int = 4,
                         axis: int | None = None) -> PointBatch:
    """Uniform points in a cube centred on the origin, labelled by slab along a random axis."""
    if n_points < 1:
        raise ValueError("n_points must be >= 1")
    rng = np.random.default_rng(seed)
    if axis is None:
        axis = int(rng.integers(3))
    coords = rng.uniform(-extent_m / 2, extent_m / 2, size=(n_points, 3))
    labels = SlabLayout(axis, extent_m, n_classes).label(coords)
    return make_batch(coords, coords.copy(), labels)
