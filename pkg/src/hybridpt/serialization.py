"""Space-filling-curve codes and grouping of the serialized point order."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

BITS = 21
_MAX = (1 << BITS) - 1


class CurveKind(enum.Enum):
    ZORDER = "z"
    ZORDER_TRANS = "z-trans"
    HILBERT = "hilbert"
    HILBERT_TRANS = "hilbert-trans"

    @property
    def transposed(self) -> bool:
        return self in (CurveKind.ZORDER_TRANS, CurveKind.HILBERT_TRANS)

    @property
    def hilbert(self) -> bool:
        return self in (CurveKind.HILBERT, CurveKind.HILBERT_TRANS)


SCHEDULE = (CurveKind.ZORDER, CurveKind.ZORDER_TRANS, CurveKind.HILBERT, CurveKind.HILBERT_TRANS)


def curve_schedule(block_index: int) -> CurveKind:
    return SCHEDULE[block_index % len(SCHEDULE)]


def _check_range(*arrays, bits: int = BITS) -> list[np.ndarray]:
    out = []
    hi = (1 << bits) - 1
    for a in arrays:
        a = np.asarray(a, dtype=np.int64)
        if a.size and (a.min() < 0 or a.max() > hi):
            raise OverflowError(f"coordinate outside [0, {hi}]")
        out.append(a.astype(np.uint64))
    return out


def _spread(v: np.ndarray) -> np.ndarray:
    v = v & np.uint64(0x1FFFFF)
    v = (v | (v << np.uint64(32))) & np.uint64(0x1F00000000FFFF)
    v = (v | (v << np.uint64(16))) & np.uint64(0x1F0000FF0000FF)
    v = (v | (v << np.uint64(8))) & np.uint64(0x100F00F00F00F00F)
    v = (v | (v << np.uint64(4))) & np.uint64(0x10C30C30C30C30C3)
    v = (v | (v << np.uint64(2))) & np.uint64(0x1249249249249249)
    return v


def _compact(v: np.ndarray) -> np.ndarray:
    v = v & np.uint64(0x1249249249249249)
    v = (v ^ (v >> np.uint64(2))) & np.uint64(0x10C30C30C30C30C3)
    v = (v ^ (v >> np.uint64(4))) & np.uint64(0x100F00F00F00F00F)
    v = (v ^ (v >> np.uint64(8))) & np.uint64(0x1F0000FF0000FF)
    v = (v ^ (v >> np.uint64(16))) & np.uint64(0x1F00000000FFFF)
    v = (v ^ (v >> np.uint64(32))) & np.uint64(0x1FFFFF)
    return v


def morton_encode(gx, gy, gz) -> np.ndarray:
    """Interleave bits: x at bit 0, y at bit 1, z at bit 2 of every level."""
    x, y, z = _check_range(gx, gy, gz)
    return _spread(x) | (_spread(y) << np.uint64(1)) | (_spread(z) << np.uint64(2))


def morton_decode(code) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    c = np.asarray(code, dtype=np.uint64)
    return (
        _compact(c).astype(np.int64),
        _compact(c >> np.uint64(1)).astype(np.int64),
        _compact(c >> np.uint64(2)).astype(np.int64),
    )


def hilbert_encode(gx, gy, gz, order_bits: int = BITS) -> np.ndarray:
    """3D Hilbert index via Skilling's transpose transform."""
    if not 1 <= order_bits <= BITS:
        raise ValueError(f"order_bits must be in [1, {BITS}]")
    X = [a.copy() for a in _check_range(gx, gy, gz, bits=order_bits)]
    one = np.uint64(1)
    m = one << np.uint64(order_bits - 1)
    # inverse undo
    q = m
    while q > one:
        p = q - one
        for i in range(3):
            hit = (X[i] & q) != 0
            t = (X[0] ^ X[i]) & p
            X[0] = np.where(hit, X[0] ^ p, X[0] ^ t)
            X[i] = np.where(hit, X[i], X[i] ^ t) if i else X[0]
        q >>= one
    # gray encode
    X[1] ^= X[0]
    X[2] ^= X[1]
    t = np.zeros_like(X[0])
    q = m
    while q > one:
        t = np.where((X[2] & q) != 0, t ^ (q - one), t)
        q >>= one
    X = [a ^ t for a in X]
    # X[0] holds the most significant bit of each level
    return _spread(X[2]) | (_spread(X[1]) << one) | (_spread(X[0]) << np.uint64(2))


def hilbert_decode(code, order_bits: int = BITS) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if not 1 <= order_bits <= BITS:
        raise ValueError(f"order_bits must be in [1, {BITS}]")
    c = np.asarray(code, dtype=np.uint64)
    if c.size and int(c.max()) >> (3 * order_bits):
        raise OverflowError(f"code exceeds {3 * order_bits} bits")
    one = np.uint64(1)
    X = [_compact(c >> np.uint64(2)), _compact(c >> one), _compact(c)]
    n_top = np.uint64(2) << np.uint64(order_bits - 1)
    # gray decode
    t = X[2] >> one
    X[2] ^= X[1]
    X[1] ^= X[0]
    X[0] ^= t
    # undo excess work
    q = np.uint64(2)
    while q != n_top:
        p = q - one
        for i in (2, 1, 0):
            hit = (X[i] & q) != 0
            t = (X[0] ^ X[i]) & p
            new0 = np.where(hit, X[0] ^ p, X[0] ^ t)
            if i:
                X[i] = np.where(hit, X[i], X[i] ^ t)
            X[0] = new0
        q <<= one
    return tuple(a.astype(np.int64) for a in X)


def encode(grid: np.ndarray, kind: CurveKind) -> np.ndarray:
    """Curve code of non-negative (N, 3) grid coordinates."""
    g = np.asarray(grid, dtype=np.int64)
    if kind.transposed:
        g = g[:, [1, 2, 0]]
    fn = hilbert_encode if kind.hilbert else morton_encode
    return fn(g[:, 0], g[:, 1], g[:, 2])


@dataclass(frozen=True)
class SerializedOrder:
    """Curve order cut into fixed-size, scene-local groups.

    ``slot_index[s]`` is the point row occupying slot ``s``; pad slots repeat
    the group's last real point and have ``pad_mask`` False.  ``slot_of[i]``
    is the real slot holding point ``i``.
    """

    permutation: np.ndarray
    slot_index: np.ndarray
    pad_mask: np.ndarray
    group_size: int
    group_scene: np.ndarray
    slot_of: np.ndarray

    @property
    def n_groups(self) -> int:
        return self.group_scene.size

    @property
    def group_starts(self) -> np.ndarray:
        return np.arange(self.n_groups, dtype=np.int64) * self.group_size

    @property
    def n_slots(self) -> int:
        return self.slot_index.size


def serialize_coords(scene_ids: np.ndarray, grid_coords: np.ndarray, kind: CurveKind, n_group: int) -> SerializedOrder:
    if n_group < 1:
        raise ValueError("n_group must be >= 1")
    scene_ids = np.asarray(scene_ids, dtype=np.int64)
    grid = np.asarray(grid_coords, dtype=np.int64)
    n = scene_ids.size
    if n == 0:
        empty = np.zeros(0, np.int64)
        return SerializedOrder(empty, empty, np.zeros(0, bool), n_group, empty, empty)
    n_scenes = int(scene_ids.max()) + 1
    # per-scene offset to a non-negative lattice
    lo = np.full((n_scenes, 3), np.iinfo(np.int64).max)
    np.minimum.at(lo, scene_ids, grid)
    codes = encode(grid - lo[scene_ids], kind)
    perm = np.lexsort((codes, scene_ids))

    counts = np.bincount(scene_ids, minlength=n_scenes)
    groups_per_scene = -(-counts // n_group)
    slots, mask, gscene = [], [], []
    start = 0
    for s in range(n_scenes):
        c = int(counts[s])
        if c == 0:
            continue
        rows = perm[start:start + c]
        start += c
        total = int(groups_per_scene[s]) * n_group
        pad = total - c
        slots.append(np.concatenate([rows, np.full(pad, rows[-1])]))
        mask.append(np.concatenate([np.ones(c, bool), np.zeros(pad, bool)]))
        gscene.append(np.full(int(groups_per_scene[s]), s))
    slot_index = np.concatenate(slots)
    pad_mask = np.concatenate(mask)
    slot_of = np.empty(n, dtype=np.int64)
    slot_of[slot_index[pad_mask]] = np.flatnonzero(pad_mask)
    return SerializedOrder(perm, slot_index, pad_mask, n_group, np.concatenate(gscene), slot_of)


def serialize(batch, kind: CurveKind, n_group: int) -> SerializedOrder:
    if batch.grid_coords is None:
        raise ValueError("serialize needs a voxelized batch")
    return serialize_coords(batch.scene_ids, batch.grid_coords, kind, n_group)
