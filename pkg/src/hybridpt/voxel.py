"""Grid sampling, voxel lookup, and stride-2 grid pooling/unpooling."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, RunningStats, Value, add, batch_norm, gather_rows, gelu, linear, segment_max
from .pointcloud import PointBatch, ids_to_offsets


class VoxelIndex:
    """Map from ``(scene, gx, gy, gz)`` to row index.

    Keys are packed into int64 and kept sorted, so lookups are vectorized
    binary searches.  ``margin`` widens the packing range so neighbours up to
    that distance outside the occupied box can be queried (they just miss).
    """

    def __init__(self, scene_ids: np.ndarray, grid_coords: np.ndarray, margin: int = 2):
        scene_ids = np.asarray(scene_ids, dtype=np.int64)
        grid_coords = np.asarray(grid_coords, dtype=np.int64)
        self.keys = np.column_stack([scene_ids, grid_coords]) if scene_ids.size else np.zeros((0, 4), np.int64)
        n = scene_ids.size
        if n:
            self._lo = grid_coords.min(axis=0) - margin
            hi = grid_coords.max(axis=0) + margin
        else:
            self._lo = np.zeros(3, np.int64)
            hi = np.zeros(3, np.int64)
        self._span = (hi - self._lo + 1).astype(np.int64)
        n_scenes = int(scene_ids.max()) + 1 if n else 1
        if n_scenes * int(np.prod([int(s) for s in self._span])) >= 2**62:
            raise OverflowError("grid extent too large to pack voxel keys")
        packed = self._pack(scene_ids, grid_coords)
        self._order = np.argsort(packed, kind="stable")
        self._sorted = packed[self._order]
        if n > 1 and np.any(self._sorted[1:] == self._sorted[:-1]):
            raise ValueError("duplicate (scene, grid) keys; voxelize first")

    def _pack(self, scene, coords):
        c = coords - self._lo
        sx, sy, sz = (int(s) for s in self._span)
        return ((scene * sx + c[:, 0]) * sy + c[:, 1]) * sz + c[:, 2]

    def __len__(self) -> int:
        return self.keys.shape[0]

    def __getitem__(self, key) -> int:
        scene, gx, gy, gz = key
        row = self.lookup(np.array([scene]), np.array([[gx, gy, gz]]))[0]
        if row < 0:
            raise KeyError(key)
        return int(row)

    def lookup(self, scene_ids: np.ndarray, coords: np.ndarray) -> np.ndarray:
        """Row index per query, ``-1`` where absent."""
        coords = np.asarray(coords, dtype=np.int64)
        out = np.full(coords.shape[0], -1, dtype=np.int64)
        if len(self) == 0 or coords.shape[0] == 0:
            return out
        c = coords - self._lo
        inside = np.all((c >= 0) & (c < self._span), axis=1)
        if not inside.any():
            return out
        packed = self._pack(np.asarray(scene_ids)[inside], coords[inside])
        pos = np.searchsorted(self._sorted, packed)
        pos_c = np.minimum(pos, self._sorted.size - 1)
        hit = self._sorted[pos_c] == packed
        rows = np.where(hit, self._order[pos_c], -1)
        out[inside] = rows
        return out


def voxelize(batch: PointBatch, grid_size_m: float) -> PointBatch:
    """Quantize to ``floor(coords / grid)`` and merge points sharing a cell.

    The merged row sits at the lowest original index of its cell and carries
    the mean coordinate and mean feature of the cell; its label is the
    representative's label.
    """
    if not grid_size_m > 0:
        raise ValueError(f"grid size must be positive, got {grid_size_m}")
    n = batch.n_points
    grid = np.floor(batch.coords / grid_size_m).astype(np.int64)
    if n == 0:
        return batch.with_(grid_coords=grid, grid_size=float(grid_size_m))
    scene = batch.scene_ids
    order = np.lexsort((grid[:, 2], grid[:, 1], grid[:, 0], scene))
    key = np.column_stack([scene, grid])[order]
    new = np.ones(n, dtype=bool)
    new[1:] = np.any(key[1:] != key[:-1], axis=1)
    cell_sorted = np.cumsum(new) - 1
    cell = np.empty(n, dtype=np.int64)
    cell[order] = cell_sorted
    n_cells = int(cell_sorted[-1]) + 1
    # representative = lowest original index; output rows in representative order
    rep = np.full(n_cells, n, dtype=np.int64)
    np.minimum.at(rep, cell, np.arange(n))
    rank = np.empty(n_cells, dtype=np.int64)
    rank[np.argsort(rep, kind="stable")] = np.arange(n_cells)
    out_row = rank[cell]
    counts = np.bincount(out_row, minlength=n_cells).astype(np.float64)[:, None]

    def mean(a):
        s = np.zeros((n_cells, a.shape[1]))
        np.add.at(s, out_row, a)
        return s / counts

    reps = np.sort(rep)
    coords = mean(batch.coords)
    return PointBatch(
        coords=coords,
        features=mean(batch.features),
        batch_offsets=ids_to_offsets(scene[reps]) if batch.batch_offsets.size > 2 else np.array([0, n_cells]),
        grid_coords=grid[reps],
        labels=None if batch.labels is None else batch.labels[reps],
        grid_size=float(grid_size_m),
    )


@dataclass
class PoolingPlan:
    """Fine-to-coarse partition for one stride-2 pooling step."""

    segments: np.ndarray  # (N,) child id per fine row
    child_grid: np.ndarray  # (S, 3)
    child_scene: np.ndarray  # (S,)
    n_children: int
    stride: int = 2
    argmax: np.ndarray | None = None

    @property
    def n_parents(self) -> int:
        return self.segments.size

    @property
    def child_offsets(self) -> np.ndarray:
        return ids_to_offsets(self.child_scene)


def build_pooling_plan(scene_ids: np.ndarray, grid_coords: np.ndarray, stride: int = 2) -> PoolingPlan:
    """Children keyed by ``floor(grid / stride)``, ordered by (scene, gz, gy, gx)."""
    scene_ids = np.asarray(scene_ids, dtype=np.int64)
    child = np.floor_divide(np.asarray(grid_coords, dtype=np.int64), stride)
    n = scene_ids.size
    if n == 0:
        return PoolingPlan(np.zeros(0, np.int64), np.zeros((0, 3), np.int64), np.zeros(0, np.int64), 0, stride)
    order = np.lexsort((child[:, 0], child[:, 1], child[:, 2], scene_ids))
    key = np.column_stack([scene_ids, child])[order]
    new = np.ones(n, dtype=bool)
    new[1:] = np.any(key[1:] != key[:-1], axis=1)
    seg_sorted = np.cumsum(new) - 1
    segments = np.empty(n, dtype=np.int64)
    segments[order] = seg_sorted
    firsts = key[new]
    return PoolingPlan(segments, firsts[:, 1:].copy(), firsts[:, 0].copy(), int(firsts.shape[0]), stride)


@dataclass
class Branch:
    """Linear -> GELU -> BatchNorm parameters for one pooling/unpooling branch."""

    weight: Value
    bias: Value
    gamma: Value
    beta: Value
    stats: RunningStats

    def out_channels(self) -> int:
        return self.weight.shape[1]


def _lin_gelu_bn(x: Value, br: Branch, train: bool, update_stats: bool) -> Value:
    return batch_norm(gelu(linear(x, br.weight, br.bias)), br.gamma, br.beta, br.stats, train, update=update_stats)


def grid_pool(x: Value, plan: PoolingPlan, branch: Branch, train: bool = True, update_stats: bool = True) -> Value:
    """``BN(GELU(segment_max(linear(x))))``; records the argmax rows on ``plan``."""
    if x.shape[0] != plan.n_parents:
        raise DimensionError(f"grid_pool: {x.shape[0]} rows but plan covers {plan.n_parents}")
    h = linear(x, branch.weight, branch.bias)
    pooled, plan.argmax = segment_max(h, plan.segments, plan.n_children)
    return batch_norm(gelu(pooled), branch.gamma, branch.beta, branch.stats, train, update=update_stats)


def grid_unpool(child: Value, skip: Value, plan: PoolingPlan, child_branch: Branch, skip_branch: Branch,
                train: bool = True, update_stats: bool = True) -> Value:
    """Broadcast coarse rows to their fine parents and add the transformed skip features."""
    if child.shape[0] != plan.n_children or skip.shape[0] != plan.n_parents:
        raise DimensionError(
            f"grid_unpool: child {child.shape} / skip {skip.shape} vs plan {plan.n_children}->{plan.n_parents}")
    if child_branch.out_channels() != skip_branch.out_channels():
        raise DimensionError(
            f"grid_unpool: branches project to {child_branch.out_channels()} and {skip_branch.out_channels()}")
    up = _lin_gelu_bn(gather_rows(child, plan.segments), child_branch, train, update_stats)
    sk = _lin_gelu_bn(skip, skip_branch, train, update_stats)
    return add(up, sk)
