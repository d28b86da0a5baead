"""Submanifold sparse 3D convolution over voxel hash lookups."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from .autodiff import DimensionError, Value, add, gelu, layer_norm, linear
from .voxel import VoxelIndex


def kernel_offsets(k: int) -> np.ndarray:
    """The k^3 displacements as (dx, dy, dz) rows, enumerated lexicographically in (dz, dy, dx)."""
    if k < 1 or k % 2 == 0:
        raise ValueError(f"kernel size must be odd and positive, got {k}")
    r = k // 2
    rng = range(-r, r + 1)
    return np.array([(dx, dy, dz) for dz, dy, dx in itertools.product(rng, rng, rng)], dtype=np.int64)


def center_offset(k: int) -> int:
    return (k ** 3) // 2


@dataclass(frozen=True)
class NeighborTable:
    """``rows[i, o]`` is the input row at ``grid[i] + offsets[o]`` in the same scene, or -1."""

    rows: np.ndarray
    kernel_size: int

    @property
    def n_points(self) -> int:
        return self.rows.shape[0]


def build_neighbor_table(index: VoxelIndex, k: int) -> NeighborTable:
    offsets = kernel_offsets(k)
    scene, grid = index.keys[:, 0], index.keys[:, 1:]
    n = scene.size
    rows = np.full((n, offsets.shape[0]), -1, dtype=np.int64)
    for o, d in enumerate(offsets):
        rows[:, o] = index.lookup(scene, grid + d)
    return NeighborTable(rows, k)


def sparse_conv(x: Value, table: NeighborTable, weight: Value) -> Value:
    """``y[i] = sum_o x[rows[i, o]] @ W[o]`` over present neighbours; no bias.

    ``weight`` is (K^3, Cin, Cout).  Offsets are accumulated in fixed order.
    """
    n, cin = x.shape
    k3 = table.rows.shape[1]
    if weight.data.ndim != 3 or weight.shape[0] != k3 or weight.shape[1] != cin:
        raise DimensionError(f"sparse_conv: x {x.shape}, weight {weight.shape}, table has {k3} offsets")
    if table.n_points != n:
        raise DimensionError(f"sparse_conv: table covers {table.n_points} points, x has {n}")
    cout = weight.shape[2]
    wd, xd = weight.data, x.data
    pairs = []
    for o in range(k3):
        col = table.rows[:, o]
        out_rows = np.flatnonzero(col >= 0)
        pairs.append((out_rows, col[out_rows]))
    y = np.zeros((n, cout))
    for o, (out_rows, in_rows) in enumerate(pairs):
        if out_rows.size:
            y[out_rows] += xd[in_rows] @ wd[o]

    def backward(g):
        dx = np.zeros_like(xd)
        dw = np.zeros_like(wd)
        for o, (out_rows, in_rows) in enumerate(pairs):
            if out_rows.size:
                go = g[out_rows]
                dw[o] = xd[in_rows].T @ go
                # in_rows is injective for a fixed offset
                dx[in_rows] += go @ wd[o].T
        return dx, dw

    return x.tape.push("sparse_conv", (x, weight), y, backward)


@dataclass
class ConvBlockWeights:
    conv: Value  # (K^3, C, C)
    lin_w: Value
    lin_b: Value
    gamma: Value
    beta: Value


def conv_block(x: Value, table: NeighborTable, w: ConvBlockWeights) -> Value:
    """``x + LN(linear(sparse_conv(x)))``."""
    c = x.shape[1]
    if w.conv.shape[1:] != (c, c) or w.lin_w.shape != (c, c):
        raise DimensionError(f"conv_block: {c} input channels vs conv {w.conv.shape}, linear {w.lin_w.shape}")
    h = layer_norm(linear(sparse_conv(x, table, w.conv), w.lin_w, w.lin_b), w.gamma, w.beta)
    return add(x, h)


@dataclass
class StemWeights:
    conv: Value  # (125, Cin, Cout)
    gamma: Value
    beta: Value


def stem(x: Value, table: NeighborTable, w: StemWeights) -> Value:
    """5x5x5 sparse convolution lifting raw features, then LayerNorm and GELU."""
    return gelu(layer_norm(sparse_conv(x, table, w.conv), w.gamma, w.beta))
