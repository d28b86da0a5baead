"""Rotary position embedding on 3D grid coordinates and grouped attention."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .autodiff import (
    DimensionError,
    Value,
    add,
    gather_rows,
    gelu,
    index,
    layer_norm,
    linear,
    masked_softmax_array,
    reshape,
    transpose,
)
from .serialization import SerializedOrder


class RopeConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RopeConfig:
    head_dim: int
    base: float = 100.0
    mode: str = "cartesian"  # or "spherical"
    axis_split: tuple[int, int, int] | None = None
    enabled: bool = True

    def __post_init__(self):
        if self.base <= 0:
            raise RopeConfigError(f"base frequency must be positive, got {self.base}")
        if self.mode not in ("cartesian", "spherical"):
            raise RopeConfigError(f"unknown rope mode {self.mode!r}")
        split = self.split
        if sum(split) != self.head_dim or any(d <= 0 or d % 2 for d in split):
            raise RopeConfigError(
                f"axis split {split} must be three positive even sizes summing to head dim {self.head_dim}")

    @property
    def split(self) -> tuple[int, int, int]:
        if self.axis_split is not None:
            return tuple(self.axis_split)
        if self.head_dim % 6:
            raise RopeConfigError(f"head dim {self.head_dim} is not divisible by 6")
        d = self.head_dim // 3
        return (d, d, d)


def frequencies(d_sub: int, base: float) -> np.ndarray:
    """``base ** (-2j / d_sub)`` for ``j < d_sub / 2``."""
    if d_sub % 2:
        raise RopeConfigError(f"rotary sub-dimension must be even, got {d_sub}")
    return base ** (-2.0 * np.arange(d_sub // 2) / d_sub)


def rotate_pairs(x: np.ndarray, cos: np.ndarray, sin: np.ndarray) -> np.ndarray:
    """Rotate consecutive pairs ``(x[2j], x[2j+1])`` by the angle encoded in ``cos``/``sin``."""
    a, b = x[..., 0::2], x[..., 1::2]
    out = np.empty(np.broadcast_shapes(x.shape, cos.shape[:-1] + (x.shape[-1],)))
    out[..., 0::2] = a * cos - b * sin
    out[..., 1::2] = a * sin + b * cos
    return out


def rope_1d(v, t: float, base: float = 100.0) -> np.ndarray:
    v = np.asarray(v, dtype=np.float64)
    ang = t * frequencies(v.shape[-1], base)
    return rotate_pairs(v, np.cos(ang), np.sin(ang))


def scene_positions(grid_coords: np.ndarray, scene_ids: np.ndarray, mode: str) -> np.ndarray:
    """Per-point rotary positions: grid coords, or (r, polar, azimuth) about each scene's centroid."""
    p = np.asarray(grid_coords, dtype=np.float64)
    if mode == "cartesian":
        return p
    scene_ids = np.asarray(scene_ids, dtype=np.int64)
    n_scenes = int(scene_ids.max()) + 1 if scene_ids.size else 0
    sums = np.zeros((n_scenes, 3))
    np.add.at(sums, scene_ids, p)
    centroid = sums / np.maximum(np.bincount(scene_ids, minlength=n_scenes), 1)[:, None]
    d = p - centroid[scene_ids]
    r = np.linalg.norm(d, axis=1)
    polar = np.arccos(np.clip(np.divide(d[:, 2], r, out=np.ones_like(r), where=r > 0), -1.0, 1.0))
    azimuth = np.arctan2(d[:, 1], d[:, 0])
    return np.column_stack([r, polar, azimuth])


def rope_angles(pos: np.ndarray, cfg: RopeConfig) -> np.ndarray:
    """(M, head_dim / 2) rotation angles, axis blocks laid out x | y | z."""
    pos = np.asarray(pos, dtype=np.float64)
    return np.concatenate(
        [pos[:, a:a + 1] * frequencies(d, cfg.base)[None, :] for a, d in enumerate(cfg.split)], axis=1)


def point_rope(f, p, cfg: RopeConfig) -> np.ndarray:
    """Split ``f`` into per-axis blocks and rotate each by its own coordinate."""
    f = np.asarray(f, dtype=np.float64)
    if f.shape[-1] != cfg.head_dim:
        raise RopeConfigError(f"vector of size {f.shape[-1]} does not match head dim {cfg.head_dim}")
    out, start = [], 0
    for axis, d in enumerate(cfg.split):
        out.append(rope_1d(f[..., start:start + d], float(p[axis]), cfg.base))
        start += d
    return np.concatenate(out, axis=-1)


def apply_rotary(x: Value, cos: np.ndarray, sin: np.ndarray) -> Value:
    """Rotate pairs of ``x``; ``cos``/``sin`` must broadcast to ``x`` without enlarging it."""
    y = rotate_pairs(x.data, cos, sin)
    if y.shape != x.shape:
        raise DimensionError(f"apply_rotary: angles {cos.shape} do not broadcast onto {x.shape}")
    return x.tape.push("rotary", (x,), y, lambda g: (rotate_pairs(g, cos, -sin),))


def group_logits(q: np.ndarray, k: np.ndarray) -> np.ndarray:
    """Scaled dot-product logits for (..., n, d) queries and keys."""
    return (q @ np.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(q.shape[-1]))


def group_attention(q: Value, k: Value, v: Value, mask: np.ndarray) -> Value:
    """Masked softmax attention per group over (G, H, n, d) tensors.

    Groups are processed one at a time and the probabilities are recomputed
    in the backward pass, so peak memory is one group's (H, n, n) block.
    """
    if not (q.shape == k.shape == v.shape) or q.data.ndim != 4:
        raise DimensionError(f"group_attention: q {q.shape}, k {k.shape}, v {v.shape}")
    mask = np.asarray(mask, dtype=bool)
    n_groups = q.shape[0]
    if mask.shape != (n_groups, q.shape[2]):
        raise DimensionError(f"group_attention: mask {mask.shape} for {q.shape}")
    if not mask.any(axis=1).all():
        raise RuntimeError("attention group with no real points")
    qd, kd, vd = q.data, k.data, v.data
    sc = 1.0 / math.sqrt(q.shape[-1])

    def probs(g):
        return masked_softmax_array(group_logits(qd[g:g + 1], kd[g:g + 1]), mask[g:g + 1])[0]

    out = np.empty_like(vd)
    for g in range(n_groups):
        out[g] = probs(g) @ vd[g]

    def backward(grad):
        dq, dk, dv = np.empty_like(qd), np.empty_like(kd), np.empty_like(vd)
        for g in range(n_groups):
            p = probs(g)
            dv[g] = np.swapaxes(p, -1, -2) @ grad[g]
            dp = grad[g] @ np.swapaxes(vd[g], -1, -2)
            dl = p * (dp - (dp * p).sum(axis=-1, keepdims=True)) * sc
            dq[g] = dl @ kd[g]
            dk[g] = np.swapaxes(dl, -1, -2) @ qd[g]
        return dq, dk, dv

    return q.tape.push("group_attention", (q, k, v), out, backward)


def attn_scores_oracle(q_rows, k_rows, coords, cfg: RopeConfig) -> np.ndarray:
    """Brute-force logits: rotate every row on its own, then explicit pairwise dots."""
    q_rows = np.asarray(q_rows, dtype=np.float64)
    k_rows = np.asarray(k_rows, dtype=np.float64)
    n = q_rows.shape[0]
    if cfg.enabled:
        qr = [point_rope(q_rows[i], coords[i], cfg) for i in range(n)]
        kr = [point_rope(k_rows[i], coords[i], cfg) for i in range(n)]
    else:
        qr, kr = list(q_rows), list(k_rows)
    scale = 1.0 / math.sqrt(cfg.head_dim)
    out = np.empty((n, n))
    for i in range(n):
        for j in range(n):
            out[i, j] = sum(float(a) * float(b) for a, b in zip(qr[i], kr[j])) * scale
    return out


@dataclass
class AttnBlockWeights:
    pre_gamma: Value
    pre_beta: Value
    attn_gamma: Value
    attn_beta: Value
    qkv_w: Value
    qkv_b: Value
    proj_w: Value
    proj_b: Value
    ffn_gamma: Value
    ffn_beta: Value
    fc1_w: Value
    fc1_b: Value
    fc2_w: Value
    fc2_b: Value


def attention_inputs(qkv: Value, order: SerializedOrder, heads: int) -> tuple[Value, Value, Value]:
    """Slot-gather a (N, 3C) projection and split it into (G, H, n, d) q, k, v."""
    c = qkv.shape[1] // 3
    n = order.group_size
    g = order.n_groups
    s = gather_rows(qkv, order.slot_index)
    s = transpose(reshape(s, (g, n, 3, heads, c // heads)), (2, 0, 3, 1, 4))
    return index(s, 0), index(s, 1), index(s, 2)


def slot_angles(positions: np.ndarray, order: SerializedOrder, cfg: RopeConfig) -> tuple[np.ndarray, np.ndarray]:
    ang = rope_angles(positions[order.slot_index], cfg).reshape(order.n_groups, 1, order.group_size, -1)
    return np.cos(ang), np.sin(ang)


def _rotated_qkv(x, order, positions, w, cfg, heads):
    h = layer_norm(layer_norm(x, w.pre_gamma, w.pre_beta), w.attn_gamma, w.attn_beta)
    q, k, v = attention_inputs(linear(h, w.qkv_w, w.qkv_b), order, heads)
    if cfg.enabled:
        cos, sin = slot_angles(positions, order, cfg)
        q, k = apply_rotary(q, cos, sin), apply_rotary(k, cos, sin)
    return q, k, v


def block_logits(x: Value, order: SerializedOrder, positions: np.ndarray, w: AttnBlockWeights,
                 cfg: RopeConfig, heads: int) -> np.ndarray:
    """The (G, H, n, n) pre-softmax logits ``attn_block`` computes, pads included."""
    q, k, _ = _rotated_qkv(x, order, positions, w, cfg, heads)
    return group_logits(q.data, k.data)


def attn_block(
    x: Value,
    order: SerializedOrder,
    positions: np.ndarray,
    w: AttnBlockWeights,
    cfg: RopeConfig,
    heads: int,
) -> Value:
    """Pre-norm PointROPE attention followed by a pre-norm FFN, residual around each.

    ``positions`` are per-row rotary inputs (see :func:`scene_positions`).
    """
    n, c = x.shape
    if order.slot_of.size != n:
        raise DimensionError(f"attn_block: order covers {order.slot_of.size} points, x has {n}")
    if c % heads or c // heads != cfg.head_dim:
        raise DimensionError(f"attn_block: {c} channels / {heads} heads != head dim {cfg.head_dim}")
    q, k, v = _rotated_qkv(x, order, positions, w, cfg, heads)
    mask = order.pad_mask.reshape(order.n_groups, order.group_size)
    o = group_attention(q, k, v, mask)
    o = reshape(transpose(o, (0, 2, 1, 3)), (order.n_slots, c))
    o = linear(gather_rows(o, order.slot_of), w.proj_w, w.proj_b)
    a = add(x, o)
    f = layer_norm(a, w.ffn_gamma, w.ffn_beta)
    f = linear(gelu(linear(f, w.fc1_w, w.fc1_b)), w.fc2_w, w.fc2_b)
    return add(a, f)
