"""Reverse-mode differentiation over dense float64 arrays.

A :class:`Tape` records every operation as a node holding its input node
ids and a closure mapping the output gradient to input gradients.  Node
ids are assigned in creation order, so inputs always precede outputs and
the backward sweep is a plain reverse walk over the node list.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

__all__ = [
    "DimensionError",
    "DegenerateBatchError",
    "Tape",
    "Value",
    "add",
    "scale",
    "linear",
    "matmul",
    "layer_norm",
    "batch_norm",
    "gelu",
    "masked_softmax",
    "masked_softmax_array",
    "segment_max",
    "gather_rows",
    "reshape",
    "transpose",
    "index",
    "sum_all",
    "numeric_grad",
    "rel_error",
]


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class DegenerateBatchError(ValueError):
    """Batch statistics requested over fewer than two rows."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class _Node:
    op: str
    inputs: tuple[int, ...]
    backward: BackwardFn | None


@dataclass(frozen=True)
class Value:
    """Handle on a tape node plus its forward result."""

    tape: "Tape"
    id: int
    data: np.ndarray

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __add__(self, other: "Value") -> "Value":
        return add(self, other)

    def __repr__(self) -> str:
        return f"Value(id={self.id}, shape={self.shape})"


@dataclass
class Tape:
    """Append-only operation log.

    With ``record=False`` the tape only hands out ids; no closures are kept
    so intermediate arrays can be freed (inference mode).
    """

    record: bool = True
    check_finite: bool = False
    nodes: list[_Node] = field(default_factory=list)

    def leaf(self, data, name: str | None = None) -> Value:
        arr = np.asarray(data, dtype=np.float64)
        if self.check_finite and not np.all(np.isfinite(arr)):
            raise ValueError(f"non-finite entries in leaf {name or ''}".strip())
        return self._push(name or "leaf", (), None, arr)

    def push(self, op: str, inputs: Sequence[Value], data: np.ndarray, backward: BackwardFn) -> Value:
        for v in inputs:
            if v.tape is not self:
                raise ValueError(f"{op}: operand recorded on a different tape")
        if self.check_finite and not np.all(np.isfinite(data)):
            raise ValueError(f"{op}: produced non-finite values")
        return self._push(op, tuple(v.id for v in inputs), backward if self.record else None, data)

    def _push(self, op, inputs, backward, data) -> Value:
        nid = len(self.nodes)
        self.nodes.append(_Node(op, inputs if self.record else (), backward))
        return Value(self, nid, data)

    def backward(self, out: Value, seed: np.ndarray | None = None) -> dict[int, np.ndarray]:
        """Gradients of ``out`` (weighted by ``seed``) for every reachable node."""
        if not self.record:
            raise RuntimeError("tape was created with record=False")
        if seed is None:
            if out.data.size != 1:
                raise DimensionError(f"backward from non-scalar output {out.shape} needs a seed")
            seed = np.ones_like(out.data)
        grads: dict[int, np.ndarray] = {out.id: np.asarray(seed, dtype=np.float64)}
        for nid in range(out.id, -1, -1):
            g = grads.get(nid)
            node = self.nodes[nid]
            if g is None or node.backward is None:
                continue
            for src, gi in zip(node.inputs, node.backward(g)):
                if gi is None:
                    continue
                if src in grads:
                    grads[src] = grads[src] + gi
                else:
                    grads[src] = gi
        return grads


def _value(tape: Tape, x) -> Value:
    return x if isinstance(x, Value) else tape.leaf(x)


def _same_shape(op: str, a: Value, b: Value) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Value, b: Value) -> Value:
    _same_shape("add", a, b)
    return a.tape.push("add", (a, b), a.data + b.data, lambda g: (g, g))


def scale(a: Value, s: float) -> Value:
    return a.tape.push("scale", (a,), a.data * s, lambda g: (g * s,))


def sum_all(a: Value) -> Value:
    shape = a.shape
    return a.tape.push("sum", (a,), np.asarray(a.data.sum()), lambda g: (np.broadcast_to(g, shape).copy(),))


def linear(x: Value, w, bias=None) -> Value:
    """``x @ w + bias`` with the bias broadcast over rows."""
    tape = x.tape
    w = _value(tape, w)
    if x.data.ndim != 2 or w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise DimensionError(f"linear: x {x.shape} incompatible with w {w.shape}")
    y = x.data @ w.data
    inputs = [x, w]
    if bias is not None:
        bias = _value(tape, bias)
        if bias.data.size != w.shape[1]:
            raise DimensionError(f"linear: bias {bias.shape} incompatible with w {w.shape}")
        y = y + bias.data.reshape(1, -1)
        inputs.append(bias)
    xd, wd, bshape = x.data, w.data, None if bias is None else bias.shape

    def backward(g):
        out = [g @ wd.T, xd.T @ g]
        if bshape is not None:
            out.append(g.sum(axis=0).reshape(bshape))
        return out

    return tape.push("linear", inputs, y, backward)


def matmul(a: Value, b: Value) -> Value:
    """Batched matrix product over leading axes (``np.matmul`` semantics, no broadcasting)."""
    if a.data.ndim < 2 or a.shape[:-2] != b.shape[:-2] or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: shapes {a.shape} and {b.shape} do not conform")
    ad, bd = a.data, b.data
    return a.tape.push(
        "matmul", (a, b), ad @ bd,
        lambda g: (g @ np.swapaxes(bd, -1, -2), np.swapaxes(ad, -1, -2) @ g),
    )


def _normalize_backward(g_hat: np.ndarray, x_hat: np.ndarray, inv_std: np.ndarray, axis: int) -> np.ndarray:
    m1 = g_hat.mean(axis=axis, keepdims=True)
    m2 = (g_hat * x_hat).mean(axis=axis, keepdims=True)
    return inv_std * (g_hat - m1 - x_hat * m2)


def layer_norm(x: Value, gamma, beta, eps: float = 1e-5) -> Value:
    tape = x.tape
    gamma, beta = _value(tape, gamma), _value(tape, beta)
    c = x.shape[-1]
    if c < 1 or gamma.data.size != c or beta.data.size != c:
        raise DimensionError(f"layer_norm: x {x.shape} with gamma {gamma.shape}, beta {beta.shape}")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    inv_std = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    x_hat = xc * inv_std
    gd = gamma.data.reshape(-1)
    y = x_hat * gd + beta.data.reshape(-1)
    gshape, bshape = gamma.shape, beta.shape

    def backward(g):
        flat = g.reshape(-1, c)
        dgamma = (flat * x_hat.reshape(-1, c)).sum(axis=0).reshape(gshape)
        dbeta = flat.sum(axis=0).reshape(bshape)
        return _normalize_backward(g * gd, x_hat, inv_std, -1), dgamma, dbeta

    return tape.push("layer_norm", (x, gamma, beta), y, backward)


@dataclass
class RunningStats:
    mean: np.ndarray
    var: np.ndarray

    @classmethod
    def fresh(cls, c: int) -> "RunningStats":
        return cls(np.zeros(c), np.ones(c))


def batch_norm(
    x: Value,
    gamma,
    beta,
    stats: RunningStats,
    train: bool,
    eps: float = 1e-5,
    momentum: float = 0.1,
    update: bool = True,
) -> Value:
    """Per-column normalization over rows.

    Train mode uses the biased batch variance and (if ``update``) folds the
    batch moments into ``stats``; eval mode normalizes with ``stats``.
    """
    tape = x.tape
    gamma, beta = _value(tape, gamma), _value(tape, beta)
    n, c = x.shape
    if gamma.data.size != c or beta.data.size != c or stats.mean.shape != (c,):
        raise DimensionError(f"batch_norm: x {x.shape} with gamma {gamma.shape}")
    gd = gamma.data.reshape(-1)
    gshape, bshape = gamma.shape, beta.shape
    if train:
        if n < 2:
            raise DegenerateBatchError(f"batch_norm in train mode needs >= 2 rows, got {n}")
        mu = x.data.mean(axis=0)
        xc = x.data - mu
        var = (xc * xc).mean(axis=0)
        inv_std = 1.0 / np.sqrt(var + eps)
        x_hat = xc * inv_std
        if update:
            stats.mean = (1 - momentum) * stats.mean + momentum * mu
            stats.var = (1 - momentum) * stats.var + momentum * var
    else:
        inv_std = 1.0 / np.sqrt(stats.var + eps)
        x_hat = (x.data - stats.mean) * inv_std
    y = x_hat * gd + beta.data.reshape(-1)

    def backward(g):
        dgamma = (g * x_hat).sum(axis=0).reshape(gshape)
        dbeta = g.sum(axis=0).reshape(bshape)
        if train:
            dx = _normalize_backward(g * gd, x_hat, inv_std, 0)
        else:
            dx = g * gd * inv_std
        return dx, dgamma, dbeta

    return tape.push("batch_norm", (x, gamma, beta), y, backward)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x: Value) -> Value:
    """Exact GELU, ``x * Phi(x)``."""
    xd = x.data
    cdf = 0.5 * (1.0 + erf(xd * _INV_SQRT2))

    def backward(g):
        return (g * (cdf + xd * _INV_SQRT2PI * np.exp(-0.5 * xd * xd)),)

    return x.tape.push("gelu", (x,), xd * cdf, backward)


def _key_mask(mask: np.ndarray, ndim: int) -> np.ndarray:
    # (G, n) -> (G, 1, ..., 1, n) so it broadcasts over heads and query rows
    mask = np.asarray(mask, dtype=bool)
    return mask.reshape(mask.shape[:1] + (1,) * (ndim - 2) + mask.shape[1:])


def masked_softmax_array(logits: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Softmax over the last axis restricted to keys where ``mask`` is true.

    ``logits`` is (G, ..., n, n) and ``mask`` is (G, n); masked keys get
    exactly zero probability.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.ndim != 2 or logits.shape[0] != mask.shape[0] or logits.shape[-1] != mask.shape[1]:
        raise DimensionError(f"masked_softmax: logits {logits.shape} vs mask {mask.shape}")
    if not mask.any(axis=1).all():
        raise ValueError("masked_softmax: a group has every key masked")
    z = np.array(logits, dtype=np.float64, copy=True)
    if not mask.all():
        np.copyto(z, -np.inf, where=~_key_mask(mask, logits.ndim))
    z -= z.max(axis=-1, keepdims=True)
    np.exp(z, out=z)
    z /= z.sum(axis=-1, keepdims=True)
    return z


def masked_softmax(logits: Value, mask: np.ndarray) -> Value:
    p = masked_softmax_array(logits.data, mask)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return logits.tape.push("masked_softmax", (logits,), p, backward)


def segment_max(x: Value, segments: np.ndarray, n_segments: int) -> tuple[Value, np.ndarray]:
    """Per-segment, per-column maximum; returns the pooled value and argmax rows.

    Ties resolve to the lowest row index.  The gradient goes to the argmax
    row only.
    """
    segments = np.asarray(segments, dtype=np.int64)
    n, c = x.shape
    if segments.shape != (n,):
        raise DimensionError(f"segment_max: {segments.shape[0]} segment ids for {n} rows")
    if n and (segments.min() < 0 or segments.max() >= n_segments):
        raise ValueError("segment_max: segment id out of range")
    counts = np.bincount(segments, minlength=n_segments)
    if (counts == 0).any():
        raise ValueError(f"segment_max: segment {int(np.argmin(counts))} is empty")
    # stable sort by segment keeps rows ascending inside each segment
    order = np.argsort(segments, kind="stable")
    starts = np.concatenate(([0], np.cumsum(counts)[:-1]))
    xs = x.data[order]
    out = np.maximum.reduceat(xs, starts, axis=0)
    # first row in each segment attaining the max
    hit = xs == out[segments[order]]
    pos = np.arange(n)[:, None]
    first = np.minimum.reduceat(np.where(hit, pos, n), starts, axis=0)
    argmax = order[first]
    cols = np.arange(c)[None, :]

    def backward(g):
        dx = np.zeros((n, c))
        dx[argmax, cols] = g
        return (dx,)

    return x.tape.push("segment_max", (x,), out, backward), argmax


def gather_rows(x: Value, idx: np.ndarray) -> Value:
    """``x[idx]`` along axis 0; backward scatter-adds (repeated indices accumulate)."""
    idx = np.asarray(idx, dtype=np.int64)
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape)
        np.add.at(dx, idx, g)
        return (dx,)

    return x.tape.push("gather_rows", (x,), x.data[idx], backward)


def reshape(x: Value, shape: tuple[int, ...]) -> Value:
    old = x.shape
    return x.tape.push("reshape", (x,), x.data.reshape(shape), lambda g: (g.reshape(old),))


def transpose(x: Value, axes: tuple[int, ...]) -> Value:
    inv = tuple(np.argsort(axes))
    return x.tape.push("transpose", (x,), np.transpose(x.data, axes), lambda g: (np.transpose(g, inv),))


def index(x: Value, key) -> Value:
    """Basic (slice/integer) indexing."""
    shape = x.shape

    def backward(g):
        dx = np.zeros(shape)
        dx[key] = g
        return (dx,)

    return x.tape.push("index", (x,), x.data[key], backward)


def numeric_grad(f: Callable[[np.ndarray], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-8) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor)``."""
    a, b = np.asarray(analytic), np.asarray(numeric)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0
