"""Cross-entropy, AdamW and a full-batch overfitting loop for small presets."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .autodiff import DimensionError, Tape, Value, rel_error
from .network import ModelConfig, ModelWeights, build_model, forward
from .pointcloud import PointBatch, make_synthetic_scene
from .voxel import voxelize


class DivergenceError(RuntimeError):
    def __init__(self, step: int, loss: float):
        super().__init__(f"loss became {loss} at step {step}")
        self.step = step


def cross_entropy(logits: Value, labels: np.ndarray) -> Value:
    """Mean negative log-softmax of the true class."""
    labels = np.asarray(labels, dtype=np.int64)
    n, k = logits.shape
    if labels.shape != (n,):
        raise DimensionError(f"cross_entropy: {labels.shape[0]} labels for {n} rows")
    if n and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"cross_entropy: labels must lie in [0, {k})")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    rows = np.arange(n)
    loss = -logp[rows, labels].mean()

    def backward(g):
        d = np.exp(logp)
        d[rows, labels] -= 1.0
        return (d * (g / n),)

    return logits.tape.push("cross_entropy", (logits,), np.asarray(loss), backward)


@dataclass
class OptimState:
    lr: float = 1e-3
    weight_decay: float = 0.05
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adamw_step(params: dict[str, np.ndarray], grads: dict[str, np.ndarray], state: OptimState) -> None:
    """In-place AdamW update with decoupled weight decay and bias-corrected moments."""
    state.step += 1
    b1, b2 = state.betas
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, w in params.items():
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(w)
        if g.shape != w.shape:
            raise DimensionError(f"adamw: grad {g.shape} for parameter {name} {w.shape}")
        m = state.m.setdefault(name, np.zeros_like(w))
        v = state.v.setdefault(name, np.zeros_like(w))
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        w *= 1.0 - state.lr * state.weight_decay
        w -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


def make_toy_scene(seed: int, n_points: int = 2000, n_classes: int = 4, extent_m: float = 2.0,
                   grid_size: float = 0.02) -> PointBatch:
    """Slab-labelled cube, voxelized.

    2000 points in a 2 m cube at 2 cm occupy about 0.2% of the lattice, so
    most points have no conv neighbours and spatial context has to come from
    the attention stage.
    """
    return voxelize(make_synthetic_scene(seed, n_points, extent_m, n_classes), grid_size)


@dataclass
class TrainResult:
    losses: list[float]
    accuracy: float
    weights: ModelWeights


def evaluate(weights: ModelWeights, scene: PointBatch, hierarchy=None) -> tuple[float, float]:
    """Loss and point accuracy with batch statistics, leaving running stats untouched."""
    res = forward(weights, scene, train=True, update_stats=False, hierarchy=hierarchy)
    loss = float(cross_entropy(res.logits, scene.labels).data)
    acc = float(np.mean(res.logits.data.argmax(axis=1) == scene.labels))
    return loss, acc


def train_toy(cfg: ModelConfig, scene: PointBatch, steps: int = 300, lr: float = 1e-3, seed: int = 1,
              weight_decay: float = 0.05, log=None) -> TrainResult:
    if scene.labels is None:
        raise ValueError("train_toy needs a labelled scene")
    if scene.features.shape[1] != cfg.in_channels:
        cfg = replace(cfg, in_channels=scene.features.shape[1])
    weights = build_model(cfg, seed)
    state = OptimState(lr=lr, weight_decay=weight_decay)
    losses = []
    hier = None
    for step in range(steps):
        res = forward(weights, scene, train=True, hierarchy=hier)
        hier = res.hierarchy
        loss = cross_entropy(res.logits, scene.labels)
        value = float(loss.data)
        if not np.isfinite(value):
            raise DivergenceError(step, value)
        losses.append(value)
        grads = res.tape.backward(loss)
        adamw_step(weights.params, {n: grads[v.id] for n, v in res.params.items() if v.id in grads}, state)
        if log is not None:
            log(step, value)
    _, acc = evaluate(weights, scene, hier)
    return TrainResult(losses, acc, weights)


@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: list[tuple[str, int, float, float]]  # (param, flat index, analytic, numeric)


def model_gradcheck(cfg: ModelConfig, seed: int = 1, n_samples: int = 30, h: float = 1e-5,
                    scene: PointBatch | None = None) -> GradCheckResult:
    """Cross-entropy gradient of a fresh model vs central differences on sampled parameter entries.

    BatchNorm runs on batch statistics without touching the running buffers, so
    every loss evaluation is a pure function of the weights.
    """
    if scene is None:
        scene = make_toy_scene(seed, n_points=400)
    if scene.features.shape[1] != cfg.in_channels:
        cfg = replace(cfg, in_channels=scene.features.shape[1])
    weights = build_model(cfg, seed)
    hier = None

    def loss_of(record: bool):
        nonlocal hier
        res = forward(weights, scene, train=True, update_stats=False, tape=Tape(record=record), hierarchy=hier)
        hier = res.hierarchy
        return res, cross_entropy(res.logits, scene.labels)

    res, loss = loss_of(True)
    grads = res.tape.backward(loss)
    names = list(weights.params)
    rng = np.random.default_rng(seed)
    picks = [(names[i], int(rng.integers(weights.params[names[i]].size)))
             for i in rng.choice(len(names), size=n_samples, replace=len(names) < n_samples)]
    checked = []
    worst = 0.0
    for name, j in picks:
        w = weights.params[name].reshape(-1)
        v = res.params.get(name)
        a = float(grads[v.id].reshape(-1)[j]) if v is not None and v.id in grads else 0.0
        orig = w[j]
        w[j] = orig + h
        fp = float(loss_of(False)[1].data)
        w[j] = orig - h
        fm = float(loss_of(False)[1].data)
        w[j] = orig
        n = (fp - fm) / (2 * h)
        checked.append((name, j, a, n))
        worst = max(worst, rel_error(np.array([a]), np.array([n])))
    return GradCheckResult(worst, checked)
