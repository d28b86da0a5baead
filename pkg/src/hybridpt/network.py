"""Model configs, presets, weight registry, forward pass and parameter audit."""

from __future__ import annotations

import contextlib
import io
import json
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterator

import numpy as np

from .autodiff import RunningStats, Tape, Value, linear
from .pointcloud import PointBatch
from .rope import AttnBlockWeights, RopeConfig, RopeConfigError, attn_block, scene_positions
from .serialization import CurveKind, SerializedOrder, curve_schedule, serialize_coords
from .sparse_conv import ConvBlockWeights, NeighborTable, StemWeights, build_neighbor_table, conv_block, stem
from .voxel import Branch, PoolingPlan, VoxelIndex, build_pooling_plan, grid_pool, grid_unpool


class ConfigError(ValueError):
    pass


CONV, ATTN, BOTH = "conv", "attn", "both"


@dataclass(frozen=True)
class StageConfig:
    channels: int
    blocks: int
    kind: str = CONV
    heads: int = 0
    mlp_ratio: int = 4
    group_size: int = 1024
    kernel_size: int = 3

    @property
    def has_conv(self) -> bool:
        return self.kind in (CONV, BOTH) and self.blocks > 0

    @property
    def has_attn(self) -> bool:
        return self.kind in (ATTN, BOTH) and self.blocks > 0


@dataclass(frozen=True)
class ModelConfig:
    """Encoder stages E0..E{L-1}; decoder stages listed deepest first (D{L-2}..D0)."""

    name: str
    encoder: tuple[StageConfig, ...]
    decoder: tuple[StageConfig, ...]
    decoder_kind: str = "light"
    conv_stages: int = 3
    in_channels: int = 6
    num_classes: int = 20
    stem_kernel: int = 5
    rope_base: float = 100.0
    rope_mode: str = "cartesian"
    rope_split: tuple[int, int, int] | None = None
    rope_enabled: bool = True
    curve: str | None = None  # pin one curve for every attention block

    def __post_init__(self):
        if len(self.decoder) != len(self.encoder) - 1:
            raise ConfigError(f"{len(self.encoder)} encoder stages need {len(self.encoder) - 1} decoder stages")
        for name, st in self.stages():
            if st.channels < 1 or st.blocks < 0:
                raise ConfigError(f"stage {name}: invalid channels/blocks {st.channels}/{st.blocks}")
            if st.kind not in (CONV, ATTN, BOTH):
                raise ConfigError(f"stage {name}: unknown kind {st.kind!r}")
            if st.has_conv and st.kernel_size % 2 == 0:
                raise ConfigError(f"stage {name}: kernel size must be odd")
            if st.has_attn:
                if st.heads < 1 or st.channels % st.heads:
                    raise ConfigError(f"stage {name}: {st.channels} channels not divisible by {st.heads} heads")
                try:
                    self.rope_config(st)
                except RopeConfigError as exc:
                    raise ConfigError(f"stage {name}: {exc}") from None
        if self.curve is not None:
            CurveKind(self.curve)

    @property
    def n_levels(self) -> int:
        return len(self.encoder)

    @property
    def stem_channels(self) -> int:
        return self.encoder[0].channels

    def stages(self) -> Iterator[tuple[str, StageConfig]]:
        for i, st in enumerate(self.encoder):
            yield f"E{i}", st
        for j, st in enumerate(self.decoder):
            yield f"D{len(self.decoder) - 1 - j}", st

    def decoder_stage(self, level: int) -> StageConfig:
        return self.decoder[len(self.decoder) - 1 - level]

    def rope_config(self, st: StageConfig) -> RopeConfig:
        return RopeConfig(st.channels // st.heads, self.rope_base, self.rope_mode, self.rope_split, self.rope_enabled)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["encoder"] = tuple(StageConfig(**s) for s in d["encoder"])
        d["decoder"] = tuple(StageConfig(**s) for s in d["decoder"])
        if d.get("rope_split") is not None:
            d["rope_split"] = tuple(d["rope_split"])
        return cls(**d)


def _heads(c: int) -> int:
    # 18-dim heads throughout the published presets
    return c // 18 if c % 18 == 0 else max(c // 6, 1)


def make_config(
    name: str,
    channels: tuple[int, ...],
    blocks: tuple[int, ...],
    decoder_channels: tuple[int, ...],
    conv_stages: int = 3,
    handover: int | None = None,
    symmetric: bool = False,
    decoder_blocks: int = 2,
    heads: tuple[int, ...] | None = None,
    group_size: int = 1024,
    **kw,
) -> ModelConfig:
    """Assign conv/attn per stage: stage ``i`` (0-based) is conv iff ``i < conv_stages``.

    ``handover`` names one stage that carries both block types.
    ``decoder_channels`` lists D{L-2}..D0.
    """
    def kind(i):
        if i == handover:
            return BOTH
        return CONV if i < conv_stages else ATTN

    def head(i, c):
        return heads[i] if heads is not None else _heads(c)

    enc = tuple(
        StageConfig(c, b, kind(i), head(i, c) if kind(i) != CONV else 0, group_size=group_size)
        for i, (c, b) in enumerate(zip(channels, blocks))
    )
    dec = []
    n_dec = len(channels) - 1
    for j, c in enumerate(decoder_channels):
        level = n_dec - 1 - j
        k = kind(level)
        dec.append(StageConfig(c, decoder_blocks if symmetric else 0, k,
                               _heads(c) if k != CONV else 0, group_size=group_size))
    return ModelConfig(name, enc, tuple(dec), "symmetric" if symmetric else "light", conv_stages, **kw)


PRESET_NAMES = ("s", "s-star", "b", "l", "micro")


def preset(name: str, **overrides) -> ModelConfig:
    name = name.lower()
    if name == "s":
        cfg = make_config("s", (36, 72, 144, 252, 504), (2, 2, 2, 6, 2), (252, 144, 72, 72))
    elif name in ("s-star", "s*"):
        cfg = make_config("s-star", (36, 72, 144, 252, 504), (2, 2, 2, 6, 2), (252, 144, 72, 72), symmetric=True)
    elif name == "b":
        cfg = make_config("b", (54, 108, 216, 432, 576), (3, 3, 3, 12, 3), (432, 216, 108, 72))
    elif name == "l":
        cfg = make_config("l", (72, 144, 288, 576, 864), (3, 3, 3, 12, 3), (576, 288, 144, 72))
    elif name == "micro":
        cfg = micro_preset()
    else:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESET_NAMES)}")
    return replace(cfg, **overrides) if overrides else cfg


def micro_preset() -> ModelConfig:
    """Three stages, one block each, smallest legal rotary head (6 dims)."""
    return make_config("micro", (12, 24, 36), (1, 1, 1), (24, 12), conv_stages=2, heads=(0, 0, 6),
                       group_size=16, in_channels=3, num_classes=4)


# ---------------------------------------------------------------- registry

@dataclass(frozen=True)
class ParamSpec:
    name: str
    shape: tuple[int, ...]
    init: str  # "uniform" | "ones" | "zeros"
    fan_in: int = 1

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stage(self) -> str:
        return self.name.split("/")[0]

    @property
    def module(self) -> str:
        return self.name.split("/")[1].rstrip("0123456789")

    @property
    def layer(self) -> str:
        return self.name.split("/")[2]


def _linear(prefix, cin, cout):
    return [ParamSpec(f"{prefix}/weight", (cin, cout), "uniform", cin),
            ParamSpec(f"{prefix}/bias", (cout,), "zeros")]


def _norm(prefix, c):
    return [ParamSpec(f"{prefix}/gamma", (c,), "ones"), ParamSpec(f"{prefix}/beta", (c,), "zeros")]


def _conv_block_specs(prefix, c, k):
    return ([ParamSpec(f"{prefix}/spconv/weight", (k ** 3, c, c), "uniform", k ** 3 * c)]
            + _linear(f"{prefix}/linear", c, c) + _norm(f"{prefix}/norm", c))


def _attn_block_specs(prefix, c, ratio):
    return (_norm(f"{prefix}/pre_norm", c) + _norm(f"{prefix}/attn_norm", c)
            + _linear(f"{prefix}/qkv", c, 3 * c) + _linear(f"{prefix}/proj", c, c)
            + _norm(f"{prefix}/ffn_norm", c) + _linear(f"{prefix}/fc1", c, ratio * c)
            + _linear(f"{prefix}/fc2", ratio * c, c))


def _stage_block_specs(stage, st: StageConfig):
    specs = []
    for b in range(st.blocks):
        if st.kind in (CONV, BOTH):
            specs += _conv_block_specs(f"{stage}/conv_block{b}", st.channels, st.kernel_size)
        if st.kind in (ATTN, BOTH):
            specs += _attn_block_specs(f"{stage}/attn_block{b}", st.channels, st.mlp_ratio)
    return specs


def param_specs(cfg: ModelConfig) -> list[ParamSpec]:
    """Every trainable tensor in forward order, derived from shapes alone."""
    k, c0 = cfg.stem_kernel, cfg.stem_channels
    specs = [ParamSpec("stem/stem/spconv/weight", (k ** 3, cfg.in_channels, c0), "uniform", k ** 3 * cfg.in_channels)]
    specs += _norm("stem/stem/norm", c0)
    prev = c0
    for i, st in enumerate(cfg.encoder):
        if i:
            specs += _linear(f"E{i}/pool/linear", prev, st.channels) + _norm(f"E{i}/pool/bn", st.channels)
        specs += _stage_block_specs(f"E{i}", st)
        prev = st.channels
    for level in range(cfg.n_levels - 2, -1, -1):
        st = cfg.decoder_stage(level)
        skip_c = cfg.encoder[level].channels
        specs += _linear(f"D{level}/unpool/up_linear", prev, st.channels) + _norm(f"D{level}/unpool/up_bn", st.channels)
        specs += _linear(f"D{level}/unpool/skip_linear", skip_c, st.channels) + _norm(f"D{level}/unpool/skip_bn", st.channels)
        specs += _stage_block_specs(f"D{level}", st)
        prev = st.channels
    specs += _linear("head/head/linear", prev, cfg.num_classes)
    return specs


def bn_buffer_names(cfg: ModelConfig) -> list[str]:
    return [s.name.rsplit("/", 1)[0] for s in param_specs(cfg) if s.name.endswith("bn/gamma")]


@dataclass
class ModelWeights:
    cfg: ModelConfig
    params: "OrderedDict[str, np.ndarray]"
    buffers: dict[str, RunningStats] = field(default_factory=dict)

    @property
    def n_params(self) -> int:
        return sum(int(a.size) for a in self.params.values())

    def copy(self) -> "ModelWeights":
        return ModelWeights(
            self.cfg,
            OrderedDict((k, v.copy()) for k, v in self.params.items()),
            {k: RunningStats(v.mean.copy(), v.var.copy()) for k, v in self.buffers.items()},
        )


def build_model(cfg: ModelConfig, seed: int = 0) -> ModelWeights:
    """Seeded init: weights ~ U(-sqrt(1/fan_in), sqrt(1/fan_in)), biases 0, norm gamma 1 / beta 0."""
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    for s in param_specs(cfg):
        if s.init == "uniform":
            bound = np.sqrt(1.0 / s.fan_in)
            params[s.name] = rng.uniform(-bound, bound, size=s.shape)
        elif s.init == "ones":
            params[s.name] = np.ones(s.shape)
        else:
            params[s.name] = np.zeros(s.shape)
    buffers = {name: RunningStats.fresh(params[name + "/gamma"].size) for name in bn_buffer_names(cfg)}
    return ModelWeights(cfg, params, buffers)


# ---------------------------------------------------------------- param audit

@dataclass(frozen=True)
class ParamTable:
    rows: tuple[tuple[str, str, int], ...]  # (stage, module, count)
    total: int

    def by_stage(self) -> dict[str, int]:
        out: dict[str, int] = {}
        for stage, _, n in self.rows:
            out[stage] = out.get(stage, 0) + n
        return out

    def to_dict(self) -> dict:
        return {"rows": [{"stage": s, "module": m, "params": n} for s, m, n in self.rows], "total": self.total}


def count_params(cfg: ModelConfig) -> ParamTable:
    counts: "OrderedDict[tuple[str, str], int]" = OrderedDict()
    for s in param_specs(cfg):
        key = (s.stage, s.module)
        counts[key] = counts.get(key, 0) + s.size
    rows = tuple((st, mod, n) for (st, mod), n in counts.items())
    return ParamTable(rows, sum(n for _, _, n in rows))


# ---------------------------------------------------------------- forward

@dataclass
class Level:
    scene: np.ndarray
    grid: np.ndarray
    index: VoxelIndex | None = None
    tables: dict[int, NeighborTable] = field(default_factory=dict)
    orders: dict[tuple[CurveKind, int], SerializedOrder] = field(default_factory=dict)
    positions: np.ndarray | None = None

    @property
    def n(self) -> int:
        return self.scene.size

    def table(self, k: int) -> NeighborTable:
        if k not in self.tables:
            if self.index is None:
                self.index = VoxelIndex(self.scene, self.grid, margin=k // 2 + 1)
            self.tables[k] = build_neighbor_table(self.index, k)
        return self.tables[k]

    def order(self, kind: CurveKind, group_size: int) -> SerializedOrder:
        # groups never exceed the largest scene at this level
        eff = max(1, min(group_size, int(np.bincount(self.scene).max())))
        key = (kind, eff)
        if key not in self.orders:
            self.orders[key] = serialize_coords(self.scene, self.grid, kind, eff)
        return self.orders[key]

    def rope_positions(self, mode: str) -> np.ndarray:
        if self.positions is None:
            self.positions = scene_positions(self.grid, self.scene, mode)
        return self.positions


@dataclass
class Hierarchy:
    levels: list[Level]
    plans: list[PoolingPlan]  # plans[i] maps level i -> level i+1


def build_hierarchy(batch: PointBatch, n_levels: int) -> Hierarchy:
    if batch.grid_coords is None:
        raise ValueError("forward needs a voxelized batch")
    levels = [Level(batch.scene_ids.astype(np.int64), batch.grid_coords.astype(np.int64))]
    plans = []
    for _ in range(n_levels - 1):
        plan = build_pooling_plan(levels[-1].scene, levels[-1].grid, 2)
        plans.append(plan)
        levels.append(Level(plan.child_scene, plan.child_grid))
    return Hierarchy(levels, plans)


class _Params:
    """Lazily exposes registry tensors as tape leaves."""

    def __init__(self, weights: ModelWeights, tape: Tape):
        self.weights, self.tape = weights, tape
        self.values: "OrderedDict[str, Value]" = OrderedDict()

    def __call__(self, name: str) -> Value:
        v = self.values.get(name)
        if v is None:
            v = self.values[name] = self.tape.leaf(self.weights.params[name], name)
        return v

    def branch(self, prefix: str, lin: str, bn: str) -> Branch:
        return Branch(self(f"{prefix}/{lin}/weight"), self(f"{prefix}/{lin}/bias"),
                      self(f"{prefix}/{bn}/gamma"), self(f"{prefix}/{bn}/beta"),
                      self.weights.buffers[f"{prefix}/{bn}"])

    def conv_block(self, p: str) -> ConvBlockWeights:
        return ConvBlockWeights(self(f"{p}/spconv/weight"), self(f"{p}/linear/weight"), self(f"{p}/linear/bias"),
                                self(f"{p}/norm/gamma"), self(f"{p}/norm/beta"))

    def attn_block(self, p: str) -> AttnBlockWeights:
        g = lambda n: self(f"{p}/{n}")  # noqa: E731
        return AttnBlockWeights(
            g("pre_norm/gamma"), g("pre_norm/beta"), g("attn_norm/gamma"), g("attn_norm/beta"),
            g("qkv/weight"), g("qkv/bias"), g("proj/weight"), g("proj/bias"),
            g("ffn_norm/gamma"), g("ffn_norm/beta"), g("fc1/weight"), g("fc1/bias"),
            g("fc2/weight"), g("fc2/bias"))


Timer = Callable[[str, str], "contextlib.AbstractContextManager"]


def _null_timer(stage: str, module: str):
    return contextlib.nullcontext()


@dataclass
class ForwardResult:
    logits: Value
    params: "OrderedDict[str, Value]"
    tape: Tape
    hierarchy: Hierarchy | None


def _run_stage(x: Value, stage: str, st: StageConfig, level: Level, cfg: ModelConfig, P: _Params, timer) -> Value:
    for b in range(st.blocks):
        if st.kind in (CONV, BOTH):
            with timer(stage, "conv_block"):
                x = conv_block(x, level.table(st.kernel_size), P.conv_block(f"{stage}/conv_block{b}"))
        if st.kind in (ATTN, BOTH):
            with timer(stage, "attn_block"):
                kind = CurveKind(cfg.curve) if cfg.curve else curve_schedule(b)
                rc = cfg.rope_config(st)
                x = attn_block(x, level.order(kind, st.group_size), level.rope_positions(rc.mode),
                               P.attn_block(f"{stage}/attn_block{b}"), rc, st.heads)
    return x


def forward(
    weights: ModelWeights,
    batch: PointBatch,
    *,
    train: bool = False,
    update_stats: bool | None = None,
    tape: Tape | None = None,
    timer: Timer | None = None,
    hierarchy: Hierarchy | None = None,
) -> ForwardResult:
    """Per-point class logits for a voxelized batch.

    ``train`` selects batch statistics in the BatchNorm layers; running
    statistics are updated only when ``update_stats`` (defaults to ``train``).
    Passing the ``hierarchy`` of an earlier call on the same batch skips
    rebuilding pooling plans, neighbour tables and serializations.
    """
    cfg = weights.cfg
    tape = tape if tape is not None else Tape(record=train)
    timer = timer or _null_timer
    update = train if update_stats is None else update_stats
    P = _Params(weights, tape)
    if batch.features.shape[1] != cfg.in_channels:
        raise ValueError(f"model expects {cfg.in_channels} input channels, batch has {batch.features.shape[1]}")
    if batch.n_points == 0:
        return ForwardResult(tape.leaf(np.zeros((0, cfg.num_classes))), P.values, tape, None)
    with timer("prep", "index"):
        hier = hierarchy if hierarchy is not None else build_hierarchy(batch, cfg.n_levels)
    levels, plans = hier.levels, hier.plans

    x = tape.leaf(batch.features, "input")
    with timer("stem", "stem"):
        x = stem(x, levels[0].table(cfg.stem_kernel),
                 StemWeights(P("stem/stem/spconv/weight"), P("stem/stem/norm/gamma"), P("stem/stem/norm/beta")))
    skips = []
    for i, st in enumerate(cfg.encoder):
        stage = f"E{i}"
        if i:
            with timer(stage, "pool"):
                x = grid_pool(x, plans[i - 1], P.branch(f"{stage}/pool", "linear", "bn"), train, update)
        x = _run_stage(x, stage, st, levels[i], cfg, P, timer)
        skips.append(x)
    for level in range(cfg.n_levels - 2, -1, -1):
        stage = f"D{level}"
        with timer(stage, "unpool"):
            x = grid_unpool(x, skips[level], plans[level],
                            P.branch(f"{stage}/unpool", "up_linear", "up_bn"),
                            P.branch(f"{stage}/unpool", "skip_linear", "skip_bn"), train, update)
        x = _run_stage(x, stage, cfg.decoder_stage(level), levels[level], cfg, P, timer)
    with timer("head", "head"):
        logits = linear(x, P("head/head/linear/weight"), P("head/head/linear/bias"))
    return ForwardResult(logits, P.values, tape, hier)


# ---------------------------------------------------------------- checkpoints

CKPT_MAGIC = b"LPTW"
CKPT_VERSION = 1


def save_checkpoint(weights: ModelWeights, path) -> None:
    """Named-tensor container: header, JSON config, index, then little-endian f64 payload."""
    tensors: list[tuple[str, np.ndarray]] = list(weights.params.items())
    for name, st in weights.buffers.items():
        tensors += [(f"buffer:{name}/mean", st.mean), (f"buffer:{name}/var", st.var)]
    meta = json.dumps(weights.cfg.to_dict()).encode()
    buf = io.BytesIO()
    buf.write(struct.pack("<4sHI", CKPT_MAGIC, CKPT_VERSION, len(tensors)))
    buf.write(struct.pack("<I", len(meta)) + meta)
    for name, arr in tensors:
        raw = name.encode()
        buf.write(struct.pack("<H", len(raw)) + raw + struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
    for _, arr in tensors:
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    with open(path, "wb") as fh:
        fh.write(buf.getvalue())


def load_checkpoint(path) -> ModelWeights:
    from .pointcloud import FormatError, PayloadLengthError, UnsupportedVersionError

    with open(path, "rb") as fh:
        blob = fh.read()
    try:
        magic, version, count = struct.unpack_from("<4sHI", blob, 0)
        if magic != CKPT_MAGIC:
            raise FormatError(f"{path}: bad checkpoint magic {magic!r}")
        if version != CKPT_VERSION:
            raise UnsupportedVersionError(f"{path}: unsupported checkpoint version {version:#x}")
        pos = 10
        (mlen,) = struct.unpack_from("<I", blob, pos)
        cfg = ModelConfig.from_dict(json.loads(blob[pos + 4:pos + 4 + mlen]))
        pos += 4 + mlen
        index = []
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", blob, pos)
            name = blob[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<B", blob, pos)
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos + 1)
            pos += 1 + 8 * ndim
            index.append((name, shape))
    except struct.error as exc:
        raise PayloadLengthError(f"{path}: truncated checkpoint header") from exc
    need = sum(8 * int(np.prod(s)) for _, s in index)
    if len(blob) - pos != need:
        raise PayloadLengthError(f"{path}: expected {need} payload bytes, found {len(blob) - pos}")
    params: "OrderedDict[str, np.ndarray]" = OrderedDict()
    raw_buffers: dict[str, np.ndarray] = {}
    for name, shape in index:
        size = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        if name.startswith("buffer:"):
            raw_buffers[name[len("buffer:"):]] = arr
        else:
            params[name] = arr
    buffers = {n: RunningStats(raw_buffers[f"{n}/mean"], raw_buffers[f"{n}/var"]) for n in bn_buffer_names(cfg)}
    expected = {s.name: s.shape for s in param_specs(cfg)}
    got = {k: v.shape for k, v in params.items()}
    if expected != got:
        raise FormatError(f"{path}: tensors do not match the stored config")
    return ModelWeights(cfg, params, buffers)
