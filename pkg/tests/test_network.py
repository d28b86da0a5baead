import numpy as np
import pytest
from numpy.testing import assert_array_equal

from hybridpt.network import (
    ConfigError,
    ModelConfig,
    StageConfig,
    build_model,
    count_params,
    forward,
    load_checkpoint,
    make_config,
    micro_preset,
    param_specs,
    preset,
    save_checkpoint,
)
from hybridpt.pointcloud import FormatError, PayloadLengthError, concat_batches, make_synthetic_scene
from hybridpt.voxel import voxelize

S_ARGS = ((36, 72, 144, 252, 504), (2, 2, 2, 6, 2), (252, 144, 72, 72))


def scene(seed=0, n=600, extent=0.6, channels=None):
    b = voxelize(make_synthetic_scene(seed, n, extent), 0.02)
    if channels is not None and channels != 3:
        reps = -(-channels // 3)
        b = b.with_(features=np.tile(b.features, reps)[:, :channels])
    return b


def test_preset_s_layout():
    cfg = preset("s")
    assert [s.channels for s in cfg.encoder] == [36, 72, 144, 252, 504]
    assert [s.blocks for s in cfg.encoder] == [2, 2, 2, 6, 2]
    assert [s.kind for s in cfg.encoder] == ["conv"] * 3 + ["attn"] * 2
    e3 = cfg.encoder[3]
    assert (e3.channels, e3.heads) == (252, 14)
    rc = cfg.rope_config(e3)
    assert rc.head_dim == 18 and rc.split == (6, 6, 6)
    assert all(s.mlp_ratio == 4 and s.group_size == 1024 for s in cfg.encoder)
    assert cfg.encoder[0].kernel_size == 3 and cfg.stem_kernel == 5
    assert cfg.conv_stages == 3 and cfg.rope_base == 100


def test_bad_heads_names_stage():
    with pytest.raises(ConfigError, match="E3"):
        make_config("bad", (36, 72, 144, 250, 504), (2, 2, 2, 6, 2), (252, 144, 72, 72),
                    heads=(0, 0, 0, 14, 28))


def test_head_dim_must_allow_three_axes():
    with pytest.raises(ConfigError, match="E2"):
        make_config("bad", (12, 24, 32), (1, 1, 1), (24, 12), conv_stages=2, heads=(0, 0, 4))


def test_unknown_preset():
    with pytest.raises(ConfigError):
        preset("xl")


@pytest.mark.parametrize("name,target", [("s", 12.7e6), ("s-star", 16.0e6), ("b", 45.1e6), ("l", 85.9e6)])
def test_param_totals(name, target):
    table = count_params(preset(name))
    assert abs(table.total - target) / target < 0.05
    assert sum(n for _, _, n in table.rows) == table.total
    assert sum(table.by_stage().values()) == table.total


def test_param_totals_exact():
    # regression values; each rounds to the published figure
    got = {n: count_params(preset(n)).total for n in ("s", "s-star", "b", "l", "micro")}
    assert got == {"s": 12_713_888, "s-star": 15_989_096, "b": 45_113_114, "l": 85_880_396, "micro": 44_356}


@pytest.mark.parametrize("lc,expect", [(0, 11.8), (1, 11.9), (2, 12.0), (3, 12.7), (4, 18.8), (5, 26.9)])
def test_conv_attn_transition_sweep(lc, expect):
    # published figures are rounded to 0.1M
    total = count_params(make_config("x", *S_ARGS, conv_stages=lc)).total
    assert abs(total / 1e6 - expect) / expect < 0.01


@pytest.mark.parametrize("stage,expect", [(1, 12.2), (2, 13.2), (3, 23.4)])
def test_handover_stage(stage, expect):
    cfg = make_config("x", *S_ARGS, conv_stages=stage, handover=stage)
    assert cfg.encoder[stage].kind == "both"
    assert round(count_params(cfg).total / 1e6, 1) == expect


def test_count_matches_materialized_registry():
    for cfg in (micro_preset(), preset("s")):
        w = build_model(cfg, 0)
        assert w.n_params == count_params(cfg).total
        assert list(w.params) == [s.name for s in param_specs(cfg)]


def test_conv_block_param_formula():
    c = 72
    cfg = preset("s")
    rows = {(s, m): n for s, m, n in count_params(cfg).rows}
    assert rows[("E1", "conv_block")] == 2 * (27 * c * c + c * c + c + 2 * c)


def names(cfg):
    return [s.name for s in param_specs(cfg)]


def test_stage_dispatch_audit():
    n = names(preset("s"))
    for st in ("E0", "E1", "E2"):
        assert not [x for x in n if x.startswith(st + "/") and "attn" in x]
        assert [x for x in n if x.startswith(st + "/") and "spconv" in x]
    for st in ("E3", "E4"):
        assert not [x for x in n if x.startswith(st + "/") and "spconv" in x]
        assert [x for x in n if x.startswith(st + "/") and "attn_block" in x]


def test_exact_name_sets_s():
    n = set(names(preset("s")))
    conv = {f"E{i}/conv_block{b}/{l}" for i in range(3) for b in range(2)
            for l in ("spconv/weight", "linear/weight", "linear/bias", "norm/gamma", "norm/beta")}
    attn_layers = ("pre_norm/gamma", "pre_norm/beta", "attn_norm/gamma", "attn_norm/beta", "qkv/weight",
                   "qkv/bias", "proj/weight", "proj/bias", "ffn_norm/gamma", "ffn_norm/beta", "fc1/weight",
                   "fc1/bias", "fc2/weight", "fc2/bias")
    attn = {f"E{i}/attn_block{b}/{l}" for i, nb in ((3, 6), (4, 2)) for b in range(nb) for l in attn_layers}
    pool = {f"E{i}/pool/{l}" for i in range(1, 5) for l in ("linear/weight", "linear/bias", "bn/gamma", "bn/beta")}
    unpool = {f"D{i}/unpool/{br}/{p}" for i in range(4)
              for br, ps in (("up_linear", ("weight", "bias")), ("up_bn", ("gamma", "beta")),
                             ("skip_linear", ("weight", "bias")), ("skip_bn", ("gamma", "beta")))
              for p in ps}
    rest = {"stem/stem/spconv/weight", "stem/stem/norm/gamma", "stem/stem/norm/beta",
            "head/head/linear/weight", "head/head/linear/bias"}
    assert n == conv | attn | pool | unpool | rest


def test_symmetric_decoder_mirrors_encoder():
    s, ss = set(names(preset("s"))), set(names(preset("s-star")))
    enc = lambda ns: {x for x in ns if x[0] in "Es" or x.startswith("head")}  # noqa: E731
    assert enc(s) == enc(ss)
    extra = ss - s
    assert s < ss
    assert {x.split("/")[0] for x in extra} == {"D0", "D1", "D2", "D3"}
    assert all("attn_block" in x for x in extra if x.startswith("D3/"))
    assert all("conv_block" in x for x in extra if x[:2] in ("D0", "D1", "D2"))


def test_micro_preset():
    cfg = micro_preset()
    assert [s.channels for s in cfg.encoder] == [12, 24, 36]
    assert [s.kind for s in cfg.encoder] == ["conv", "conv", "attn"]
    assert cfg.rope_config(cfg.encoder[2]).head_dim == 6
    assert cfg.encoder[2].group_size == 16
    assert count_params(cfg).total < 100_000


def test_build_deterministic_and_seeded():
    a, b, c = build_model(micro_preset(), 3), build_model(micro_preset(), 3), build_model(micro_preset(), 4)
    for k in a.params:
        assert a.params[k].tobytes() == b.params[k].tobytes()
    assert any(a.params[k].tobytes() != c.params[k].tobytes() for k in a.params if k.endswith("weight"))


def test_init_ranges():
    w = build_model(micro_preset(), 0)
    for s in param_specs(w.cfg):
        p = w.params[s.name]
        if s.init == "uniform":
            assert np.abs(p).max() <= np.sqrt(1 / s.fan_in)
        elif s.init == "ones":
            assert (p == 1).all()
        else:
            assert (p == 0).all()


@pytest.mark.parametrize("name", ["micro", "s", "s-star"])
def test_forward_shape(name):
    cfg = preset(name, num_classes=19, in_channels=3)
    w = build_model(cfg, 0)
    b = scene(n=300)
    assert forward(w, b).logits.shape == (b.n_points, 19)
    one = scene(n=1)
    assert forward(w, one).logits.shape == (1, 19)


def test_forward_multi_scene_rows_align():
    cfg = micro_preset()
    w = build_model(cfg, 1)
    a, b = scene(1, 300), scene(2, 200)
    both = forward(w, concat_batches([a, b])).logits.data
    # scenes never mix; only BLAS blocking over a taller matrix may differ
    np.testing.assert_allclose(both[:a.n_points], forward(w, a).logits.data, rtol=1e-12, atol=1e-14)


def test_forward_empty_batch():
    w = build_model(micro_preset(), 0)
    empty = scene(n=1).with_(coords=np.zeros((0, 3)), features=np.zeros((0, 3)), grid_coords=np.zeros((0, 3), int),
                             batch_offsets=np.array([0]), labels=None)
    assert forward(w, empty).logits.shape == (0, 4)


def test_forward_constant_network():
    w = build_model(micro_preset(), 0)
    for k in w.params:
        w.params[k][...] = 0.0
    w.params["head/head/linear/bias"][:] = [0.5, -1.0, 2.0, 3.5]
    out = forward(w, scene(n=400)).logits.data
    assert (out == np.array([0.5, -1.0, 2.0, 3.5])).all()


def test_forward_deterministic():
    w = build_model(micro_preset(), 0)
    b = scene(n=800)
    r = [forward(w, b).logits.data.tobytes() for _ in range(3)]
    assert r[0] == r[1] == r[2]


def test_forward_channel_mismatch():
    w = build_model(preset("micro"), 0)
    with pytest.raises(ValueError, match="input channels"):
        forward(w, scene(n=50, channels=6))


def test_train_mode_updates_running_stats_only_when_asked():
    w = build_model(micro_preset(), 0)
    b = scene(n=400)
    before = w.buffers["E1/pool/bn"].mean.copy()
    forward(w, b, train=True, update_stats=False)
    assert_array_equal(w.buffers["E1/pool/bn"].mean, before)
    forward(w, b, train=True)
    assert not np.array_equal(w.buffers["E1/pool/bn"].mean, before)


def test_ablation_flags_flow_through():
    cfg = preset("s", rope_enabled=False, rope_base=10.0, rope_mode="spherical", curve="hilbert")
    rc = cfg.rope_config(cfg.encoder[3])
    assert (rc.enabled, rc.base, rc.mode) == (False, 10.0, "spherical")
    assert preset("s", rope_split=(4, 4, 10)).rope_config(cfg.encoder[3]).split == (4, 4, 10)
    with pytest.raises(ConfigError):
        preset("s", rope_split=(4, 4, 4))
    with pytest.raises(ValueError):
        preset("s", curve="peano")


def test_config_round_trip():
    cfg = preset("s-star", rope_split=(6, 4, 8))
    assert ModelConfig.from_dict(cfg.to_dict()) == cfg


def test_checkpoint_round_trip(tmp_path):
    w = build_model(micro_preset(), 5)
    forward(w, scene(n=300), train=True)  # move running stats off their defaults
    p = tmp_path / "w.lptw"
    save_checkpoint(w, p)
    r = load_checkpoint(p)
    assert r.cfg == w.cfg
    for k in w.params:
        assert r.params[k].tobytes() == w.params[k].tobytes()
    for k in w.buffers:
        assert r.buffers[k].var.tobytes() == w.buffers[k].var.tobytes()
    b = scene(n=300)
    assert forward(r, b).logits.data.tobytes() == forward(w, b).logits.data.tobytes()


def test_checkpoint_corruption(tmp_path):
    p = tmp_path / "w.lptw"
    save_checkpoint(build_model(micro_preset(), 0), p)
    blob = p.read_bytes()
    (tmp_path / "t.lptw").write_bytes(blob[:-8])
    with pytest.raises(PayloadLengthError):
        load_checkpoint(tmp_path / "t.lptw")
    (tmp_path / "m.lptw").write_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        load_checkpoint(tmp_path / "m.lptw")


def test_stage_config_validation():
    with pytest.raises(ConfigError):
        ModelConfig("x", (StageConfig(12, 1, "conv", kernel_size=4), StageConfig(12, 1)), (StageConfig(12, 0),))
    with pytest.raises(ConfigError):
        ModelConfig("x", (StageConfig(12, 1, "mlp"),), ())
