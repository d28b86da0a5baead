import math

import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal

from hybridpt.autodiff import RunningStats, Tape, gelu, batch_norm
from hybridpt.pointcloud import concat_batches, make_batch, make_synthetic_scene
from hybridpt.voxel import Branch, VoxelIndex, build_pooling_plan, grid_pool, grid_unpool, voxelize

from conftest import check_grads


def test_voxelize_merges_cell():
    b = make_batch([[0.001, 0, 0], [0.015, 0, 0]], [[1.0], [3.0]], [2, 1])
    v = voxelize(b, 0.02)
    assert v.n_points == 1
    assert_array_equal(v.grid_coords, [[0, 0, 0]])
    assert_allclose(v.features, [[2.0]])
    assert_allclose(v.coords, [[0.008, 0, 0]])
    assert_array_equal(v.labels, [2])  # representative's label


def test_voxelize_negative_floor():
    v = voxelize(make_batch([[0.05, -0.03, 0.0]], [[0.0]]), 0.02)
    assert_array_equal(v.grid_coords, [[2, -2, 0]])


def test_voxelize_unique_cells_untouched(rng):
    g = rng.permutation(1000)[:50]
    coords = np.column_stack([g, g % 7, g % 3]) * 0.02 + 0.005
    v = voxelize(make_batch(coords, coords), 0.02)
    assert v.n_points == 50
    assert_allclose(v.coords, coords)


def test_voxelize_representative_order():
    # cells first seen at rows 0, 1, 3
    coords = [[0.5, 0, 0], [0.1, 0, 0], [0.51, 0, 0], [0.9, 0, 0]]
    v = voxelize(make_batch(coords, np.arange(4.0)), 0.1)
    assert_array_equal(v.grid_coords[:, 0], [5, 1, 9])
    assert_allclose(v.features[:, 0], [1.0, 1.0, 3.0])


def test_voxelize_idempotent():
    v = voxelize(make_synthetic_scene(2, 5000, extent_m=0.5), 0.02)
    w = voxelize(v, 0.02)
    assert w.n_points == v.n_points
    assert_array_equal(w.grid_coords, v.grid_coords)


def test_voxelize_keeps_scenes_apart():
    a = make_batch([[0.0, 0, 0]], [[1.0]])
    b = make_batch([[0.001, 0, 0], [0.002, 0, 0]], [[2.0], [4.0]])
    v = voxelize(concat_batches([a, b]), 0.02)
    assert v.n_points == 2
    assert_array_equal(v.batch_offsets, [0, 1, 2])
    assert_allclose(v.features[:, 0], [1, 3])


def test_voxelize_rejects_bad_grid():
    with pytest.raises(ValueError):
        voxelize(make_batch([[0.0, 0, 0]], [[0.0]]), 0.0)


def test_voxel_index_bijection(rng):
    g = np.unique(rng.integers(-20, 20, (300, 3)), axis=0)
    scene = (np.arange(len(g)) >= len(g) // 2).astype(np.int64)
    idx = VoxelIndex(scene, g)
    assert len(idx) == len(g)
    for i in range(len(g)):
        assert idx[(scene[i], *g[i])] == i
    assert_array_equal(idx.lookup(scene, g), np.arange(len(g)))
    assert (idx.lookup(scene, g + 1000) == -1).all()
    with pytest.raises(KeyError):
        idx[(5, 0, 0, 0)]


def test_voxel_index_rejects_duplicates():
    with pytest.raises(ValueError, match="duplicate"):
        VoxelIndex(np.zeros(2, np.int64), np.zeros((2, 3), np.int64))


# ---------------------------------------------------------------- pooling plan

def test_plan_same_child():
    p = build_pooling_plan(np.zeros(2, np.int64), np.array([[0, 0, 0], [1, 1, 1]]))
    assert p.n_children == 1
    assert_array_equal(p.child_grid, [[0, 0, 0]])


def test_plan_different_children():
    p = build_pooling_plan(np.zeros(2, np.int64), np.array([[2, 0, 0], [0, 0, 0]]))
    assert p.n_children == 2
    assert_array_equal(p.segments, [1, 0])


def test_plan_single_point():
    p = build_pooling_plan(np.zeros(1, np.int64), np.array([[5, -3, 2]]))
    assert p.n_children == 1 and p.segments.tolist() == [0]
    assert_array_equal(p.child_grid, [[2, -2, 1]])


def test_plan_partition_property(rng):
    g = np.unique(rng.integers(-9, 9, (400, 3)), axis=0)
    scene = rng.integers(0, 3, len(g))
    o = np.argsort(scene, kind="stable")
    g, scene = g[o], scene[o]
    p = build_pooling_plan(scene, g)
    assert set(p.segments.tolist()) == set(range(p.n_children))
    assert_array_equal(p.child_grid[p.segments], np.floor_divide(g, 2))
    assert_array_equal(p.child_scene[p.segments], scene)
    # lexicographic (scene, gz, gy, gx) child order
    key = [tuple(k) for k in np.column_stack([p.child_scene, p.child_grid[:, ::-1]])]
    assert key == sorted(key)


@pytest.mark.parametrize("k", [1, 2, 5, 8, 13, 32])
def test_five_pools_on_dense_cube(k):
    ax = np.arange(k)
    g = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), -1).reshape(-1, 3)
    scene = np.zeros(len(g), np.int64)
    size = k
    for _ in range(5):
        p = build_pooling_plan(scene, g)
        size = math.ceil(size / 2)
        assert p.n_children == size ** 3
        g, scene = p.child_grid, p.child_scene


# ---------------------------------------------------------------- pool / unpool

def make_branch(tape, w, b, gamma=None, beta=None):
    c = np.asarray(w).shape[1]
    return Branch(tape.leaf(w), tape.leaf(b), tape.leaf(np.ones(c) if gamma is None else gamma),
                  tape.leaf(np.zeros(c) if beta is None else beta), RunningStats.fresh(c))


def test_pool_premax_values():
    t = Tape()
    plan = build_pooling_plan(np.zeros(3, np.int64), np.array([[0, 0, 0], [1, 0, 0], [4, 4, 4]]))
    x = t.leaf([[1.0, 3.0], [2.0, 1.0], [-1.0, 0.5]])
    out = grid_pool(x, plan, make_branch(t, np.eye(2), np.zeros(2)), train=True)
    pre = np.array([[2.0, 3.0], [-1.0, 0.5]])
    ref = batch_norm(gelu(Tape().leaf(pre)), np.ones(2), np.zeros(2), RunningStats.fresh(2), True).data
    assert_allclose(out.data, ref, rtol=1e-14)
    assert_array_equal(plan.argmax, [[1, 0], [2, 2]])


def test_pool_degenerate_partition(rng):
    g = np.array([[0, 0, 0], [2, 0, 0], [0, 2, 0], [0, 0, 2]])
    plan = build_pooling_plan(np.zeros(4, np.int64), g)
    x = rng.normal(size=(4, 3))
    w, b = rng.normal(size=(3, 2)), rng.normal(size=2)
    t = Tape()
    out = grid_pool(t.leaf(x), plan, make_branch(t, w, b))
    lin = Tape().leaf((x @ w + b)[np.argsort(plan.segments)][plan.segments])
    ref = batch_norm(gelu(lin), np.ones(2), np.zeros(2), RunningStats.fresh(2), True).data
    assert_allclose(out.data[plan.segments], ref, rtol=1e-12)


def test_pool_shape_mismatch():
    t = Tape()
    plan = build_pooling_plan(np.zeros(2, np.int64), np.array([[0, 0, 0], [9, 9, 9]]))
    with pytest.raises(ValueError):
        grid_pool(t.leaf(np.ones((3, 2))), plan, make_branch(t, np.eye(2), np.zeros(2)))


SIX = np.array([[0, 0, 0], [1, 0, 0], [0, 1, 1], [3, 0, 0], [2, 1, 0], [5, 5, 5]])


def test_pool_grad(rng):
    plan = build_pooling_plan(np.zeros(6, np.int64), SIX)

    def f(t, x, w, b, g, be):
        return grid_pool(x, plan, Branch(w, b, g, be, RunningStats.fresh(3)))

    err = check_grads(f, [rng.uniform(-2, 2, (6, 4)), rng.uniform(-2, 2, (4, 3)), rng.uniform(-2, 2, 3),
                          rng.uniform(-2, 2, 3), rng.uniform(-2, 2, 3)])
    assert err < 1e-4


def test_unpool_zero_skip_branch(rng):
    plan = build_pooling_plan(np.zeros(6, np.int64), SIX)
    t = Tape()
    child = t.leaf(rng.normal(size=(plan.n_children, 3)))
    skip = t.leaf(rng.normal(size=(6, 2)))
    cb = make_branch(t, rng.normal(size=(3, 4)), rng.normal(size=4))
    sb = make_branch(t, np.zeros((2, 4)), np.zeros(4))
    out = grid_unpool(child, skip, plan, cb, sb)
    bc = Tape().leaf(child.data[plan.segments] @ cb.weight.data + cb.bias.data)
    ref = batch_norm(gelu(bc), np.ones(4), np.zeros(4), RunningStats.fresh(4), True).data
    assert_allclose(out.data, ref, rtol=1e-12, atol=1e-15)


def test_unpool_identity_plan(rng):
    g = np.array([[0, 0, 0], [2, 0, 0], [0, 4, 0]])
    plan = build_pooling_plan(np.zeros(3, np.int64), g)
    assert plan.n_children == 3
    t = Tape()
    x = t.leaf(rng.normal(size=(3, 2)))
    cb = make_branch(t, rng.normal(size=(2, 2)), np.zeros(2))
    sb = make_branch(t, rng.normal(size=(2, 2)), np.zeros(2))
    out = grid_unpool(x, x, plan, cb, sb)
    assert out.shape == (3, 2)


def test_unpool_restores_rows(rng):
    plan = build_pooling_plan(np.zeros(6, np.int64), SIX)
    t = Tape()
    out = grid_unpool(t.leaf(np.ones((plan.n_children, 2))), t.leaf(np.ones((6, 3))), plan,
                      make_branch(t, np.ones((2, 5)), np.zeros(5)), make_branch(t, np.ones((3, 5)), np.zeros(5)))
    assert out.shape == (6, 5)


def test_unpool_channel_mismatch():
    plan = build_pooling_plan(np.zeros(6, np.int64), SIX)
    t = Tape()
    with pytest.raises(ValueError):
        grid_unpool(t.leaf(np.ones((plan.n_children, 2))), t.leaf(np.ones((6, 3))), plan,
                    make_branch(t, np.ones((2, 5)), np.zeros(5)), make_branch(t, np.ones((3, 4)), np.zeros(4)))


def test_unpool_grad(rng):
    plan = build_pooling_plan(np.zeros(6, np.int64), SIX)

    def f(t, c, s, w1, b1, w2, b2):
        one = lambda k: t.leaf(np.ones(k))  # noqa: E731
        zero = lambda k: t.leaf(np.zeros(k))  # noqa: E731
        return grid_unpool(c, s, plan, Branch(w1, b1, one(3), zero(3), RunningStats.fresh(3)),
                           Branch(w2, b2, one(3), zero(3), RunningStats.fresh(3)))

    err = check_grads(f, [rng.uniform(-2, 2, (plan.n_children, 4)), rng.uniform(-2, 2, (6, 2)),
                          rng.uniform(-2, 2, (4, 3)), rng.uniform(-2, 2, 3),
                          rng.uniform(-2, 2, (2, 3)), rng.uniform(-2, 2, 3)])
    assert err < 1e-4
