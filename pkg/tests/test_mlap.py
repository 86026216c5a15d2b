import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from shipdet.geometry import box_corners
from shipdet.gradcheck import check_gradient
from shipdet.mlap import (
    GRID_CELLS,
    LevelSmoother,
    adaptive_pool,
    adaptive_pool_backward,
    enlarge,
    level_map,
    ring_local_points,
    ring_sample_points,
    sample_layout,
)
from shipdet.tensor import ShapeError, bilinear_sample


@pytest.fixture
def rng():
    return np.random.default_rng(5)


def test_enlarge_examples():
    box = np.array([[0, 0, 70, 14, 0.4]])
    np.testing.assert_array_equal(enlarge(box, 1.0), box)
    np.testing.assert_allclose(enlarge(box, 1.2), [[0, 0, 84, 16.8, 0.4]])
    with pytest.raises(ValueError):
        enlarge(box, 0.9)


@given(st.floats(10, 300), st.floats(5, 100), st.floats(1, 2))
def test_enlarge_area_scaling(w, h, f):
    b = enlarge([[1, 2, w, h, 0.1]], f)[0]
    assert b[2] * b[3] == pytest.approx(w * h * f * f)
    assert tuple(b[[0, 1, 4]]) == (1, 2, 0.1)


def test_pattern_structure():
    pat = ring_sample_points((50, 60, 70, 14, 0.3))
    assert pat.points.shape == (49, 2)
    assert np.bincount(pat.ring).tolist() == [24, 16, 9]
    assert sorted(GRID_CELLS.tolist()) == list(range(49))
    assert GRID_CELLS[0] == 0 and GRID_CELLS[24] == 8 and GRID_CELLS[40] == 16 and GRID_CELLS[48] == 24
    np.testing.assert_array_equal(pat.level, np.repeat([0, 1, 2], [24, 16, 9]))


@pytest.mark.parametrize("frac,lo,hi", [(6 / 7, 0, 24), (4 / 7, 24, 40), (2 / 7, 40, 48)])
def test_rings_lie_on_fractional_rectangles(frac, lo, hi):
    w, h = 70.0, 14.0
    loc = ring_local_points(w, h)[lo:hi]
    on_v = np.isclose(np.abs(loc[:, 1]), frac * h / 2)
    on_u = np.isclose(np.abs(loc[:, 0]), frac * w / 2)
    assert np.all(on_u | on_v)
    assert np.all(np.abs(loc[:, 0]) <= frac * w / 2 + 1e-12)
    assert np.all(np.abs(loc[:, 1]) <= frac * h / 2 + 1e-12)


def test_ring_starts_top_left_clockwise():
    loc = ring_local_points(70.0, 14.0)[:24]
    # first sample on the top edge (v < 0) just right of the top-left corner
    assert loc[0, 1] == pytest.approx(-3 * 14 / 7) and loc[0, 0] < 0
    assert np.all(np.diff(loc[:5, 0]) > 0)


def test_square_pattern_has_quarter_turn_symmetry():
    loc = ring_local_points(40.0, 40.0)[:24]
    turned = np.column_stack([-loc[:, 1], loc[:, 0]])
    d = np.linalg.norm(turned[:, None] - loc[None], axis=-1)
    assert np.all(d.min(axis=1) < 1e-9)


def arc_length_counts(w, h, f, n):
    # independent enumeration: walk the perimeter in fine steps
    hw, hh = f * w / 2, f * h / 2
    per = 4 * (hw + hh)
    counts = {"top": 0, "right": 0, "bottom": 0, "left": 0}
    for k in range(n):
        s = (k + 0.5) * per / n
        if s < 2 * hw:
            counts["top"] += 1
        elif s < 2 * hw + 2 * hh:
            counts["right"] += 1
        elif s < 4 * hw + 2 * hh:
            counts["bottom"] += 1
        else:
            counts["left"] += 1
    return counts


def test_elongated_ring_counts_follow_perimeter():
    w, h = 80.0, 20.0
    loc = ring_local_points(w, h)[:24]
    hw, hh = 3 / 7 * w, 3 / 7 * h
    top = np.isclose(loc[:, 1], -hh) & (np.abs(loc[:, 0]) < hw)
    bottom = np.isclose(loc[:, 1], hh) & (np.abs(loc[:, 0]) < hw)
    ref = arc_length_counts(w, h, 6 / 7, 24)
    assert top.sum() == ref["top"] and bottom.sum() == ref["bottom"]
    assert top.sum() == pytest.approx(24 * w / (2 * (w + h)), abs=1)


def test_level_maps():
    assert level_map(3).tolist() == [0, 1, 2, 2]
    assert level_map(3, "reverse").tolist() == [2, 1, 0, 0]
    assert level_map(1).tolist() == [0, 0, 0, 0]
    with pytest.raises(ValueError):
        level_map(6)


def const_levels(values, B=1, C=4, H=12, W=12):
    return [np.full((B, C, H, W), v, dtype=np.float64) for v in values]


def test_constant_field_pools_constant():
    box = np.array([[90, 100, 70, 20, 0.5]])
    out, _ = adaptive_pool(const_levels([2.5, 2.5, 2.5]), [0], box, 16)
    assert out.shape == (1, 4, 7, 7)
    np.testing.assert_allclose(out, 2.5)


def test_per_level_constants_map_to_rings():
    box = np.array([[90, 100, 70, 20, -0.3]])
    out, _ = adaptive_pool(const_levels([1, 2, 3]), [0], box, 16)
    grid = np.round(out[0, 0], 9)
    assert (grid == 1).sum() == 24 and (grid == 2).sum() == 16 and (grid == 3).sum() == 9
    np.testing.assert_array_equal(grid[0], 1)
    assert grid[3, 3] == 3 and grid[1, 1] == 2
    rev, _ = adaptive_pool(const_levels([1, 2, 3]), [0], box, 16, mode="reverse")
    np.testing.assert_allclose(rev[0, 0], 4 - grid, atol=1e-9)


def test_channel_concat_and_standard_identity(rng):
    levels = [rng.standard_normal((2, 3, 10, 10)) for _ in range(3)]
    boxes = np.array([[70, 80, 60, 20, 0.2], [60, 50, 40, 30, -1.0]])
    std, _ = adaptive_pool(levels, [0, 1], boxes, 16)
    cat, _ = adaptive_pool(levels, [0, 1], boxes, 16, mode="channel_concat")
    assert cat.shape == (2, 9, 7, 7)
    # each level's block equals single-level pooling from that level
    for lv in range(3):
        single, _ = adaptive_pool([levels[lv]], [0, 1], boxes, 16)
        np.testing.assert_allclose(cat[:, 3 * lv : 3 * lv + 3], single)
    # the standard path matches an explicit per-sample evaluation
    pts, group, cells = sample_layout(boxes)
    lv = level_map(3)[group]
    for p in range(2):
        for k in range(49):
            v, _ = bilinear_sample(levels[lv[k]], p, pts[p, k, 0] / 16 - 0.5, pts[p, k, 1] / 16 - 0.5)
            np.testing.assert_allclose(std[p, :, cells[k] // 7, cells[k] % 7], v)


@pytest.mark.parametrize("mode", ["standard", "reverse", "channel_concat"])
@pytest.mark.parametrize("pattern", ["ring", "typical"])
def test_pool_gradients(rng, mode, pattern):
    levels = [rng.standard_normal((2, 2, 8, 8)) for _ in range(3)]
    boxes = np.array([[60, 60, 70, 20, 0.3], [50, 70, 40, 25, -0.9]])
    out, cache = adaptive_pool(levels, [1, 0], boxes, 16, mode=mode, pattern=pattern)
    r = rng.standard_normal(out.shape)
    grads = adaptive_pool_backward(r, cache)
    for lv in range(3):

        def loss():
            return float(np.sum(adaptive_pool(levels, [1, 0], boxes, 16, mode=mode, pattern=pattern)[0] * r))

        nz = np.flatnonzero(grads[lv])
        assert len(nz) > 0
        idx = rng.choice(nz, 20)
        worst = max(
            abs(_fd(loss, levels[lv], i) - grads[lv].flat[i]) / max(abs(grads[lv].flat[i]), 1e-7) for i in idx
        )
        assert worst < 1e-3


def _fd(f, x, i, eps=1e-6):
    old = x.flat[i]
    x.flat[i] = old + eps
    a = f()
    x.flat[i] = old - eps
    b = f()
    x.flat[i] = old
    return (a - b) / (2 * eps)


def test_gradient_stays_inside_proposal_region(rng):
    stride = 8
    levels = [rng.standard_normal((1, 2, 30, 30)) for _ in range(3)]
    box = np.array([[120, 110, 90, 24, 0.6]])
    out, cache = adaptive_pool(levels, [0], box, stride)
    grads = adaptive_pool_backward(np.ones_like(out), cache)
    corners = box_corners(enlarge(box))[0]
    lo, hi = corners.min(axis=0) - stride, corners.max(axis=0) + stride
    for g in grads:
        ii, jj = np.nonzero(np.abs(g[0]).sum(axis=0))
        xs, ys = (jj + 0.5) * stride, (ii + 0.5) * stride
        assert np.all((xs >= lo[0]) & (xs <= hi[0]) & (ys >= lo[1]) & (ys <= hi[1]))


@given(st.floats(-0.6, 0.6), st.floats(-0.4, 0.4))
@settings(max_examples=20, deadline=None)
def test_rigid_rotation_invariance(theta, delta):
    # smooth field rotated about the box center, sampled on a fine grid
    stride, n = 1, 160
    c = np.array([80.0, 80.0])

    def field(x, y):
        return np.sin(0.05 * x) + np.cos(0.04 * y) + 0.001 * x * y

    ys, xs = np.mgrid[0:n, 0:n] + 0.5
    a = field(xs, ys)
    # content rotated by delta: value at p equals the original at R(-delta)(p - c) + c
    cd, sd = math.cos(-delta), math.sin(-delta)
    ux, uy = xs - c[0], ys - c[1]
    b = field(cd * ux - sd * uy + c[0], sd * ux + cd * uy + c[1])
    box = np.array([[80, 80, 70, 20, theta]])
    turned = np.array([[80, 80, 70, 20, theta + delta]])
    pa, _ = adaptive_pool([a[None, None]], [0], box, stride)
    pb, _ = adaptive_pool([b[None, None]], [0], turned, stride)
    assert np.max(np.abs(pa - pb)) < 1e-2


# ---------------------------------------------------------------------------
# level smoothing
# ---------------------------------------------------------------------------

def test_smoother_unifies_levels(rng):
    sm = LevelSmoother([4, 6, 8], [4, 8, 16], rng, out_channels=5, dtype=np.float64)
    raw = [rng.standard_normal((2, 4, 16, 16)), rng.standard_normal((2, 6, 8, 8)), rng.standard_normal((2, 8, 4, 4))]
    out = sm.forward(raw)
    assert [o.shape for o in out] == [(2, 5, 4, 4)] * 3
    assert sm.stride == 16


def test_single_level_is_one_smoothing_conv(rng):
    sm = LevelSmoother([6], [16], rng, out_channels=3, dtype=np.float64)
    assert sm.lateral == [] and len(sm.smooth) == 1
    x = rng.standard_normal((1, 6, 5, 5))
    ref = sm.unify[0].forward(sm.smooth[0].forward(x))
    np.testing.assert_allclose(sm.forward([x])[0], ref)


def test_smoother_rejects_channel_mismatch_without_adapters(rng):
    with pytest.raises(ShapeError):
        LevelSmoother([4, 8], [8, 16], rng, adapters=False)
    LevelSmoother([8, 8], [8, 16], rng, adapters=False)


def test_smoother_gradients_reach_every_level(rng):
    sm = LevelSmoother([2, 3, 4], [4, 8, 16], rng, out_channels=3, std=0.3, dtype=np.float64)
    raw = [rng.standard_normal((1, 2, 8, 8)), rng.standard_normal((1, 3, 4, 4)), rng.standard_normal((1, 4, 2, 2))]
    rs = [rng.standard_normal((1, 3, 2, 2)) for _ in range(3)]

    def loss():
        return float(sum(np.sum(o * r) for o, r in zip(sm.forward(raw), rs)))

    loss()
    for p in sm.params().values():
        p.zero_grad()
    draw = sm.backward(rs)
    for x, g in zip(raw, draw):
        assert np.abs(g).sum() > 0
        assert check_gradient(loss, x, g, rng=rng) < 1e-4
    for p in sm.params().values():
        assert check_gradient(loss, p.value, p.grad, n_points=4, rng=rng) < 1e-4
