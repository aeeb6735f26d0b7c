from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from helpers import SMALL, gradient_check, random_frame, random_pose, random_scene, relerr
from splatsim.backprop import (
    G_WIDTH,
    MAPPING,
    TRACKING,
    LossGradients,
    PixelRecords,
    aggregate_gradients,
    backward,
    backward_pixel,
    compute_loss,
    dump_gradients,
    merge_tree_sum,
    preprocess_backward,
    read_gradient_dump,
    render_backward,
)
from splatsim.projection import Gaussian2D
from splatsim.rasterizer import RasterConfig, render_frame, render_pixel
from splatsim.scene import FrameState

RES = (SMALL.width, SMALL.height)


def fake_record(color, depth):
    return SimpleNamespace(rendered_color=color, rendered_depth=depth)


def fake_frame(color, depth):
    h, w = depth.shape
    return SimpleNamespace(observed_color=color, observed_depth=depth)


def test_loss_zero_on_perfect_fit():
    rng = np.random.default_rng(0)
    c, d = rng.uniform(size=(4, 5, 3)), rng.uniform(1, 2, (4, 5))
    loss, g = compute_loss(fake_record(c, d), fake_frame(c, d), 0.9)
    assert loss == 0.0
    assert not g.dL_dcolor.any() and not g.dL_ddepth.any()


def test_loss_photometric_only_ignores_depth():
    rng = np.random.default_rng(1)
    c, o = rng.uniform(size=(4, 5, 3)), rng.uniform(size=(4, 5, 3))
    a = compute_loss(fake_record(c, rng.uniform(1, 2, (4, 5))), fake_frame(o, rng.uniform(1, 2, (4, 5))), 1.0)
    b = compute_loss(fake_record(c, rng.uniform(1, 2, (4, 5))), fake_frame(o, rng.uniform(1, 2, (4, 5))), 1.0)
    assert a[0] == b[0]
    assert not a[1].dL_ddepth.any()


def test_loss_without_valid_depth_has_no_geometric_term():
    rng = np.random.default_rng(2)
    c, o = rng.uniform(size=(3, 3, 3)), rng.uniform(size=(3, 3, 3))
    loss, g = compute_loss(fake_record(c, np.ones((3, 3))), fake_frame(o, np.zeros((3, 3))), 0.4)
    assert loss == pytest.approx(0.4 * np.abs(c - o).sum() / 9)
    assert not g.dL_ddepth.any()


@given(st.integers(0, 2**32 - 1), st.sampled_from([0.0, 0.1, 0.5, 0.9, 1.0]))
@settings(max_examples=30)
def test_loss_gradient_matches_finite_differences(seed, lam):
    rng = np.random.default_rng(seed)
    # residuals stay clear of the kinks so a wide step is exact for this piecewise-linear loss
    c = rng.uniform(size=(3, 4, 3))
    o = c + rng.choice([-1, 1], c.shape) * rng.uniform(0.01, 0.5, c.shape)
    d = rng.uniform(1, 3, (3, 4))
    od = d + rng.choice([-1, 1], d.shape) * rng.uniform(0.01, 0.5, d.shape)
    od[0, 0] = 0.0
    _, g = compute_loss(fake_record(c, d), fake_frame(o, od), lam)
    h = 1e-3
    num_c = np.zeros_like(c)
    for idx in np.ndindex(c.shape):
        cp, cm = c.copy(), c.copy()
        cp[idx] += h
        cm[idx] -= h
        num_c[idx] = (compute_loss(fake_record(cp, d), fake_frame(o, od), lam)[0] - compute_loss(fake_record(cm, d), fake_frame(o, od), lam)[0]) / (2 * h)
    num_d = np.zeros_like(d)
    for idx in np.ndindex(d.shape):
        dp, dm = d.copy(), d.copy()
        dp[idx] += h
        dm[idx] -= h
        num_d[idx] = (compute_loss(fake_record(c, dp), fake_frame(o, od), lam)[0] - compute_loss(fake_record(c, dm), fake_frame(o, od), lam)[0]) / (2 * h)
    assert relerr(g.dL_dcolor, num_c) <= 1e-5
    assert relerr(g.dL_ddepth, num_d) <= 1e-5


def test_loss_rejects_mismatched_buffers():
    with pytest.raises(ValueError):
        compute_loss(fake_record(np.zeros((2, 2, 3)), np.zeros((2, 2))), fake_frame(np.zeros((4, 4, 3)), np.zeros((4, 4))), 0.5)


# ---------------------------------------------------------------------------
# per-pixel backward


def splat(mean, cov, opacity, color, depth, gid):
    cov = np.asarray(cov, dtype=float)
    return Gaussian2D(gid, np.asarray(mean, float), cov, np.linalg.inv(cov), depth, np.asarray(color, float), opacity)


def test_zero_loss_gradients_give_zero_fragment_gradients():
    g = splat([1, 1], np.eye(2) * 3, 0.7, [0.2, 0.3, 0.4], 2.0, 5)
    _, _, log = render_pixel([1.5, 0.5], [g])
    out = backward_pixel(log, 1 - log[0][1], np.zeros(3), 0.0, {5: g}, [1.5, 0.5])
    r = out[5]
    assert r.dL_dalpha == 0 and not r.dL_dmean2d.any() and not r.dL_dcov2d.any() and r.dL_dopacity == 0


def test_single_fragment_alpha_gradient_is_color():
    C = np.array([0.9, 0.1, 0.5])
    g = splat([0, 0], np.eye(2), 0.6, C, 3.0, 1)
    _, _, log = render_pixel([0.3, -0.2], [g])
    dLdC = np.array([0.5, -1.0, 2.0])
    out = backward_pixel(log, 1 - log[0][1], dLdC, 0.0, {1: g}, [0.3, -0.2])
    assert out[1].dL_dalpha == pytest.approx(C @ dLdC, rel=1e-14)
    np.testing.assert_allclose(out[1].dL_dcolor, log[0][1] * dLdC)


def _pixel_loss(frags, pixel, dLdC, dLdD, bg):
    color, depth, _ = render_pixel(pixel, frags, bg, RasterConfig(early_termination=False))
    return float(color @ dLdC + depth * dLdD)


@pytest.mark.parametrize("seed", range(10))
def test_twenty_fragment_pixel_matches_finite_differences(seed):
    rng = np.random.default_rng(seed)
    pixel = np.array([2.0, 3.0])
    frags = []
    for k in range(20):
        A = rng.normal(size=(2, 2))
        cov = A @ A.T + np.eye(2) * 2.0
        frags.append(splat(pixel + rng.normal(scale=1.0, size=2), cov, rng.uniform(0.05, 0.5), rng.uniform(size=3), 1 + k * 0.2, k))
    bg = rng.uniform(size=3)
    dLdC, dLdD = rng.normal(size=3), rng.normal()
    _, _, log = render_pixel(pixel, frags, bg, RasterConfig(early_termination=False))
    assert len(log) == 20
    T_final = log[-1][2] * (1 - log[-1][1])
    out = backward_pixel(log, T_final, dLdC, dLdD, {f.source_id: f for f in frags}, pixel, bg)
    h = 1e-5

    def fd(k, mutate):
        plus = [splat(f.mean2d, f.cov2d, f.opacity, f.color, f.depth, f.source_id) for f in frags]
        minus = [splat(f.mean2d, f.cov2d, f.opacity, f.color, f.depth, f.source_id) for f in frags]
        mutate(plus[k], h)
        mutate(minus[k], -h)
        for f in (plus[k], minus[k]):
            f.inv_cov2d = np.linalg.inv(f.cov2d)
        return (_pixel_loss(plus, pixel, dLdC, dLdD, bg) - _pixel_loss(minus, pixel, dLdC, dLdD, bg)) / (2 * h)

    def bump(attr, idx):
        def m(f, e):
            v = np.array(getattr(f, attr), dtype=float)
            v[idx] += e
            setattr(f, attr, v if v.ndim else float(v))

        return m

    def bump_cov(i, j):
        def m(f, e):
            f.cov2d = f.cov2d.copy()
            f.cov2d[i, j] += e
            if i != j:
                f.cov2d[j, i] += e

        return m

    for k in range(20):
        r = out[k]
        num_mean = [fd(k, bump("mean2d", i)) for i in range(2)]
        num_col = [fd(k, bump("color", i)) for i in range(3)]
        num_cov = [fd(k, bump_cov(0, 0)), fd(k, bump_cov(0, 1)), fd(k, bump_cov(1, 1))]
        ana_cov = [r.dL_dcov2d[0, 0], 2 * r.dL_dcov2d[0, 1], r.dL_dcov2d[1, 1]]
        assert relerr(r.dL_dmean2d, num_mean) <= 1e-4
        assert relerr(r.dL_dcolor, num_col) <= 1e-4
        assert relerr(ana_cov, num_cov) <= 1e-4
        assert relerr(r.dL_dopacity, fd(k, bump("opacity", ()))) <= 1e-4
        assert relerr(r.dL_ddepth, fd(k, bump("depth", ()))) <= 1e-4


@pytest.fixture(scope="module")
def small_case():
    rng = np.random.default_rng(21)
    scene = random_scene(rng, 25)
    pose = random_pose(rng)
    frame = random_frame(rng, pose)
    cfg = RasterConfig(background=(0.1, 0.3, 0.2))
    rec = render_frame(scene, pose, RES, cfg)
    loss, lg = compute_loss(rec, frame, 0.8)
    return scene, pose, frame, rec, lg


def test_frame_backward_matches_pixel_backward(small_case):
    scene, pose, frame, rec, lg = small_case
    gs = render_backward(rec, lg, keep_pixel_level=True)
    proj = rec.proj
    g2ds = {int(proj.ids[r]): proj.gaussian2d(r) for r in range(len(proj)) if proj.valid[r]}
    px = gs.pixel_level
    checked = 0
    for i in range(0, 32, 3):
        for j in range(0, 32, 3):
            log = rec.pixel_log(i, j)
            out = backward_pixel(log, rec.T_final[i, j], lg.dL_dcolor[i, j], lg.dL_ddepth[i, j], g2ds, [j, i], rec.cfg.background)
            for gid, r in out.items():
                v = px[(gid, i, j)]
                np.testing.assert_allclose(v.dL_dmean2d, r.dL_dmean2d, rtol=1e-9, atol=1e-15)
                np.testing.assert_allclose(v.dL_dcov2d, r.dL_dcov2d, rtol=1e-9, atol=1e-15)
                assert v.dL_dalpha == pytest.approx(r.dL_dalpha, rel=1e-9, abs=1e-15)
                checked += 1
    assert checked > 100


def test_aggregation_levels_are_consistent(small_case):
    scene, pose, frame, rec, lg = small_case
    gs = render_backward(rec, lg, keep_pixel_level=True)
    P = gs.pixel
    layout = rec.layout
    tiles = {}
    for r in range(len(P)):
        key = (int(P.gaussian_id[r]), int(P.tile[r]))
        tiles[key] = tiles.get(key, 0) + P.values[r]
        assert P.tile[r] == layout.tile_of(P.pix_i[r], P.pix_j[r])
    got = {(int(gs.ids[g]), int(t)): v for g, t, v in zip(gs.tile_rows, gs.tile_ids, gs.tile_values)}
    assert got.keys() == tiles.keys()
    for k in tiles:
        np.testing.assert_allclose(got[k], tiles[k], rtol=1e-12, atol=1e-18)
    g2 = np.zeros_like(gs.gaussian2d)
    for (gid, _), v in got.items():
        g2[np.flatnonzero(gs.ids == gid)[0]] += v
    np.testing.assert_allclose(gs.gaussian2d, g2, rtol=1e-12, atol=1e-18)


def records(rows, tiles, values, pix=None):
    n = len(rows)
    pix = np.arange(n) if pix is None else pix
    rows = np.asarray(rows, dtype=np.int64)
    return PixelRecords(rows, rows, np.asarray(pix), np.zeros(n, np.int64), np.asarray(tiles, dtype=np.int64), np.asarray(values, dtype=float))


def test_aggregate_single_record():
    v = np.arange(G_WIDTH, dtype=float)
    gs = aggregate_gradients(records([0], [3], [v]), 1)
    np.testing.assert_array_equal(gs.tile_values[0], v)
    np.testing.assert_array_equal(gs.gaussian2d[0], v)


def test_aggregate_two_tiles_same_gaussian():
    a, b = np.ones(G_WIDTH), np.full(G_WIDTH, 2.0)
    gs = aggregate_gradients(records([0, 0], [1, 4], [a, b]), 1)
    assert gs.tile_ids.tolist() == [1, 4]
    np.testing.assert_array_equal(gs.gaussian2d[0], a + b)


@given(st.integers(0, 2**32 - 1), st.integers(1, 300), st.integers(1, 8))
def test_aggregate_matches_serial_sum_and_ignores_partitioning(seed, n, parts):
    rng = np.random.default_rng(seed)
    rows = rng.integers(0, 10, n)
    tiles = rng.integers(0, 6, n)
    vals = rng.normal(size=(n, G_WIDTH))
    pix = rng.permutation(n)
    gs = aggregate_gradients(records(rows, tiles, vals, pix), 10)
    serial = np.zeros((10, G_WIDTH))
    for r, v in zip(rows, vals):
        serial[r] += v
    np.testing.assert_allclose(gs.gaussian2d, serial, atol=1e-12)
    # the same records arriving in a different split and order give identical sums
    perm = np.concatenate(np.array_split(rng.permutation(n), parts)[::-1])
    again = aggregate_gradients(records(rows[perm], tiles[perm], vals[perm], pix[perm]), 10)
    assert np.array_equal(again.gaussian2d, gs.gaussian2d)


def test_merge_tree_sum():
    v = np.arange(13 * 6, dtype=float).reshape(13, 6)
    np.testing.assert_allclose(merge_tree_sum(v), v.sum(axis=0))
    assert not merge_tree_sum(np.zeros((0, 6))).any()


def test_zero_two_d_gradients_give_zero_three_d(small_case):
    scene, pose, frame, rec, lg = small_case
    zero = LossGradients(np.zeros_like(lg.dL_dcolor), np.zeros_like(lg.dL_ddepth))
    gs = backward(rec, zero, scene, TRACKING)
    g = gs.gaussian3d
    for arr in (g.dL_dmean, g.dL_dscale, g.dL_drotation, g.dL_dopacity, g.dL_dcolor, gs.pose_level):
        assert not np.any(arr)


def test_mapping_mode_skips_pose(small_case):
    scene, pose, frame, rec, lg = small_case
    assert backward(rec, lg, scene, MAPPING).pose_level is None
    with pytest.raises(ValueError):
        preprocess_backward(render_backward(rec, lg), scene, rec, "sideways")


@pytest.mark.parametrize("seed", [100, 101])
def test_gradients_match_finite_differences(seed):
    worst = gradient_check(seed, n=12)
    for name in ("mean", "scale", "opacity", "color", "pose"):
        assert worst[name] <= 1e-4, (name, worst[name])
    assert worst["rotation"] <= 1e-3
    assert worst["transmittance"] <= 1e-6


def test_early_termination_changes_gradients_little():
    rng = np.random.default_rng(8)
    # a dense opaque stack so that most pixels terminate early
    scene = random_scene(rng, 30, spread=0.3)
    scene.scales[:] *= 2.0
    scene.opacities[:] = 0.99
    pose = random_pose(rng)
    frame = random_frame(rng, pose)
    out = {}
    for term in (True, False):
        rec = render_frame(scene, pose, RES, RasterConfig(early_termination=term))
        _, lg = compute_loss(rec, frame, 0.8)
        out[term] = backward(rec, lg, scene, TRACKING), rec
    (a, rec_on), (b, rec_off) = out[True], out[False]
    # every dropped fragment sits behind transmittance below 1e-4, and the per-pixel
    # loss gradient is at most 1/N, so a color gradient moves by at most ~1e-4
    assert rec_on.n_contrib.sum() < rec_off.n_contrib.sum()
    assert a.gaussian3d.dL_dcolor.shape == b.gaussian3d.dL_dcolor.shape
    assert np.abs(a.gaussian3d.dL_dcolor - b.gaussian3d.dL_dcolor).max() <= 1e-4
    pairs = [(a.pose_level, b.pose_level)]
    pairs += [(getattr(a.gaussian3d, k), getattr(b.gaussian3d, k)) for k in ("dL_dmean", "dL_dscale", "dL_dopacity")]
    for x, y in pairs:
        assert np.abs(x - y).max() <= 100 * 1e-4 * np.abs(y).max()


def test_gradient_dump_roundtrip(small_case, tmp_path):
    scene, pose, frame, rec, lg = small_case
    gs = backward(rec, lg, scene, TRACKING)
    path = tmp_path / "grads.txt"
    dump_gradients(path, gs)
    back = read_gradient_dump(path)
    np.testing.assert_array_equal(back[(-1, "pose")], gs.pose_level)
    r = 3
    gid = int(gs.ids[r])
    np.testing.assert_array_equal(back[(gid, "g2d")], gs.gaussian2d[r])
    np.testing.assert_array_equal(back[(gid, "g3d")][:3], gs.gaussian3d.dL_dmean[r])
