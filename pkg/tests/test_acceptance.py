"""The eleven acceptance criteria, each reported as one PASS/FAIL line.

The SLAM experiments run the 60-frame orbit of the standard scene four times
(about three minutes in total); every other criterion takes seconds.
"""
import time

import numpy as np
import pytest

from helpers import composite_reference, gradient_check, random_pose, random_scene
from splatsim.accel import SimConfig, Simulator, monotone_violations, simulate_gradient_merge, simulate_render_phase, sweep, update_pair_config
from splatsim.accel.sim import PairConfig
from splatsim.accel.trace import clustered_streams, standard_trace, zipf_suite
from splatsim.backprop import TRACKING, backward, compute_loss
from splatsim.projection import Gaussian2D
from splatsim.rasterizer import RasterConfig, render_frame, render_pixel
from splatsim.slam import TrackerConfig, run_sequence, select_resolution
from splatsim.synthetic import gen_sequence_frames


def verdict(log, n, ok, detail):
    line = f"{'PASS' if ok else 'FAIL'} criterion {n}: {detail}"
    log.append(line)
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# gradients and compositing


@pytest.fixture(scope="module")
def gradient_suite():
    t0 = time.perf_counter()
    runs = [gradient_check(seed, n=30) for seed in range(20)]
    return runs, time.perf_counter() - t0


def test_criterion_1_gradient_correctness(gradient_suite, verdicts):
    runs, elapsed = gradient_suite
    worst = {k: max(r[k] for r in runs) for k in ("mean", "scale", "rotation", "opacity", "color", "pose")}
    ok = all(v <= 1e-4 for k, v in worst.items() if k != "rotation") and worst["rotation"] <= 1e-3 and elapsed < 120
    detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
    verdict(verdicts, 1, ok, f"20 scenes, worst rel-err {detail}; {elapsed:.0f} s")


def random_fragments(rng, pixel):
    n = int(rng.integers(0, 40))
    out = []
    for k in range(n):
        A = rng.normal(size=(2, 2))
        cov = A @ A.T + np.eye(2) * rng.uniform(0.2, 4.0)
        mean = pixel + rng.normal(scale=2.0, size=2)
        out.append(Gaussian2D(k, mean, cov, np.linalg.inv(cov), rng.uniform(0.5, 10), rng.uniform(0, 1, 3), rng.uniform(0, 1)))
    out.sort(key=lambda f: (f.depth, f.source_id))
    return out


def test_criterion_2_compositing_oracle(verdicts):
    rng = np.random.default_rng(2024)
    worst = 0.0
    for _ in range(10_000):
        pixel = rng.uniform(0, 16, 2)
        frags = random_fragments(rng, pixel)
        bg = rng.uniform(0, 1, 3)
        color, depth, _ = render_pixel(pixel, frags, bg)
        ref_color, ref_depth, _ = composite_reference(pixel, frags, bg)
        worst = max(worst, float(np.abs(color - ref_color).max()), abs(depth - ref_depth))
    verdict(verdicts, 2, worst <= 1e-6, f"10000 fragment lists, worst channel difference {worst:.1e}")


def test_criterion_3_transmittance_recovery(gradient_suite, verdicts):
    runs, _ = gradient_suite
    worst = max(r["transmittance"] for r in runs)
    frags = sum(r["fragments"] for r in runs)
    verdict(verdicts, 3, worst <= 1e-6, f"{frags} fragments, worst rel-err {worst:.1e}")


# ---------------------------------------------------------------------------
# SLAM experiments on the 60-frame orbit


@pytest.fixture(scope="session")
def orbit_frames(bench_scene):
    return gen_sequence_frames(bench_scene, "orbit", 60)


def timed_run(frames, **kw):
    t0 = time.perf_counter()
    rep = run_sequence(frames, TrackerConfig(**kw))
    return rep, time.perf_counter() - t0


@pytest.fixture(scope="session")
def run_unpruned(orbit_frames):
    return timed_run(orbit_frames, pruning=False)


@pytest.fixture(scope="session")
def run_full_resolution(orbit_frames):
    return timed_run(orbit_frames, pruning=False, downsampling=False)


@pytest.fixture(scope="session")
def run_cap05(orbit_frames):
    return timed_run(orbit_frames, prune_cap=0.5)


@pytest.fixture(scope="session")
def run_cap06(orbit_frames):
    return timed_run(orbit_frames, prune_cap=0.6)


def test_criterion_4_pruning_quality_budget(run_unpruned, run_cap05, verdicts):
    (base, t_base), (pruned, t_pruned) = run_unpruned, run_cap05
    ate_ratio = pruned.ate_rmse / base.ate_rmse
    psnr_ratio = pruned.mean_psnr / base.mean_psnr
    shrink = 1 - pruned.gaussian_counts[-1] / base.gaussian_counts[-1]
    elapsed = t_base + t_pruned
    ok = ate_ratio <= 1.10 and psnr_ratio >= 0.90 and shrink >= 0.40 and elapsed < 600
    verdict(
        verdicts,
        4,
        ok,
        f"ATE {pruned.ate_rmse * 1e3:.1f} vs {base.ate_rmse * 1e3:.1f} mm (x{ate_ratio:.3f}), "
        f"PSNR {pruned.mean_psnr:.2f} vs {base.mean_psnr:.2f} dB (x{psnr_ratio:.3f}), "
        f"gaussians {pruned.gaussian_counts[-1]} vs {base.gaussian_counts[-1]} (-{shrink:.0%}); {elapsed:.0f} s",
    )


def test_criterion_5_pruning_cliff(run_cap05, run_cap06, verdicts):
    (a, _), (b, _) = run_cap05, run_cap06
    ratio = b.ate_rmse / a.ate_rmse
    verdict(verdicts, 5, ratio >= 1.5, f"ATE cap 0.6 {b.ate_rmse * 1e3:.1f} mm vs cap 0.5 {a.ate_rmse * 1e3:.1f} mm (x{ratio:.2f}, need x1.5)")


def test_criterion_6_downsampling(run_unpruned, run_full_resolution, verdicts):
    R0 = (64, 48)
    schedule_ok = (
        select_resolution(8, 8, True, R0, 2.0) == R0
        and select_resolution(9, 8, False, R0, 2.0) == (16, 12)
        and select_resolution(11, 8, False, R0, 2.0) == (32, 24)
        and all(select_resolution(n, 8, False, R0, 2.0) == (32, 24) for n in range(11, 40))
    )
    (ds, _), (full, _) = run_unpruned, run_full_resolution
    ate_ratio = ds.ate_rmse / full.ate_rmse
    psnr_ratio = ds.mean_psnr / full.mean_psnr
    saved = 1 - ds.total_pixels / full.total_pixels
    ok = schedule_ok and ate_ratio <= 1.10 and psnr_ratio >= 0.90 and saved >= 0.55
    verdict(
        verdicts,
        6,
        ok,
        f"schedule {'exact' if schedule_ok else 'WRONG'}, ATE {ds.ate_rmse * 1e3:.1f} vs {full.ate_rmse * 1e3:.1f} mm (x{ate_ratio:.3f}), "
        f"PSNR {ds.mean_psnr:.2f} vs {full.mean_psnr:.2f} dB (x{psnr_ratio:.3f}), rendered pixels -{saved:.1%}",
    )


# ---------------------------------------------------------------------------
# accelerator trends


def render_cycles_with_pairs(frame, streaming, learned):
    """Render-phase cycles over a frame with learned pairs or static adjacent pairs."""
    pairs = PairConfig()
    total = 0
    for it in frame.iterations:
        res, orders = simulate_render_phase(it, frame.layout, pairs, streaming)
        total += res.cycles
        if learned:
            pairs = update_pair_config(orders, pairs)
    return total


def test_criterion_7_workload_scheduling(verdicts):
    reductions = []
    never_worse = True
    for fr in zipf_suite():
        none = Simulator(SimConfig(streaming=False, pairing=False)).run(fr).render_cycles
        both = Simulator(SimConfig(streaming=True, pairing=True)).run(fr).render_cycles
        reductions.append(1 - both / none)
        for streaming in (False, True):
            never_worse &= render_cycles_with_pairs(fr, streaming, True) <= render_cycles_with_pairs(fr, streaming, False)
    ok = min(reductions) >= 0.20 and never_worse
    verdict(
        verdicts,
        7,
        ok,
        f"render-cycle reduction per trace {', '.join(f'{r:.0%}' for r in reductions)}; "
        f"learned pairing {'never' if never_worse else 'sometimes'} worse than adjacent",
    )


def test_criterion_8_reuse_pipeline(verdicts):
    ratios = []
    for fr in zipf_suite():
        per_pixel = sum(it.fragment_total for it in fr.iterations) / len(fr.iterations) / (fr.width * fr.height)
        if per_pixel < 100:
            continue
        on = Simulator(SimConfig(rb_reuse=True)).run(fr).bp_cycles
        off = Simulator(SimConfig(rb_reuse=False)).run(fr).bp_cycles
        ratios.append(on / off)
    ok = bool(ratios) and max(ratios) <= 0.5
    verdict(verdicts, 8, ok, f"{len(ratios)} heavy traces, bp cycles with/without reuse {', '.join(f'{r:.3f}' for r in ratios)}")


def test_criterion_9_gradient_merging(verdicts):
    ratios = []
    identical = True
    for seed in range(5):
        streams = clustered_streams(seed=seed, hot=32 - 4 * seed)
        rng = np.random.default_rng(seed)
        values = [rng.normal(size=len(s)) for s in streams]
        g = simulate_gradient_merge(streams, "gmu", values=values)
        a = simulate_gradient_merge(streams, "atomic", values=values)
        ratios.append(g.cycles / a.cycles)
        identical &= g.merged == a.merged
    ok = max(ratios) <= 0.5 and identical
    verdict(
        verdicts,
        9,
        ok,
        f"merge cycles vs atomic {', '.join(f'{r:.3f}' for r in ratios)}; merged values {'bit-identical' if identical else 'DIFFER'}",
    )


def test_criterion_10_toggle_composition(verdicts):
    rows = sweep(standard_trace())
    bad = monotone_violations(rows)
    totals = {tuple(r.toggles.values()): r.report.total_cycles for r in rows}
    verdict(
        verdicts,
        10,
        len(rows) == 16 and not bad,
        f"16 combinations, {len(bad)} monotonicity violations, all off {totals[(False,) * 4]} -> all on {totals[(True,) * 4]} cycles",
    )


# ---------------------------------------------------------------------------
# determinism


def test_criterion_11_determinism(bench_scene, orbit_frames, monkeypatch, verdicts):
    checks = {}
    rng = np.random.default_rng(11)
    scene = random_scene(rng, 200, spread=1.5)
    pose = random_pose(rng)
    one = render_frame(scene, pose, (32, 32), RasterConfig(workers=1))
    four = render_frame(scene, pose, (32, 32), RasterConfig(workers=4))
    checks["render"] = all(np.array_equal(getattr(one, k), getattr(four, k)) for k in ("rendered_color", "rendered_depth", "T_final", "n_contrib"))
    frame = type("F", (), {"observed_color": one.rendered_color[::-1], "observed_depth": one.rendered_depth[::-1]})
    g1 = backward(one, compute_loss(one, frame, 0.9)[1], scene, TRACKING)
    g4 = backward(four, compute_loss(four, frame, 0.9)[1], scene, TRACKING)
    checks["gradients"] = np.array_equal(g1.pose_level, g4.pose_level) and np.array_equal(g1.gaussian3d.dL_dmean, g4.gaussian3d.dL_dmean)

    cfg = dict(tracking_iters=5, mapping_iters=5, keyframe_interval=4)
    reports = []
    for threads in ("1", "4", "1"):
        monkeypatch.setenv("RTGS_THREADS", threads)
        reports.append(run_sequence(orbit_frames[:9], TrackerConfig(**cfg)).to_dict())
    checks["slam"] = reports[0] == reports[1] == reports[2]

    checks["simulator"] = Simulator().run(standard_trace()).to_json() == Simulator().run(standard_trace()).to_json()
    first, again = (gen_sequence_frames(bench_scene, "orbit", 3, noise=0.01, seed=5) for _ in range(2))
    checks["frames"] = all(np.array_equal(a.color, b.color) and np.array_equal(a.depth, b.depth) for a, b in zip(first, again))
    failed = [k for k, v in checks.items() if not v]
    verdict(verdicts, 11, not failed, f"bit-identical {', '.join(checks)}" + (f"; differ: {', '.join(failed)}" if failed else ""))
