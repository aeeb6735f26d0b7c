"""Shared builders and oracles for the test suite."""
from __future__ import annotations

import numpy as np

from splatsim.backprop import TRACKING, backward, compute_loss
from splatsim.rasterizer import RasterConfig, render_frame
from splatsim.scene import CameraPose, FrameState, Intrinsics, Scene, quat_exp, quat_mul

SMALL = Intrinsics(30.0, 30.0, 15.5, 15.5, 32, 32)


def random_scene(rng: np.random.Generator, n: int, depth=(3.0, 6.0), spread: float = 1.0) -> Scene:
    means = np.c_[rng.uniform(-spread, spread, (n, 2)), rng.uniform(*depth, n)]
    scales = np.exp(rng.uniform(np.log(0.05), np.log(0.4), (n, 3)))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    return Scene.from_arrays(means, scales, q, rng.uniform(0.3, 0.95, n), rng.uniform(0, 1, (n, 3)))


def random_pose(rng: np.random.Generator, intr: Intrinsics = SMALL) -> CameraPose:
    return CameraPose(quat_exp(rng.normal(size=3) * 0.05), rng.normal(size=3) * 0.1, intr)


def random_frame(rng: np.random.Generator, pose: CameraPose, invalid: float = 0.2) -> FrameState:
    w, h = pose.intrinsics.width, pose.intrinsics.height
    color = rng.uniform(0, 1, (h, w, 3))
    depth = rng.uniform(2, 7, (h, w))
    depth[rng.uniform(size=(h, w)) < invalid] = 0.0
    return FrameState(0, True, (w, h), color, depth, pose)


def composite_reference(pixel, frags, background, alpha_min=1 / 255, alpha_max=0.999, t_term=1e-4, terminate=True):
    """Plain front-to-back compositing loop, written independently of the renderer."""
    T = 1.0
    color = [0.0, 0.0, 0.0]
    depth = 0.0
    for f in frags:
        dx = pixel[0] - f.mean2d[0]
        dy = pixel[1] - f.mean2d[1]
        q = f.inv_cov2d
        power = -0.5 * (q[0][0] * dx * dx + 2 * q[0][1] * dx * dy + q[1][1] * dy * dy)
        a = min(f.opacity * np.exp(power), alpha_max)
        if a <= alpha_min:
            continue
        for c in range(3):
            color[c] += T * a * f.color[c]
        depth += T * a * f.depth
        T *= 1.0 - a
        if terminate and T < t_term:
            break
    color = [color[c] + background[c] * T for c in range(3)]
    return np.array(color), (depth / (1 - T) if 1 - T > 1e-6 else 0.0), T


def relerr(a, b, floor: float = 1e-12) -> float:
    a = np.atleast_1d(np.asarray(a, dtype=np.float64))
    b = np.atleast_1d(np.asarray(b, dtype=np.float64))
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(a), np.linalg.norm(b), floor))


def gradient_check(seed: int, n: int = 30, h: float = 1e-6, lambda_pho: float = 0.7) -> dict:
    """Worst relative error per parameter group against central differences.

    Each group is compared as a vector per Gaussian (3 components for mean,
    scale, color and rotation tangent; 1 for opacity; 6 for the pose).  Also
    returns the worst relative gap between recovered and logged transmittance.

    The loss is only piecewise smooth: a fragment enters or leaves the blend,
    or hits the opacity clamp, at isolated parameter values.  A difference
    step that crosses such a boundary measures the jump rather than the
    derivative, so the step shrinks tenfold until both sides composite the
    same fragments in the same regime.
    """
    rng = np.random.default_rng(seed)
    scene = random_scene(rng, n)
    pose = random_pose(rng)
    cfg = RasterConfig(early_termination=False, background=tuple(rng.uniform(0, 0.5, 3)))
    frame = random_frame(rng, pose)
    res = (SMALL.width, SMALL.height)

    def evaluate(sc, p):
        rec = render_frame(sc, p, res, cfg)
        regime = b"".join(np.ascontiguousarray(a).tobytes() for ch in rec.chunks for a in (ch.rows, ch.incl, ch.unclamped))
        return compute_loss(rec, frame, lambda_pho)[0], regime

    base_regime = evaluate(scene, pose)[1]

    def central(perturb):
        """Central difference of the loss along ``perturb(step) -> (scene, pose)``."""
        step = h
        for _ in range(4):
            (lp, rp), (lm, rm) = evaluate(*perturb(step)), evaluate(*perturb(-step))
            if rp == rm == base_regime:
                break
            step /= 10
        return (lp - lm) / (2 * step)

    rec = render_frame(scene, pose, res, cfg)
    _, lg = compute_loss(rec, frame, lambda_pho)
    gs = backward(rec, lg, scene, TRACKING)
    g3 = gs.gaussian3d
    worst = dict.fromkeys(["mean", "scale", "rotation", "opacity", "color", "pose"], 0.0)
    fields = {"mean": ("means", g3.dL_dmean), "scale": ("scales", g3.dL_dscale), "color": ("colors", g3.dL_dcolor)}
    def shifted(attr, k, i):
        def perturb(step):
            sc = scene.copy()
            getattr(sc, attr)[k, i] += step
            return sc, pose
        return perturb

    def rotated(k, i):
        def perturb(step):
            sc = scene.copy()
            sc.rotations[k] = quat_mul(quat_exp(np.eye(3)[i] * step), scene.rotations[k])
            return sc, pose
        return perturb

    def opacity(k):
        def perturb(step):
            sc = scene.copy()
            sc.opacities[k] += step
            return sc, pose
        return perturb

    for k in range(n):
        for name, (attr, ana) in fields.items():
            num = [central(shifted(attr, k, i)) for i in range(3)]
            worst[name] = max(worst[name], relerr(ana[k], num))
        worst["opacity"] = max(worst["opacity"], relerr(g3.dL_dopacity[k], central(opacity(k))))
        num = [central(rotated(k, i)) for i in range(3)]
        worst["rotation"] = max(worst["rotation"], relerr(g3.dL_drotation[k], num))
    num = [central(lambda step, i=i: (scene, pose.perturbed(np.eye(6)[i] * step))) for i in range(6)]
    worst["pose"] = relerr(gs.pose_level, num)

    t_gap = 0.0
    fragments = 0
    for ch, T_rec in zip(rec.chunks, gs.T_recovered):
        sel = ch.incl
        fragments += int(sel.sum())
        if sel.any():
            t_gap = max(t_gap, float(np.max(np.abs(T_rec[sel] - ch.T[sel]) / ch.T[sel])))
    worst["transmittance"] = t_gap
    worst["fragments"] = fragments
    return worst
