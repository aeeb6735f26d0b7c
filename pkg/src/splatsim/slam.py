"""Tracking/mapping loop with adaptive Gaussian pruning and dynamic downsampling."""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from .backprop import MAPPING, TRACKING, GradientSet, backward, compute_loss
from .projection import TileBinning, bin_tiles, intersection_change_ratio, project_scene
from .rasterizer import RasterConfig, RenderRecord, render_frame
from .scene import CameraPose, FrameState, Intrinsics, Scene, TileLayout, downsample_frame, quat_exp, quat_mul, rotmat_to_quat, so3_exp

log = logging.getLogger(__name__)

K_MAX = 64
CHANGE_RATIO_THRESHOLD = 0.05


@dataclass
class TrackerConfig:
    tracking_iters: int = 50
    mapping_iters: int = 50
    lr_pose_rot: float = 0.003
    lr_pose_trans: float = 0.003
    lr_decay: float = 0.95
    pivot_rotation: bool = True
    lr_mean: float = 0.5
    lr_scale: float = 20.0
    lr_rotation: float = 5.0
    lr_opacity: float = 100.0
    lr_color: float = 50.0
    lambda_pho: float = 0.9
    keyframe_interval: int = 8
    map_window: int = 0
    R0: tuple[int, int] = (64, 48)
    m: float = 2.0
    K0: int = 5
    lam: float = 0.8
    prune_cap: float = 0.5
    prune_floor: int = 64
    pruning: bool = True
    downsampling: bool = True
    insertion: bool = True
    insert_stride: int = 4
    insert_error: float = 0.3
    insert_coverage: float = 0.5
    bootstrap_stride: int = 2
    new_opacity: float = 0.7
    divergence_patience: int = 5
    t_term: float = 1e-4
    early_termination: bool = True
    near: float = 0.01
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if self.m <= 1:
            raise ValueError("downsampling scaling factor m must exceed 1")
        if not 0.0 <= self.prune_cap <= 1.0:
            raise ValueError("prune_cap must lie in [0, 1]")
        if self.K0 < 1:
            raise ValueError("K0 must be at least 1")
        self.R0 = tuple(int(v) for v in self.R0)

    def raster(self) -> RasterConfig:
        return RasterConfig(
            t_term=self.t_term,
            early_termination=self.early_termination,
            background=tuple(self.background),
            near=self.near,
        )

    def to_dict(self) -> dict:
        d = asdict(self)
        d["R0"] = list(self.R0)
        d["background"] = list(self.background)
        return d


# ---------------------------------------------------------------------------
# adaptive pruning


def importance_score(dL_dmean, dL_dscale, dL_drotation, lam: float) -> np.ndarray:
    """``|dL/dmean| + lam * |dL/dcov|`` with the covariance block as scale+rotation gradients."""
    dm = np.atleast_2d(dL_dmean)
    cov = np.concatenate([np.atleast_2d(dL_dscale), np.atleast_2d(dL_drotation)], axis=1)
    return np.linalg.norm(dm, axis=1) + lam * np.linalg.norm(cov, axis=1)


@dataclass
class PruneEvent:
    iteration: int
    kind: str  # "mask", "remove", "floor", "interval"
    count: int = 0
    ratio: float = 0.0
    K: int = 0


@dataclass
class PruneState:
    """Mask-then-remove pruning with an adaptive window length ``K``.

    ``prune_fraction_cap`` bounds both the share of unmasked Gaussians masked in
    one window and the overall share of created Gaussians ever removed.
    """

    K0: int = 5
    lam: float = 0.8
    prune_fraction_cap: float = 0.5
    floor: int = 64
    K: int = 0
    iter_in_window: int = 0
    total_iters: int = 0
    mask_interval: int = 0
    removed_total: int = 0
    scores: dict[int, float] = field(default_factory=dict)
    window_start: TileBinning | None = None
    events: list[PruneEvent] = field(default_factory=list)

    def __post_init__(self):
        if self.K < 1:
            self.K = self.K0
        if self.mask_interval < 1:
            self.mask_interval = self.K

    def begin_frame(self) -> None:
        self.K = self.K0
        self.iter_in_window = 0
        self.scores = {}
        self.window_start = None

    def needs_binning(self) -> bool:
        return self.iter_in_window == 0 or self.iter_in_window + 1 >= self.K


def next_interval(K: int, ratio: float) -> int:
    return max(1, K // 2) if ratio > CHANGE_RATIO_THRESHOLD else min(K_MAX, 2 * K)


def _mask_budget(state: PruneState, scene: Scene) -> tuple[int, bool]:
    unmasked = int((~scene.masked).sum())
    pending = int(scene.masked.sum())
    per_window = int(math.floor(state.prune_fraction_cap * unmasked))
    overall = int(math.floor(state.prune_fraction_cap * scene.next_id)) - state.removed_total - pending
    wanted = max(0, min(per_window, overall))
    room = max(0, unmasked - state.floor)
    return min(wanted, room), wanted > room


def prune_step(state: PruneState, scene: Scene, gs: GradientSet, binning: TileBinning | None) -> Scene:
    """One pruning iteration; ``gs`` rows align with ``scene`` rows.

    ``binning`` must include masked Gaussians; it is only read when
    :meth:`PruneState.needs_binning` is true.
    """
    state.total_iters += 1
    g3 = gs.gaussian3d
    s = importance_score(g3.dL_dmean, g3.dL_dscale, g3.dL_drotation, state.lam)
    for gid, v, m in zip(scene.ids.tolist(), s.tolist(), scene.masked.tolist()):
        if not m:
            state.scores[gid] = state.scores.get(gid, 0.0) + v
    scene.mask_age[scene.masked] += 1

    expired = scene.masked & (scene.mask_age >= state.mask_interval)
    if expired.any():
        n = int(expired.sum())
        if len(scene) - n < state.floor:
            scene.masked[expired] = False
            scene.mask_age[expired] = 0
            state.events.append(PruneEvent(state.total_iters, "floor", n))
        else:
            scene = scene.subset(~expired)
            state.removed_total += n
            state.events.append(PruneEvent(state.total_iters, "remove", n))

    if state.window_start is None:
        state.window_start = binning
    state.iter_in_window += 1
    if state.iter_in_window < state.K:
        return scene

    ratio = intersection_change_ratio(state.window_start, binning) if state.window_start is not None and binning is not None else 0.0
    n_mask, hit_floor = _mask_budget(state, scene)
    if hit_floor:
        state.events.append(PruneEvent(state.total_iters, "floor", 0))
    if n_mask:
        cand = np.flatnonzero(~scene.masked)
        sc = np.array([state.scores.get(int(g), 0.0) for g in scene.ids[cand]])
        order = np.lexsort((scene.ids[cand], sc))
        chosen = cand[order[:n_mask]]
        scene.masked[chosen] = True
        scene.mask_age[chosen] = 0
        state.events.append(PruneEvent(state.total_iters, "mask", n_mask))
    state.mask_interval = state.K
    state.K = next_interval(state.K, ratio)
    state.events.append(PruneEvent(state.total_iters, "interval", 0, ratio, state.K))
    state.iter_in_window = 0
    state.scores = {}
    state.window_start = None
    return scene


def finalize_masks(state: PruneState, scene: Scene) -> Scene:
    """Remove every masked Gaussian now (used before mapping a keyframe)."""
    n = int(scene.masked.sum())
    if not n:
        return scene
    if len(scene) - n < state.floor:
        scene.masked[:] = False
        scene.mask_age[:] = 0
        state.events.append(PruneEvent(state.total_iters, "floor", n))
        return scene
    state.removed_total += n
    state.events.append(PruneEvent(state.total_iters, "remove", n))
    return scene.subset(~scene.masked)


# ---------------------------------------------------------------------------
# dynamic downsampling


def axis_divisor(n: int, k_last: int, is_keyframe: bool, m: float) -> int:
    if is_keyframe:
        return 1
    if n <= k_last:
        raise ValueError(f"non-keyframe {n} must follow its keyframe {k_last}")
    area = min(m ** (n - k_last - 1) / 16.0, 0.25)
    exponent = -0.5 * math.log2(area)  # per-axis log2 divisor
    # nearest power of two; exact ties go to the finer resolution
    return 2 ** max(1, math.ceil(exponent - 0.5 - 1e-9))


def select_resolution(n: int, k_last: int, is_keyframe: bool, R0: tuple[int, int], m: float) -> tuple[int, int]:
    d = axis_divisor(n, k_last, is_keyframe, m)
    w, h = R0
    if w % d or h % d:
        raise ValueError(f"native resolution {R0} is not divisible by {d}")
    return w // d, h // d


# ---------------------------------------------------------------------------
# tracking and mapping


@dataclass
class TrackResult:
    pose: CameraPose
    scene: Scene
    losses: list[float]
    prune_events: list[PruneEvent]
    fragments: int
    pixels: int
    step_halvings: int = 0


def _frame_at(frame: FrameState, pose: CameraPose) -> FrameState:
    return replace(frame, pose=pose)


def track_frame(
    frame: FrameState,
    scene: Scene,
    cfg: TrackerConfig,
    prune: PruneState | None = None,
    init_pose: CameraPose | None = None,
    recorder=None,
) -> TrackResult:
    """Optimize the camera pose of ``frame`` against a frozen map.

    With ``prune`` set, low-importance Gaussians are masked and removed while
    tracking; the (possibly smaller) scene is returned.  ``recorder`` is called
    as ``recorder(frame_index, is_keyframe, "tracking", record)`` every iteration.
    """
    if len(scene) == 0:
        raise ValueError("cannot track against an empty scene")
    rcfg = cfg.raster()
    pose = init_pose if init_pose is not None else frame.pose
    res = frame.resolution
    lr = np.array([cfg.lr_pose_rot] * 3 + [cfg.lr_pose_trans] * 3)
    losses: list[float] = []
    fragments = pixels = 0
    rising = 0
    halvings = 0
    n_events = len(prune.events) if prune is not None else 0
    if prune is not None:
        prune.begin_frame()
    for _ in range(cfg.tracking_iters):
        rec = render_frame(scene, pose, res, rcfg)
        loss, lg = compute_loss(rec, frame, cfg.lambda_pho)
        fragments += rec.fragment_count()
        pixels += res[0] * res[1]
        if losses and loss > losses[-1]:
            rising += 1
            if rising >= cfg.divergence_patience:
                lr *= 0.5
                halvings += 1
                rising = 0
                log.info("frame %d: loss rose %d times, pose step halved", frame.frame_index, cfg.divergence_patience)
        else:
            rising = 0
        losses.append(loss)
        gs = backward(rec, lg, scene, TRACKING)
        if recorder is not None:
            recorder(frame.frame_index, frame.is_keyframe, TRACKING, rec)
        pose = pose_step(pose, gs.pose_level, lr, rec if cfg.pivot_rotation else None)
        lr *= cfg.lr_decay
        if prune is not None:
            binning = None
            if prune.needs_binning():
                binning = bin_tiles(project_scene(scene, pose, res, cfg.near, include_masked=True), TileLayout(*res))
            scene = prune_step(prune, scene, gs, binning)
    events = prune.events[n_events:] if prune is not None else []
    return TrackResult(pose, scene, losses, events, fragments, pixels, halvings)


def pose_step(pose: CameraPose, grad: np.ndarray, lr: np.ndarray, rec: RenderRecord | None = None) -> CameraPose:
    """One descent step on the pose tangent ``(rot, trans)``.

    With ``rec`` given, rotation is taken about a pivot on the optical axis at
    the median depth of the visible Gaussians instead of the camera centre.
    This is the same SE(3) update in other coordinates; it decouples rotation
    from translation, which otherwise trade off almost freely for distant scenes.
    """
    g_rot, g_trans = grad[:3], grad[3:]
    if rec is None or not rec.proj.valid.any():
        return pose.perturbed(-lr * grad)
    c = np.array([0.0, 0.0, float(np.median(rec.proj.depth[rec.proj.valid]))])
    # p' = Exp(w) (p - c) + c + v  <=>  left perturbation (w, v + c - Exp(w) c)
    dw = -lr[:3] * (g_rot + np.cross(g_trans, c))
    dv = -lr[3:] * g_trans
    return pose.perturbed(np.concatenate([dw, dv + c - so3_exp(dw) @ c]))


def back_project(pixels_ij: np.ndarray, depth: np.ndarray, pose: CameraPose, intr: Intrinsics) -> np.ndarray:
    """World points of pixels ``(i, j)`` with the given depths, for intrinsics ``intr``."""
    i = pixels_ij[:, 0].astype(np.float64)
    j = pixels_ij[:, 1].astype(np.float64)
    xc = (j - intr.cx) / intr.fx * depth
    yc = (i - intr.cy) / intr.fy * depth
    pc = np.stack([xc, yc, depth], axis=1)
    return (pc - pose.translation) @ pose.R


def seed_gaussians(scene: Scene, color: np.ndarray, depth: np.ndarray, pose: CameraPose, pixels_ij: np.ndarray, stride: int, opacity: float) -> np.ndarray:
    """Append one isotropic Gaussian per seed pixel; returns their ids."""
    if len(pixels_ij) == 0:
        return np.zeros(0, np.int64)
    h, w = depth.shape
    intr = pose.intrinsics.scaled(w, h)
    d = depth[pixels_ij[:, 0], pixels_ij[:, 1]]
    means = back_project(pixels_ij, d, pose, intr)
    s = 0.5 * stride * d / intr.fx
    scales = np.repeat(s[:, None], 3, axis=1)
    rot = np.tile([1.0, 0.0, 0.0, 0.0], (len(d), 1))
    col = np.clip(color[pixels_ij[:, 0], pixels_ij[:, 1]], 0.0, 1.0)
    return scene.append(means, scales, rot, np.full(len(d), opacity), col)


def _grid(h: int, w: int, stride: int) -> np.ndarray:
    ii, jj = np.meshgrid(np.arange(stride // 2, h, stride), np.arange(stride // 2, w, stride), indexing="ij")
    return np.stack([ii.ravel(), jj.ravel()], axis=1)


def bootstrap_scene(frame: FrameState, cfg: TrackerConfig) -> Scene:
    scene = Scene.empty()
    grid = _grid(frame.height, frame.width, cfg.bootstrap_stride)
    ok = frame.observed_depth[grid[:, 0], grid[:, 1]] > 0
    seed_gaussians(scene, frame.observed_color, frame.observed_depth, frame.pose, grid[ok], cfg.bootstrap_stride, cfg.new_opacity)
    return scene


def insertion_seeds(rec: RenderRecord, frame: FrameState, cfg: TrackerConfig) -> np.ndarray:
    grid = _grid(frame.height, frame.width, cfg.insert_stride)
    i, j = grid[:, 0], grid[:, 1]
    valid = frame.observed_depth[i, j] > 0
    err = np.abs(rec.rendered_color[i, j] - frame.observed_color[i, j]).sum(axis=1)
    uncovered = (1.0 - rec.T_final[i, j]) < cfg.insert_coverage
    return grid[valid & uncovered & (err > cfg.insert_error)]


def _logit(p):
    return np.log(p) - np.log1p(-p)


@dataclass
class MapResult:
    scene: Scene
    losses: list[float]
    inserted: int
    fragments: int
    pixels: int
    rejected: int = 0


def map_keyframe(frame: FrameState, scene: Scene, cfg: TrackerConfig, window: list[FrameState] | None = None, recorder=None) -> MapResult:
    """Optimize Gaussian parameters on a keyframe with poses held fixed.

    Iterations cycle over ``frame`` and the earlier keyframes in ``window``, so
    the map stays consistent with more than one view.  A step that raises the
    loss of the frame it is evaluated on is undone and the learning rates are
    halved.  New Gaussians are seeded from ``frame`` only.
    """
    if not frame.is_keyframe:
        raise ValueError("mapping runs on keyframes only")
    views = [frame] + list(window or [])
    rcfg = cfg.raster()
    scene = scene.copy()
    inserted = 0
    if cfg.insertion:
        rec = render_frame(scene, frame.pose, frame.resolution, rcfg)
        seeds = insertion_seeds(rec, frame, cfg)
        inserted = len(seed_gaussians(scene, frame.observed_color, frame.observed_depth, frame.pose, seeds, cfg.insert_stride, cfg.new_opacity))
    scale = 1.0
    losses: list[float] = []
    fragments = pixels = 0
    rejected = 0
    prev: Scene | None = None
    last_loss = [math.inf] * len(views)
    for it in range(cfg.mapping_iters):
        v = it % len(views)
        view = views[v]
        rec = render_frame(scene, view.pose, view.resolution, rcfg)
        loss, lg = compute_loss(rec, view, cfg.lambda_pho)
        fragments += rec.fragment_count()
        pixels += view.width * view.height
        if loss > last_loss[v] and prev is not None:
            scene = prev
            scale *= 0.5
            rejected += 1
            rec = render_frame(scene, view.pose, view.resolution, rcfg)
            loss, lg = compute_loss(rec, view, cfg.lambda_pho)
        losses.append(loss)
        last_loss[v] = loss
        if loss == 0.0 and len(views) == 1:
            break
        gs = backward(rec, lg, scene, MAPPING)
        if recorder is not None:
            recorder(frame.frame_index, True, MAPPING, rec)
        prev = scene
        scene = apply_map_step(scene, gs, cfg, scale)
    return MapResult(scene, losses, inserted, fragments, pixels, rejected)


def apply_map_step(scene: Scene, gs: GradientSet, cfg: TrackerConfig, scale: float = 1.0) -> Scene:
    g = gs.gaussian3d
    out = scene.copy()
    out.means = scene.means - scale * cfg.lr_mean * g.dL_dmean
    out.scales = scene.scales * np.exp(-scale * cfg.lr_scale * scene.scales * g.dL_dscale)
    dq = quat_exp(-scale * cfg.lr_rotation * g.dL_drotation)
    q = quat_mul(dq, scene.rotations)
    out.rotations = q / np.linalg.norm(q, axis=1, keepdims=True)
    o = np.clip(scene.opacities, 1e-4, 1 - 1e-4)
    u = _logit(o) - scale * cfg.lr_opacity * o * (1 - o) * g.dL_dopacity
    out.opacities = np.clip(1.0 / (1.0 + np.exp(-u)), 1e-4, 1 - 1e-4)
    out.colors = np.clip(scene.colors - scale * cfg.lr_color * g.dL_dcolor, 0.0, 1.0)
    return out


# ---------------------------------------------------------------------------
# sequences


@dataclass
class SequenceFrame:
    color: np.ndarray
    depth: np.ndarray
    gt_pose: CameraPose


def align_trajectory(est: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """Rigidly align ``est`` (N, 3) to ``gt`` (least squares, no scale)."""
    if len(est) < 2:
        return gt.copy() if len(est) else est
    mu_e, mu_g = est.mean(axis=0), gt.mean(axis=0)
    H = (est - mu_e).T @ (gt - mu_g)
    U, _, Vt = np.linalg.svd(H)
    D = np.eye(3)
    D[2, 2] = np.sign(np.linalg.det(Vt.T @ U.T))
    R = Vt.T @ D @ U.T
    return (est - mu_e) @ R.T + mu_g


def ate_rmse(est: np.ndarray, gt: np.ndarray) -> float:
    est = np.asarray(est, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    aligned = align_trajectory(est, gt)
    return float(np.sqrt(np.mean(np.sum((aligned - gt) ** 2, axis=1))))


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    mse = float(np.mean((a - b) ** 2))
    return float("inf") if mse == 0 else float(10.0 * np.log10(1.0 / mse))


@dataclass
class SequenceReport:
    config: dict
    est_positions: list[list[float]]
    gt_positions: list[list[float]]
    est_poses: list[list[float]]
    ate_rmse: float
    keyframe_psnr: dict[int, float]
    gaussian_counts: list[int]
    final_losses: list[float]
    resolutions: list[list[int]]
    keyframes: list[int]
    total_fragments: int
    total_pixels: int
    removed: int
    inserted: int
    tracking_lost: list[int]
    step_halvings: int

    @property
    def mean_psnr(self) -> float:
        vals = list(self.keyframe_psnr.values())
        return float(np.mean(vals)) if vals else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["keyframe_psnr"] = {str(k): v for k, v in self.keyframe_psnr.items()}
        d["mean_psnr"] = self.mean_psnr
        return d


def run_sequence(frames: list[SequenceFrame], cfg: TrackerConfig, scene: Scene | None = None, recorder=None) -> SequenceReport:
    """Track every frame and map keyframes (every ``keyframe_interval`` frames).

    Frame 0 is a keyframe whose ground-truth pose anchors the trajectory; the map
    is bootstrapped from its depth unless ``scene`` is given.  ``recorder``
    receives every tracking and mapping iteration (see :func:`track_frame`).
    """
    if not frames:
        raise ValueError("empty sequence")
    R0 = cfg.R0
    rcfg = cfg.raster()
    f0 = frames[0]
    first = FrameState(0, True, R0, f0.color, f0.depth, f0.gt_pose, 0)
    scene = bootstrap_scene(first, cfg) if scene is None else scene.copy()
    mres = map_keyframe(first, scene, cfg, recorder=recorder)
    scene = mres.scene
    kf_states = [first]
    inserted = len(scene) if scene is not None else 0
    fragments, pixels = mres.fragments, mres.pixels
    psnrs = {0: psnr(render_frame(scene, f0.gt_pose, R0, rcfg).rendered_color, f0.color)}
    poses = [f0.gt_pose]
    counts = [len(scene)]
    final_losses = [mres.losses[-1] if mres.losses else 0.0]
    resolutions = [list(R0)]
    keyframes = [0]
    prune = PruneState(cfg.K0, cfg.lam, cfg.prune_cap, cfg.prune_floor) if cfg.pruning and cfg.prune_cap > 0 else None
    k_last = 0
    halvings = 0
    for n in range(1, len(frames)):
        fr = frames[n]
        is_kf = n % cfg.keyframe_interval == 0
        res = select_resolution(n, k_last, is_kf, R0, cfg.m) if cfg.downsampling else R0
        d = R0[0] // res[0]
        color, depth = downsample_frame(fr.color, fr.depth, d)
        if len(poses) >= 2:
            guess = _constant_velocity(poses[-2], poses[-1])
        else:
            guess = poses[-1]
        frame = FrameState(n, is_kf, res, color, depth, guess, k_last)
        tr = track_frame(frame, scene, cfg, prune=None if is_kf else prune, init_pose=guess, recorder=recorder)
        scene = tr.scene
        halvings += tr.step_halvings
        fragments += tr.fragments
        pixels += tr.pixels
        pose = tr.pose
        final_losses.append(tr.losses[-1] if tr.losses else 0.0)
        if is_kf:
            if prune is not None:
                scene = finalize_masks(prune, scene)
            kf = FrameState(n, True, R0, fr.color, fr.depth, pose, n)
            before = scene.next_id
            mres = map_keyframe(kf, scene, cfg, kf_states[-cfg.map_window :] if cfg.map_window > 0 else None, recorder=recorder)
            kf_states.append(kf)
            scene = mres.scene
            inserted += scene.next_id - before
            fragments += mres.fragments
            pixels += mres.pixels
            psnrs[n] = psnr(render_frame(scene, pose, R0, rcfg).rendered_color, fr.color)
            keyframes.append(n)
            k_last = n
        poses.append(pose)
        counts.append(len(scene))
        resolutions.append(list(res))

    est = np.array([p.center for p in poses])
    gt = np.array([f.gt_pose.center for f in frames])
    med = float(np.median(final_losses))
    lost = [i for i, l in enumerate(final_losses) if med > 0 and l > 10 * med]
    return SequenceReport(
        config=cfg.to_dict(),
        est_positions=est.tolist(),
        gt_positions=gt.tolist(),
        est_poses=[[*p.rotation, *p.translation] for p in poses],
        ate_rmse=ate_rmse(est, gt),
        keyframe_psnr=psnrs,
        gaussian_counts=counts,
        final_losses=final_losses,
        resolutions=resolutions,
        keyframes=keyframes,
        total_fragments=int(fragments),
        total_pixels=int(pixels),
        removed=prune.removed_total if prune is not None else 0,
        inserted=int(inserted),
        tracking_lost=lost,
        step_halvings=halvings,
    )


def _constant_velocity(prev2: CameraPose, prev: CameraPose) -> CameraPose:
    """Extrapolate ``T_prev * T_prev2^-1 * T_prev`` (world-to-camera transforms)."""
    R1, t1 = prev2.R, prev2.translation
    R2, t2 = prev.R, prev.translation
    dR = R2 @ R1.T
    dt = t2 - dR @ t1
    R3 = dR @ R2
    t3 = dR @ t2 + dt
    return CameraPose(rotmat_to_quat(R3), t3, prev.intrinsics)
