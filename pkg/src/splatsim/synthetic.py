"""Synthetic scenes, camera trajectories and RGB-D sequences rendered by the rasterizer."""
from __future__ import annotations

from pathlib import Path

import numpy as np

from .rasterizer import RasterConfig, render_frame
from .scene import CameraPose, Intrinsics, Scene, read_frame, write_frame
from .slam import SequenceFrame

# observed depth is reported only where the rendered coverage is at least this
DEPTH_COVERAGE = 0.5


def gen_scene(seed: int = 0, count: int = 500, extent: float = 1.0, scale_range=(0.04, 0.15), layout: str = "volume") -> Scene:
    """Random Gaussians inside the box ``[-extent, extent]^3``.

    ``layout="volume"`` spreads means through the box; ``"surface"`` puts them on
    its six faces, which gives a well-defined depth map like a real room or object.
    Scales are log-uniform in ``scale_range * extent`` and opacities uniform in [0.3, 0.99].
    """
    if count < 1:
        raise ValueError("count must be at least 1")
    if extent <= 0:
        raise ValueError("extent must be positive")
    rng = np.random.default_rng(seed)
    lo, hi = np.log(scale_range[0] * extent), np.log(scale_range[1] * extent)
    means = rng.uniform(-extent, extent, (count, 3))
    scales = np.exp(rng.uniform(lo, hi, (count, 3)))
    if layout == "surface":
        # flat splats lying in the faces, randomly turned about the face normal
        face = rng.integers(0, 6, count)
        axis = face % 3
        rows = np.arange(count)
        means[rows, axis] = np.where(face < 3, -extent, extent)
        scales[rows, axis] *= 0.1
        half = rng.uniform(0.0, np.pi, count)
        q = np.zeros((count, 4))
        q[:, 0] = np.cos(half)
        q[rows, 1 + axis] = np.sin(half)
    elif layout == "volume":
        q = rng.normal(size=(count, 4))
        q /= np.linalg.norm(q, axis=1, keepdims=True)
    else:
        raise ValueError(f"unknown layout {layout!r}")
    opac = rng.uniform(0.3, 0.99, count)
    colors = rng.uniform(0.0, 1.0, (count, 3))
    return Scene.from_arrays(means, scales, q, opac, colors)


def default_intrinsics(width: int = 64, height: int = 48, fov_deg: float = 60.0) -> Intrinsics:
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Intrinsics(f, f, (width - 1) / 2, (height - 1) / 2, width, height)


def orbit_poses(frames: int, intr: Intrinsics, radius: float = 3.0, height: float = 0.5, arc_deg: float = 30.0, center=(0.0, 0.0, 0.0)) -> list[CameraPose]:
    """Cameras on a horizontal circle around ``center``, all looking at it."""
    center = np.asarray(center, dtype=np.float64)
    angles = np.radians(np.linspace(0.0, arc_deg, frames))
    if frames > 1 and arc_deg == 0:
        raise ValueError("degenerate trajectory: zero baseline")
    poses = []
    for a in angles:
        eye = center + np.array([radius * np.sin(a), -height, -radius * np.cos(a)])
        poses.append(CameraPose.look_at(eye, center, intr))
    return poses


def line_poses(frames: int, intr: Intrinsics, distance: float = 3.0, length: float = 0.6) -> list[CameraPose]:
    """Cameras translating sideways along x, looking down +z."""
    if frames > 1 and length == 0:
        raise ValueError("degenerate trajectory: zero baseline")
    xs = np.linspace(-length / 2, length / 2, frames)
    return [CameraPose(np.array([1.0, 0, 0, 0]), np.array([-x, 0.0, distance]), intr) for x in xs]


def observe(scene: Scene, pose: CameraPose, cfg: RasterConfig | None = None, noise: float = 0.0, rng=None):
    """Rendered color and depth as a sensor would report them.

    Color is quantized to 8 bits; depth is zero (invalid) where coverage is low.
    """
    rec = render_frame(scene, pose, (pose.intrinsics.width, pose.intrinsics.height), cfg or RasterConfig())
    color = rec.rendered_color
    depth = np.where(1.0 - rec.T_final >= DEPTH_COVERAGE, rec.rendered_depth, 0.0)
    if noise > 0:
        rng = rng if rng is not None else np.random.default_rng(0)
        color = color + rng.normal(0.0, noise, color.shape)
        depth = np.where(depth > 0, depth + rng.normal(0.0, noise, depth.shape), 0.0)
        depth = np.maximum(depth, 0.0)
    color = np.clip(np.rint(np.clip(color, 0, 1) * 255.0), 0, 255) / 255.0
    depth = depth.astype(np.float32).astype(np.float64)
    return color, depth


def gen_sequence_frames(scene: Scene, trajectory: str = "orbit", frames: int = 60, noise: float = 0.0, seed: int = 0, intr: Intrinsics | None = None, **traj) -> list[SequenceFrame]:
    intr = intr or default_intrinsics()
    if trajectory == "orbit":
        poses = orbit_poses(frames, intr, **traj)
    elif trajectory == "line":
        poses = line_poses(frames, intr, **traj)
    else:
        raise ValueError(f"unknown trajectory {trajectory!r}")
    rng = np.random.default_rng(seed)
    out = []
    for p in poses:
        c, d = observe(scene, p, noise=noise, rng=rng)
        if not np.any(d > 0):
            raise ValueError("scene is not visible from the trajectory")
        out.append(SequenceFrame(c, d, p))
    return out


# ---------------------------------------------------------------------------
# manifest files


def write_manifest(out_dir, frames: list[SequenceFrame], extra: dict | None = None) -> Path:
    """Write GFRAME files and a manifest listing them with ground-truth poses."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    intr = frames[0].gt_pose.intrinsics
    lines = [f"# {k} = {v}" for k, v in (extra or {}).items()]
    lines.append("intrinsics " + " ".join(repr(float(v)) for v in (intr.fx, intr.fy, intr.cx, intr.cy)) + f" {int(intr.width)} {int(intr.height)}")
    for i, fr in enumerate(frames):
        name = f"frame_{i:04d}.gframe"
        write_frame(out_dir / name, fr.color, fr.depth)
        q, t = fr.gt_pose.rotation, fr.gt_pose.translation
        lines.append("frame " + name + " " + " ".join(repr(float(v)) for v in (*q, *t)))
    path = out_dir / "manifest.txt"
    path.write_text("\n".join(lines) + "\n")
    return path


def read_manifest(path) -> list[SequenceFrame]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    intr = None
    frames = []
    for ln, line in enumerate(path.read_text().splitlines(), 1):
        parts = line.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] == "intrinsics" and len(parts) == 7:
            intr = Intrinsics(*map(float, parts[1:5]), int(parts[5]), int(parts[6]))
        elif parts[0] == "frame" and len(parts) == 9:
            fpath = Path(parts[1])
            if not fpath.is_absolute():
                fpath = path.parent / fpath
            color, depth = read_frame(fpath)
            h, w = depth.shape
            frame_intr = intr or default_intrinsics(w, h)
            vals = np.array(list(map(float, parts[2:])))
            pose = CameraPose(vals[:4] / np.linalg.norm(vals[:4]), vals[4:], frame_intr)
            frames.append(SequenceFrame(color, depth, pose))
        else:
            raise ValueError(f"{path}:{ln}: unrecognized manifest line")
    if not frames:
        raise ValueError(f"{path}: manifest lists no frames")
    return frames


def perturb_pose(pose: CameraPose, rot_deg: float, trans: float, seed: int = 0) -> CameraPose:
    """Left-perturb ``pose`` by a random rotation of ``rot_deg`` and translation of length ``trans``."""
    rng = np.random.default_rng(seed)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    d = rng.normal(size=3)
    d /= np.linalg.norm(d)
    return pose.perturbed(np.concatenate([np.radians(rot_deg) * axis, trans * d]))

