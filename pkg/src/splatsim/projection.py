"""Preprocessing: EWA projection of 3D Gaussians and tile binning."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import CameraPose, Gaussian3D, Intrinsics, Scene, TileLayout, covariances, quat_to_rotmat

NEAR_PLANE = 0.01
LOWPASS = 0.3  # native-resolution px^2
SIGMA_EXTENT = 3.0


class Culled:
    """Marker returned by :func:`project_gaussian` for Gaussians behind the near plane."""

    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super().__new__(cls)
        return cls._instance

    def __repr__(self) -> str:
        return "Culled"


CULLED = Culled()


@dataclass
class Gaussian2D:
    source_id: int
    mean2d: np.ndarray
    cov2d: np.ndarray
    inv_cov2d: np.ndarray
    depth: float
    color: np.ndarray
    opacity: float


@dataclass
class Projection:
    """Vectorized projection of a whole scene, with the intermediates the backward pass needs.

    Culled rows hold finite placeholder values and ``valid == False``.
    """

    ids: np.ndarray
    valid: np.ndarray
    mean2d: np.ndarray
    cov2d: np.ndarray
    conic: np.ndarray
    depth: np.ndarray
    colors: np.ndarray
    opacities: np.ndarray
    radius: np.ndarray
    # intermediates
    p_cam: np.ndarray
    J: np.ndarray
    cov_cam: np.ndarray
    cov3d: np.ndarray
    W: np.ndarray
    intr: Intrinsics

    def __len__(self) -> int:
        return int(self.ids.size)

    def gaussian2d(self, i: int) -> Gaussian2D | Culled:
        if not self.valid[i]:
            return CULLED
        return Gaussian2D(
            source_id=int(self.ids[i]),
            mean2d=self.mean2d[i].copy(),
            cov2d=self.cov2d[i].copy(),
            inv_cov2d=self.conic[i].copy(),
            depth=float(self.depth[i]),
            color=self.colors[i].copy(),
            opacity=float(self.opacities[i]),
        )


def project_scene(
    scene: Scene,
    pose: CameraPose,
    resolution: tuple[int, int],
    near: float = NEAR_PLANE,
    include_masked: bool = False,
) -> Projection:
    """Project every Gaussian of ``scene`` for a frame of size ``resolution``.

    Intrinsics are rescaled from the native resolution, so rendering at a
    reduced resolution is the same as rendering with scaled intrinsics.  The
    ``LOWPASS`` footprint term is in native pixels and is rescaled too.
    Masked Gaussians are treated as culled unless ``include_masked``.
    """
    width, height = resolution
    intr = pose.intrinsics.scaled(width, height)
    for name in ("means", "scales", "rotations", "opacities", "colors"):
        if not np.all(np.isfinite(getattr(scene, name))):
            raise ValueError(f"non-finite gaussian {name}")
    if not (np.all(np.isfinite(pose.rotation)) and np.all(np.isfinite(pose.translation))):
        raise ValueError("non-finite camera pose")

    n = len(scene)
    W = pose.R
    p = scene.means @ W.T + pose.translation
    z = p[:, 2]
    valid = z > near
    if not include_masked:
        valid &= ~scene.masked
    zs = np.where(valid, z, 1.0)
    x, y = p[:, 0], p[:, 1]

    mean2d = np.stack([intr.fx * x / zs + intr.cx, intr.fy * y / zs + intr.cy], axis=1)
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = intr.fx / zs
    J[:, 0, 2] = -intr.fx * x / zs**2
    J[:, 1, 1] = intr.fy / zs
    J[:, 1, 2] = -intr.fy * y / zs**2

    cov3d = covariances(scene.rotations, scene.scales)
    cov_cam = W @ cov3d @ W.T
    cov2d = J @ cov_cam @ np.swapaxes(J, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    # the regularizer is fixed in native pixels, so it shrinks with the resolution
    sx = width / pose.intrinsics.width
    sy = height / pose.intrinsics.height
    cov2d[:, 0, 0] += LOWPASS * sx * sx
    cov2d[:, 1, 1] += LOWPASS * sy * sy

    a, b, c = cov2d[:, 0, 0], cov2d[:, 0, 1], cov2d[:, 1, 1]
    det = a * c - b * b
    conic = np.empty_like(cov2d)
    conic[:, 0, 0] = c / det
    conic[:, 1, 1] = a / det
    conic[:, 0, 1] = conic[:, 1, 0] = -b / det

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = SIGMA_EXTENT * np.sqrt(lam_max)

    return Projection(
        ids=scene.ids.copy(),
        valid=valid,
        mean2d=mean2d,
        cov2d=cov2d,
        conic=conic,
        depth=np.where(valid, z, 0.0),
        colors=scene.colors,
        opacities=scene.opacities,
        radius=np.where(valid, radius, 0.0),
        p_cam=p,
        J=J,
        cov_cam=cov_cam,
        cov3d=cov3d,
        W=W,
        intr=intr,
    )


def project_gaussian(g: Gaussian3D, pose: CameraPose, resolution, near: float = NEAR_PLANE) -> Gaussian2D | Culled:
    scene = Scene.from_gaussians([g])
    scene.masked[:] = False
    return project_scene(scene, pose, resolution, near=near).gaussian2d(0)


# ---------------------------------------------------------------------------
# tiles


def tile_range(mean2d, radius, layout: TileLayout) -> tuple[int, int, int, int]:
    """Inclusive tile index range ``(tx0, tx1, ty0, ty1)`` of the 3-sigma box; empty if tx0 > tx1."""
    ts = layout.tile_size
    xmin = max(mean2d[0] - radius, 0.0)
    xmax = min(mean2d[0] + radius, layout.width - 1.0)
    ymin = max(mean2d[1] - radius, 0.0)
    ymax = min(mean2d[1] + radius, layout.height - 1.0)
    if xmin > xmax or ymin > ymax:
        return 0, -1, 0, -1
    # a tile covers pixel centres [ts*t, ts*t + ts - 1]
    tx0 = _first_tile(xmin, ts)
    tx1 = _last_tile(xmax, ts)
    ty0 = _first_tile(ymin, ts)
    ty1 = _last_tile(ymax, ts)
    return tx0, tx1, ty0, ty1


def _first_tile(lo: float, ts: int) -> int:
    # smallest t with ts*t + ts - 1 >= lo
    return max(0, int(np.ceil((lo - (ts - 1)) / ts)))


def _last_tile(hi: float, ts: int) -> int:
    # largest t with ts*t <= hi
    return int(np.floor(hi / ts))


def intersect_tiles(g2d: Gaussian2D, layout: TileLayout) -> list[int]:
    """Tiles whose pixel-centre rectangle overlaps the 3-sigma box of ``g2d``."""
    a, b, c = g2d.cov2d[0, 0], g2d.cov2d[0, 1], g2d.cov2d[1, 1]
    mid = 0.5 * (a + c)
    lam = mid + np.sqrt(max(mid * mid - (a * c - b * b), 0.0))
    r = SIGMA_EXTENT * np.sqrt(lam)
    tx0, tx1, ty0, ty1 = tile_range(g2d.mean2d, r, layout)
    return [ty * layout.tiles_x + tx for ty in range(ty0, ty1 + 1) for tx in range(tx0, tx1 + 1)]


@dataclass
class TileBinning:
    layout: TileLayout
    tile_lists: list[np.ndarray]
    gaussian_tiles: dict[int, list[int]]
    total_intersections: int

    def pairs(self) -> set[tuple[int, int]]:
        """The (gaussian id, tile) intersection set."""
        return {(g, t) for g, tiles in self.gaussian_tiles.items() for t in tiles}


def bin_tiles(proj: Projection, layout: TileLayout) -> TileBinning:
    """Assign projected Gaussians to tiles.

    ``tile_lists`` hold row indices into ``proj`` sorted by Gaussian id, so the
    result does not depend on the order Gaussians are visited in.
    """
    ts = layout.tile_size
    per_tile: list[list[int]] = [[] for _ in range(layout.num_tiles)]
    gaussian_tiles: dict[int, list[int]] = {}
    idx = np.flatnonzero(proj.valid)
    if idx.size:
        mx, my, r = proj.mean2d[idx, 0], proj.mean2d[idx, 1], proj.radius[idx]
        xmin = np.maximum(mx - r, 0.0)
        xmax = np.minimum(mx + r, layout.width - 1.0)
        ymin = np.maximum(my - r, 0.0)
        ymax = np.minimum(my + r, layout.height - 1.0)
        tx0 = np.maximum(0, np.ceil((xmin - (ts - 1)) / ts)).astype(np.int64)
        tx1 = np.floor(xmax / ts).astype(np.int64)
        ty0 = np.maximum(0, np.ceil((ymin - (ts - 1)) / ts)).astype(np.int64)
        ty1 = np.floor(ymax / ts).astype(np.int64)
        on = (xmin <= xmax) & (ymin <= ymax)
        order = np.argsort(proj.ids[idx], kind="stable")
        for k in order:
            if not on[k]:
                continue
            row = int(idx[k])
            tiles = [
                ty * layout.tiles_x + tx
                for ty in range(ty0[k], ty1[k] + 1)
                for tx in range(tx0[k], tx1[k] + 1)
            ]
            if not tiles:
                continue
            gaussian_tiles[int(proj.ids[row])] = tiles
            for t in tiles:
                per_tile[t].append(row)
    tile_lists = [np.asarray(lst, dtype=np.int64) for lst in per_tile]
    total = sum(len(t) for t in tile_lists)
    return TileBinning(layout, tile_lists, gaussian_tiles, total)


def intersection_change_ratio(prev: TileBinning, curr: TileBinning) -> float:
    """Fraction of (gaussian, tile) pairs added or removed between two binnings."""
    a = prev.pairs()
    b = curr.pairs()
    return len(a ^ b) / max(1, len(a))
