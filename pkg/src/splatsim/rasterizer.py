"""Depth sorting and per-tile alpha compositing with early termination.

A fragment is a (pixel, splat) pair whose pixel centre lies inside the
splat's 3-sigma footprint box, the same box used for tile binning.  Tiles
only decide where candidates are looked up, so the image does not depend on
the tile grid.  Fragments are binned per 16x16 tile and composited per 4x4
subtile; a subtile's list is its tile's depth-sorted list minus the Gaussians
that cannot produce a fragment above the alpha cutoff anywhere in the
subtile, so the result equals compositing the whole tile list.

Subtiles are processed in chunks; every operation inside a chunk is either
elementwise or a cumulative scan along the fragment axis, so a subtile's
output does not depend on which chunk it lands in or how far that chunk is
padded.  That is what makes results bit-identical across worker counts.
"""
from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .projection import Gaussian2D, Projection, TileBinning, bin_tiles, project_scene
from .scene import CameraPose, Scene, TileLayout

ALPHA_MIN = 1.0 / 255.0
ALPHA_MAX = 0.999
T_TERM = 1e-4
DEPTH_NORM_EPS = 1e-6


@dataclass(frozen=True)
class RasterConfig:
    alpha_min: float = ALPHA_MIN
    alpha_max: float = ALPHA_MAX
    t_term: float = T_TERM
    early_termination: bool = True
    background: tuple[float, float, float] = (0.0, 0.0, 0.0)
    near: float = 0.01
    workers: int | None = None


def worker_count(cfg: RasterConfig) -> int:
    if cfg.workers is not None:
        return max(1, int(cfg.workers))
    return max(1, int(os.environ.get("RTGS_THREADS", "1")))


# ---------------------------------------------------------------------------
# sorting


def sort_tile_fragments(binning: TileBinning, proj: Projection) -> list[np.ndarray]:
    """Per-tile projection rows sorted by (depth, gaussian id)."""
    out = []
    for rows in binning.tile_lists:
        if rows.size == 0:
            out.append(rows)
            continue
        order = np.lexsort((proj.ids[rows], proj.depth[rows]))
        out.append(rows[order])
    return out


def pixel_fragments(proj: Projection, rows: np.ndarray, pixel) -> list[Gaussian2D]:
    """Splats among ``rows`` whose footprint box contains ``pixel`` (x, y), in the given order."""
    rows = np.asarray(rows, dtype=np.int64)
    d = np.abs(np.asarray(pixel, dtype=np.float64)[None, :] - proj.mean2d[rows])
    keep = proj.valid[rows] & np.all(d <= proj.radius[rows, None], axis=1)
    return [proj.gaussian2d(int(r)) for r in rows[keep]]


def compute_alpha(g2d: Gaussian2D, pixel, alpha_max: float = ALPHA_MAX) -> float:
    d = np.asarray(pixel, dtype=np.float64) - g2d.mean2d
    power = -0.5 * float(d @ g2d.inv_cov2d @ d)
    return min(g2d.opacity * float(np.exp(power)), alpha_max)


# ---------------------------------------------------------------------------
# compositing kernel


def alpha_extent(proj: Projection, alpha_min: float = ALPHA_MIN) -> np.ndarray:
    """Per-row pixel box ``(xlo, xhi, ylo, yhi)`` outside which no fragment is blended.

    ``o exp(-d^2/2) > alpha_min`` needs ``d^2 < 2 ln(o / alpha_min)``, and the
    Mahalanobis distance satisfies ``d^2 >= dx^2 / cov_xx``.  The box is also
    clipped to the footprint.  Rows that can never pass the cutoff get an empty box.
    """
    o = np.asarray(proj.opacities, dtype=np.float64)
    reach = np.where(o > alpha_min, 2.0 * np.log(np.maximum(o, alpha_min) / alpha_min), -1.0)
    ok = proj.valid & (reach > 0)
    rx = np.sqrt(np.maximum(reach, 0.0) * proj.cov2d[:, 0, 0]) * (1 + 1e-9) + 1e-6
    ry = np.sqrt(np.maximum(reach, 0.0) * proj.cov2d[:, 1, 1]) * (1 + 1e-9) + 1e-6
    rx = np.minimum(rx, proj.radius * (1 + 1e-9) + 1e-6)
    ry = np.minimum(ry, proj.radius * (1 + 1e-9) + 1e-6)
    mx, my = proj.mean2d[:, 0], proj.mean2d[:, 1]
    box = np.stack([mx - rx, mx + rx, my - ry, my + ry], axis=1)
    box[~ok] = (np.inf, -np.inf, np.inf, -np.inf)
    return box


def subtile_lists(proj: Projection, sorted_lists: list[np.ndarray], layout: TileLayout, alpha_min: float = ALPHA_MIN) -> list[np.ndarray]:
    """Depth-ordered rows per subtile (row-major subtile index)."""
    ss, ts = layout.subtile_size, layout.tile_size
    per = ts // ss
    box = alpha_extent(proj, alpha_min)
    out: list[np.ndarray] = [np.zeros(0, np.int64)] * layout.num_subtiles
    for t, rows in enumerate(sorted_lists):
        if rows.size == 0:
            continue
        ty, tx = divmod(t, layout.tiles_x)
        b = box[rows]
        for a in range(per):
            sy = ty * per + a
            if sy >= layout.subtiles_y:
                break
            y0 = sy * ss
            in_y = (b[:, 3] >= y0) & (b[:, 2] <= y0 + ss - 1)
            for c in range(per):
                sx = tx * per + c
                if sx >= layout.subtiles_x:
                    break
                x0 = sx * ss
                keep = in_y & (b[:, 1] >= x0) & (b[:, 0] <= x0 + ss - 1)
                out[sy * layout.subtiles_x + sx] = rows[keep]
    return out


@dataclass
class TileChunk:
    """Forward intermediates for a group of subtiles, padded along the fragment axis.

    Shapes: ``rows`` (B, L); pixel arrays (B, P); fragment arrays (B, P, L).
    ``alpha`` is zero for every fragment that was not blended.  ``units`` are
    subtile indices and ``tiles`` the tile each one belongs to.
    """

    units: np.ndarray
    tiles: np.ndarray
    rows: np.ndarray
    pad: np.ndarray
    pix_i: np.ndarray
    pix_j: np.ndarray
    pix_valid: np.ndarray
    dx: np.ndarray
    dy: np.ndarray
    gauss: np.ndarray
    alpha: np.ndarray
    unclamped: np.ndarray
    T: np.ndarray
    incl: np.ndarray
    T_final: np.ndarray
    color: np.ndarray
    depth_acc: np.ndarray


def _composite(
    dx, dy, conic, opac, colors, depths, live, cfg: RasterConfig
) -> tuple[np.ndarray, ...]:
    """Blend fragments front to back.

    ``dx, dy, live`` are (B, P, L); ``conic`` (B, L, 2, 2); ``opac, depths``
    (B, L); ``colors`` (B, L, 3).  Returns per-fragment arrays and per-pixel
    accumulations.
    """
    a = conic[:, None, :, 0, 0]
    b = conic[:, None, :, 0, 1]
    c = conic[:, None, :, 1, 1]
    power = -0.5 * (a * dx * dx + c * dy * dy) - b * dx * dy
    gauss = np.exp(power)
    raw = opac[:, None, :] * gauss
    alpha = np.minimum(raw, cfg.alpha_max)
    use = live & (alpha > cfg.alpha_min)
    alpha_use = np.where(use, alpha, 0.0)
    T_after = np.cumprod(1.0 - alpha_use, axis=2)
    T_before = np.empty_like(T_after)
    if T_before.shape[2]:
        T_before[..., 0] = 1.0
        T_before[..., 1:] = T_after[..., :-1]
    incl = use & (T_before >= cfg.t_term) if cfg.early_termination else use
    alpha_inc = np.where(incl, alpha, 0.0)
    T_final = np.min(np.where(incl, T_after, 1.0), axis=2, initial=1.0)
    w = T_before * alpha_inc
    color = np.empty(w.shape[:2] + (3,))
    for ch in range(3):
        acc = np.cumsum(w * colors[:, None, :, ch], axis=2)
        color[..., ch] = acc[..., -1] if acc.shape[2] else 0.0
    dacc = np.cumsum(w * depths[:, None, :], axis=2)
    depth_acc = dacc[..., -1] if dacc.shape[2] else np.zeros(w.shape[:2])
    unclamped = raw <= cfg.alpha_max
    return gauss, alpha_inc, unclamped, T_before, incl, T_final, color, depth_acc


def _pixel_grid(layout: TileLayout, units: np.ndarray):
    ss = layout.subtile_size
    oy, ox = np.divmod(units, layout.subtiles_x)
    li, lj = np.divmod(np.arange(ss * ss), ss)
    pi = oy[:, None] * ss + li[None, :]
    pj = ox[:, None] * ss + lj[None, :]
    valid = (pi < layout.height) & (pj < layout.width)
    return pi, pj, valid


def subtile_tile(layout: TileLayout, units) -> np.ndarray:
    per = layout.tile_size // layout.subtile_size
    sy, sx = np.divmod(np.asarray(units, dtype=np.int64), layout.subtiles_x)
    return (sy // per) * layout.tiles_x + sx // per


def _forward_chunk(proj: Projection, unit_lists, units: np.ndarray, layout: TileLayout, cfg: RasterConfig) -> TileChunk:
    B = len(units)
    L = max((len(unit_lists[u]) for u in units), default=0)
    rows = np.full((B, L), -1, dtype=np.int64)
    for b, u in enumerate(units):
        lst = unit_lists[u]
        rows[b, : len(lst)] = lst
    pad = rows < 0
    rc = np.where(pad, 0, rows)
    pi, pj, pvalid = _pixel_grid(layout, units)
    if len(proj):
        mean = proj.mean2d[rc]
        conic = proj.conic[rc]
        opac = np.where(pad, 0.0, proj.opacities[rc])
        colors = proj.colors[rc]
        depths = proj.depth[rc]
        radius = np.where(pad, -1.0, proj.radius[rc])
    else:
        mean = np.zeros((B, L, 2))
        conic = np.zeros((B, L, 2, 2))
        opac = np.zeros((B, L))
        colors = np.zeros((B, L, 3))
        depths = np.zeros((B, L))
        radius = np.full((B, L), -1.0)
    dx = pj[:, :, None].astype(np.float64) - mean[:, None, :, 0]
    dy = pi[:, :, None].astype(np.float64) - mean[:, None, :, 1]
    r = radius[:, None, :]
    live = (~pad)[:, None, :] & pvalid[:, :, None] & (np.abs(dx) <= r) & (np.abs(dy) <= r)
    gauss, alpha, unclamped, T, incl, T_final, color, depth_acc = _composite(
        dx, dy, conic, opac, colors, depths, live, cfg
    )
    return TileChunk(
        units=np.asarray(units),
        tiles=subtile_tile(layout, units),
        rows=rows,
        pad=pad,
        pix_i=pi,
        pix_j=pj,
        pix_valid=pvalid,
        dx=dx,
        dy=dy,
        gauss=gauss,
        alpha=alpha,
        unclamped=unclamped,
        T=T,
        incl=incl,
        T_final=T_final,
        color=color,
        depth_acc=depth_acc,
    )


CHUNK_UNITS = 32


def partition_units(unit_lists: list[np.ndarray], chunk_units: int = CHUNK_UNITS) -> list[np.ndarray]:
    """Group subtiles of similar list length so little padding is computed.

    The grouping depends only on the lists, never on the worker count.
    """
    lengths = np.array([len(u) for u in unit_lists], dtype=np.int64)
    order = np.lexsort((np.arange(lengths.size), lengths))
    return [order[i : i + chunk_units] for i in range(0, order.size, chunk_units)]


# ---------------------------------------------------------------------------
# records


@dataclass
class RenderRecord:
    rendered_color: np.ndarray
    rendered_depth: np.ndarray
    T_final: np.ndarray
    n_contrib: np.ndarray
    depth_acc: np.ndarray
    proj: Projection
    layout: TileLayout
    binning: TileBinning
    sorted_lists: list[np.ndarray]
    unit_lists: list[np.ndarray]
    chunks: list[TileChunk]
    cfg: RasterConfig
    _tile_loc: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        for ci, ch in enumerate(self.chunks):
            for b, u in enumerate(ch.units):
                self._tile_loc[int(u)] = (ci, b)

    @property
    def resolution(self) -> tuple[int, int]:
        return self.layout.width, self.layout.height

    def pixel_log(self, i: int, j: int) -> list[tuple[int, float, float, np.ndarray]]:
        """Blended fragments of pixel (i, j) in order: (gaussian id, alpha, T, contribution)."""
        ss = self.layout.subtile_size
        ci, b = self._tile_loc[self.layout.subtile_of(i, j)]
        ch = self.chunks[ci]
        p = (i % ss) * ss + (j % ss)
        out = []
        for k in np.flatnonzero(ch.incl[b, p]):
            row = ch.rows[b, k]
            a = float(ch.alpha[b, p, k])
            T = float(ch.T[b, p, k])
            out.append((int(self.proj.ids[row]), a, T, T * a * self.proj.colors[row]))
        return out

    def fragment_count(self) -> int:
        return int(self.n_contrib.sum())


def render_frame(
    scene: Scene,
    pose: CameraPose,
    resolution: tuple[int, int],
    cfg: RasterConfig = RasterConfig(),
) -> RenderRecord:
    """Project, bin, sort and composite ``scene`` at ``resolution``.

    Masked Gaussians are excluded exactly as if they were absent.
    """
    width, height = resolution
    layout = TileLayout(width, height)
    proj = project_scene(scene, pose, resolution, near=cfg.near)
    binning = bin_tiles(proj, layout)
    sorted_lists = sort_tile_fragments(binning, proj)
    unit_lists = subtile_lists(proj, sorted_lists, layout, cfg.alpha_min)
    parts = partition_units(unit_lists)
    workers = min(worker_count(cfg), len(parts))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as ex:
            chunks = list(ex.map(lambda u: _forward_chunk(proj, unit_lists, u, layout, cfg), parts))
    else:
        chunks = [_forward_chunk(proj, unit_lists, u, layout, cfg) for u in parts]

    bg = np.asarray(cfg.background, dtype=np.float64)
    color = np.zeros((height, width, 3))
    T_final = np.ones((height, width))
    depth_acc = np.zeros((height, width))
    n_contrib = np.zeros((height, width), dtype=np.int64)
    for ch in chunks:
        v = ch.pix_valid
        ii, jj = ch.pix_i[v], ch.pix_j[v]
        color[ii, jj] = ch.color[v] + bg * ch.T_final[v][:, None]
        T_final[ii, jj] = ch.T_final[v]
        depth_acc[ii, jj] = ch.depth_acc[v]
        n_contrib[ii, jj] = ch.incl.sum(axis=2)[v]
    weight = 1.0 - T_final
    depth = np.where(weight > DEPTH_NORM_EPS, depth_acc / np.where(weight > DEPTH_NORM_EPS, weight, 1.0), 0.0)
    return RenderRecord(
        rendered_color=color,
        rendered_depth=depth,
        T_final=T_final,
        n_contrib=n_contrib,
        depth_acc=depth_acc,
        proj=proj,
        layout=layout,
        binning=binning,
        sorted_lists=sorted_lists,
        unit_lists=unit_lists,
        chunks=chunks,
        cfg=cfg,
    )


def render_pixel(pixel, fragments: list[Gaussian2D], background=(0.0, 0.0, 0.0), cfg: RasterConfig = RasterConfig()):
    """Composite one pixel from depth-ordered ``fragments``.

    Runs the same kernel as :func:`render_frame`; returns ``(color, depth, log)``
    where ``log`` holds ``(id, alpha, T, contribution)`` per blended fragment.
    """
    n = len(fragments)
    px = np.asarray(pixel, dtype=np.float64)
    if n == 0:
        return np.asarray(background, dtype=np.float64).copy(), 0.0, []
    mean = np.array([f.mean2d for f in fragments])
    conic = np.array([f.inv_cov2d for f in fragments])[None]
    opac = np.array([f.opacity for f in fragments])[None]
    colors = np.array([f.color for f in fragments])[None]
    depths = np.array([f.depth for f in fragments])[None]
    dx = (px[0] - mean[:, 0])[None, None, :]
    dy = (px[1] - mean[:, 1])[None, None, :]
    live = np.ones((1, 1, n), dtype=bool)
    _, alpha, _, T, incl, T_final, color, depth_acc = _composite(dx, dy, conic, opac, colors, depths, live, cfg)
    tf = float(T_final[0, 0])
    out_color = color[0, 0] + np.asarray(background, dtype=np.float64) * tf
    w = 1.0 - tf
    depth = float(depth_acc[0, 0] / w) if w > DEPTH_NORM_EPS else 0.0
    log = [
        (fragments[k].source_id, float(alpha[0, 0, k]), float(T[0, 0, k]), T[0, 0, k] * alpha[0, 0, k] * colors[0, k])
        for k in np.flatnonzero(incl[0, 0])
    ]
    return out_color, depth, log
