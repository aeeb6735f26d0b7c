"""Loss, rendering backpropagation, gradient aggregation and preprocessing backpropagation.

Pixel-level records carry a fixed-width gradient vector (see ``G_*`` slices).
The covariance gradient is tracked in conic space at the pixel and tile levels
and mapped to ``dL/dcov2d`` with ``-Q G Q`` where needed; the map is linear
per Gaussian, so it commutes with aggregation.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .rasterizer import DEPTH_NORM_EPS, RenderRecord, TileChunk
from .scene import CameraPose, FrameState, Scene, quat_to_rotmat, rotation_tangent_grad

# gradient vector layout
G_COLOR = slice(0, 3)
G_ALPHA = 3
G_MEAN2D = slice(4, 6)
G_CONIC = slice(6, 9)  # (d/da, d/db counted once for both off-diagonals, d/dc)
G_OPACITY = 9
G_DEPTH = 10
G_WIDTH = 11

MIN_ONE_MINUS_ALPHA = 1e-6

TRACKING = "tracking"
MAPPING = "mapping"


@dataclass
class LossGradients:
    dL_dcolor: np.ndarray
    dL_ddepth: np.ndarray


def compute_loss(record: RenderRecord, frame: FrameState, lambda_pho: float) -> tuple[float, LossGradients]:
    """Weighted L1 photometric + geometric loss and its per-pixel gradients."""
    rc, rd = record.rendered_color, record.rendered_depth
    oc, od = frame.observed_color, frame.observed_depth
    if rc.shape != oc.shape or rd.shape != od.shape:
        raise ValueError(f"rendered {rd.shape} and observed {od.shape} buffers differ in resolution")
    n_pix = rd.size
    diff = rc - oc
    e_pho = np.abs(diff).sum() / n_pix
    g_color = lambda_pho * np.sign(diff) / n_pix

    valid = od > 0
    n_valid = int(valid.sum())
    g_depth = np.zeros_like(rd)
    e_geo = 0.0
    if n_valid:
        ddiff = np.where(valid, rd - od, 0.0)
        e_geo = np.abs(ddiff).sum() / n_valid
        g_depth = (1.0 - lambda_pho) * np.sign(ddiff) / n_valid
    loss = lambda_pho * e_pho + (1.0 - lambda_pho) * e_geo
    return float(loss), LossGradients(g_color, g_depth)


# ---------------------------------------------------------------------------
# rendering backprop


@dataclass
class ChunkGradients:
    """Pixel-level gradients of one chunk; ``planes`` is (G_WIDTH, B, P, L)."""

    chunk: TileChunk
    planes: np.ndarray
    T_recovered: np.ndarray


def _suffix_exclusive(x: np.ndarray) -> np.ndarray:
    """``out[..., k] = sum(x[..., k+1:])`` along the last axis."""
    out = np.zeros_like(x)
    if x.shape[-1] > 1:
        out[..., :-1] = np.cumsum(x[..., :0:-1], axis=-1)[..., ::-1]
    return out


def _backward_chunk(ch: TileChunk, proj, loss_grads: LossGradients, background, depth_acc_px, T_final_px) -> ChunkGradients:
    B, P, L = ch.alpha.shape
    planes = np.zeros((G_WIDTH, B, P, L))
    if L == 0:
        return ChunkGradients(ch, planes, np.zeros((B, P, 0)))
    pi = np.where(ch.pix_valid, ch.pix_i, 0)
    pj = np.where(ch.pix_valid, ch.pix_j, 0)
    v = ch.pix_valid
    dLdC = np.where(v[..., None], loss_grads.dL_dcolor[pi, pj], 0.0)
    dLdD = np.where(v, loss_grads.dL_ddepth[pi, pj], 0.0)

    alpha = ch.alpha  # zero for fragments that were not blended
    one_m = 1.0 - alpha
    if np.any(one_m < MIN_ONE_MINUS_ALPHA):
        raise FloatingPointError("1 - alpha below 1e-6; forward clamp violated")

    # T recovery by repeated division, back to front, from the final transmittance
    seq = np.concatenate([ch.T_final[..., None], one_m[..., ::-1]], axis=2)
    acc = np.divide.accumulate(seq, axis=2)
    T = acc[..., 1:][..., ::-1]

    rc = np.where(ch.pad, 0, ch.rows)
    colors = proj.colors[rc]  # (B, L, 3)
    depths = proj.depth[rc][:, None, :]  # (B, 1, L)
    w = T * alpha

    # color: dC/dalpha_k = T_k c_k - (sum_{j>k} w_j c_j + T_final bg) / (1 - alpha_k), dotted with dL/dC
    cg = (
        colors[:, None, :, 0] * dLdC[:, :, None, 0]
        + colors[:, None, :, 1] * dLdC[:, :, None, 1]
        + colors[:, None, :, 2] * dLdC[:, :, None, 2]
    )
    bg = np.asarray(background, dtype=np.float64)
    bgg = ch.T_final * (bg[0] * dLdC[..., 0] + bg[1] * dLdC[..., 1] + bg[2] * dLdC[..., 2])
    dL_dalpha = T * cg - (_suffix_exclusive(w * cg) + bgg[..., None]) / one_m

    # depth is normalized by the accumulated weight 1 - T_final
    weight = 1.0 - ch.T_final
    has_depth = weight > DEPTH_NORM_EPS
    wsafe = np.where(has_depth, weight, 1.0)
    D = np.where(has_depth, ch.depth_acc / wsafe, 0.0)
    dA = T * depths - _suffix_exclusive(w * depths) / one_m
    dW = ch.T_final[..., None] / one_m
    scale_d = np.where(has_depth, dLdD / wsafe, 0.0)[..., None]
    dL_dalpha = np.where(ch.incl, dL_dalpha + (dA - D[..., None] * dW) * scale_d, 0.0)

    for c in range(3):
        planes[c] = w * dLdC[:, :, None, c]
    planes[G_ALPHA] = dL_dalpha
    planes[G_DEPTH] = w * scale_d

    g_raw = np.where(ch.unclamped, dL_dalpha, 0.0)
    planes[G_OPACITY] = ch.gauss * g_raw
    g_pow = proj.opacities[rc][:, None, :] * planes[G_OPACITY]
    conic = proj.conic[rc]
    a = conic[:, None, :, 0, 0]
    b = conic[:, None, :, 0, 1]
    c = conic[:, None, :, 1, 1]
    dx, dy = ch.dx, ch.dy
    # power = -0.5 (a dx^2 + 2 b dx dy + c dy^2), d = pixel - mean
    gdx = g_pow * dx
    gdy = g_pow * dy
    planes[4] = a * gdx + b * gdy
    planes[5] = b * gdx + c * gdy
    planes[6] = -0.5 * gdx * dx
    planes[7] = -gdx * dy
    planes[8] = -0.5 * gdy * dy
    return ChunkGradients(ch, planes, np.where(ch.incl, T, 0.0))


@dataclass
class Grad2D:
    dL_dcolor: np.ndarray
    dL_dalpha: float
    dL_dmean2d: np.ndarray
    dL_dcov2d: np.ndarray
    dL_dopacity: float
    dL_ddepth: float


def conic_to_cov_grad(g_conic: np.ndarray, conic: np.ndarray) -> np.ndarray:
    """Map (..., 3) conic gradients to full symmetric (..., 2, 2) ``dL/dcov2d``."""
    G = np.empty(g_conic.shape[:-1] + (2, 2))
    G[..., 0, 0] = g_conic[..., 0]
    G[..., 0, 1] = G[..., 1, 0] = 0.5 * g_conic[..., 1]
    G[..., 1, 1] = g_conic[..., 2]
    return -conic @ G @ conic


def _as_grad2d(vec: np.ndarray, conic: np.ndarray) -> Grad2D:
    return Grad2D(
        dL_dcolor=vec[G_COLOR].copy(),
        dL_dalpha=float(vec[G_ALPHA]),
        dL_dmean2d=vec[G_MEAN2D].copy(),
        dL_dcov2d=conic_to_cov_grad(vec[G_CONIC], conic),
        dL_dopacity=float(vec[G_OPACITY]),
        dL_ddepth=float(vec[G_DEPTH]),
    )


@dataclass
class PixelRecords:
    """Flat pixel-level records: one row per blended fragment, ordered by tile then row-major pixel."""

    gaussian_row: np.ndarray
    gaussian_id: np.ndarray
    pix_i: np.ndarray
    pix_j: np.ndarray
    tile: np.ndarray
    values: np.ndarray

    def __len__(self) -> int:
        return int(self.gaussian_row.size)


@dataclass
class Gaussian3DGrads:
    dL_dmean: np.ndarray
    dL_dscale: np.ndarray
    dL_drotation: np.ndarray
    dL_dopacity: np.ndarray
    dL_dcolor: np.ndarray


@dataclass
class GradientSet:
    """Gradients at every aggregation level, indexed by projection row."""

    ids: np.ndarray
    conic: np.ndarray
    pixel: PixelRecords | None = None
    tile_rows: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    tile_ids: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    tile_values: np.ndarray = field(default_factory=lambda: np.zeros((0, G_WIDTH)))
    gaussian2d: np.ndarray | None = None
    gaussian3d: Gaussian3DGrads | None = None
    pose_contrib: np.ndarray | None = None
    pose_level: np.ndarray | None = None
    T_recovered: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def pixel_level(self) -> dict[tuple[int, int, int], Grad2D]:
        if self.pixel is None:
            return {}
        px = self.pixel
        return {
            (int(px.gaussian_id[r]), int(px.pix_i[r]), int(px.pix_j[r])): _as_grad2d(
                px.values[r], self.conic[px.gaussian_row[r]]
            )
            for r in range(len(px))
        }

    @property
    def tile_level(self) -> dict[tuple[int, int], Grad2D]:
        return {
            (int(self.ids[g]), int(t)): _as_grad2d(v, self.conic[g])
            for g, t, v in zip(self.tile_rows, self.tile_ids, self.tile_values)
        }

    @property
    def gaussian2d_level(self) -> dict[int, Grad2D]:
        if self.gaussian2d is None:
            return {}
        touched = np.any(self.gaussian2d != 0, axis=1)
        return {int(self.ids[g]): _as_grad2d(self.gaussian2d[g], self.conic[g]) for g in np.flatnonzero(touched)}

    def cov2d_grads(self) -> np.ndarray:
        return conic_to_cov_grad(self.gaussian2d[:, G_CONIC], self.conic)

    @property
    def gaussian3d_level(self) -> dict[int, tuple[np.ndarray, ...]]:
        if self.gaussian3d is None:
            return {}
        g = self.gaussian3d
        return {
            int(self.ids[r]): (g.dL_dmean[r], g.dL_dscale[r], g.dL_drotation[r], float(g.dL_dopacity[r]), g.dL_dcolor[r])
            for r in range(len(self.ids))
        }


def backward_pixel(
    log: list[tuple[int, float, float, np.ndarray]],
    T_final: float,
    dL_dC,
    dL_dD: float,
    g2ds: dict,
    pixel,
    background=(0.0, 0.0, 0.0),
) -> dict[int, Grad2D]:
    """Back-to-front gradients for one pixel from its contribution log.

    ``g2ds`` maps Gaussian id to :class:`Gaussian2D`.  Transmittance is recovered
    by dividing ``T_final`` back through ``1 - alpha`` instead of being read from
    the log.
    """
    dL_dC = np.asarray(dL_dC, dtype=np.float64)
    bg = np.asarray(background, dtype=np.float64)
    px = np.asarray(pixel, dtype=np.float64)
    acc_d = sum(T * a * g2ds[gid].depth for gid, a, T, _ in log)
    weight = 1.0 - T_final
    has_depth = weight > DEPTH_NORM_EPS
    D = acc_d / weight if has_depth else 0.0
    out: dict[int, Grad2D] = {}
    T = T_final
    S = np.zeros(3)
    Sd = 0.0
    for gid, a, _, _ in reversed(log):
        g = g2ds[gid]
        if 1.0 - a < MIN_ONE_MINUS_ALPHA:
            raise FloatingPointError("1 - alpha below 1e-6")
        T = T / (1.0 - a)
        dC = T * g.color - (S + T_final * bg) / (1.0 - a)
        dla = float(dC @ dL_dC)
        if has_depth:
            dA = T * g.depth - Sd / (1.0 - a)
            dla += (dA - D * T_final / (1.0 - a)) / weight * dL_dD
        d = px - g.mean2d
        G = float(np.exp(-0.5 * d @ g.inv_cov2d @ d))
        raw = g.opacity * G
        g_raw = dla if raw <= 0.999 else 0.0
        g_pow = raw * g_raw
        Q = g.inv_cov2d
        g_mean = g_pow * (Q @ d)
        g_conic = np.array([-0.5 * d[0] ** 2, -d[0] * d[1], -0.5 * d[1] ** 2]) * g_pow
        out[gid] = Grad2D(
            dL_dcolor=T * a * dL_dC,
            dL_dalpha=dla,
            dL_dmean2d=g_mean,
            dL_dcov2d=conic_to_cov_grad(g_conic, Q),
            dL_dopacity=G * g_raw,
            dL_ddepth=(T * a / weight * dL_dD) if has_depth else 0.0,
        )
        S = S + T * a * g.color
        Sd += T * a * g.depth
    return out


def render_backward(record: RenderRecord, loss_grads: LossGradients, keep_pixel_level: bool = False) -> GradientSet:
    """Rendering backpropagation followed by tile- and Gaussian-level aggregation."""
    proj = record.proj
    parts = [
        _backward_chunk(ch, proj, loss_grads, record.cfg.background, record.depth_acc, record.T_final)
        for ch in record.chunks
    ]
    gs = GradientSet(ids=proj.ids.copy(), conic=proj.conic.copy())
    gs.T_recovered = [p.T_recovered for p in parts]
    if keep_pixel_level:
        gs.pixel = pixel_records(parts, record)
    return aggregate_tiles(gs, parts, len(proj))


def pixel_records(parts: list[ChunkGradients], record: RenderRecord) -> PixelRecords:
    rows, pis, pjs, tiles, vals = [], [], [], [], []
    for p in parts:
        ch = p.chunk
        for b, t in enumerate(ch.tiles):
            sel = ch.incl[b] & ch.pix_valid[b][:, None]
            pp, kk = np.nonzero(sel)
            rows.append(ch.rows[b, kk])
            pis.append(ch.pix_i[b, pp])
            pjs.append(ch.pix_j[b, pp])
            tiles.append(np.full(pp.size, t, dtype=np.int64))
            vals.append(p.planes[:, b, pp, kk].T)
    if not rows:
        z = np.zeros(0, np.int64)
        return PixelRecords(z, z, z, z, z, np.zeros((0, G_WIDTH)))
    row = np.concatenate(rows)
    return PixelRecords(
        gaussian_row=row,
        gaussian_id=record.proj.ids[row],
        pix_i=np.concatenate(pis),
        pix_j=np.concatenate(pjs),
        tile=np.concatenate(tiles),
        values=np.concatenate(vals),
    )


def _sum_pixels(planes: np.ndarray) -> np.ndarray:
    """(G, B, P, L) -> (B, L, G), adding pixels left to right so sums never depend on array shape."""
    acc = planes[:, :, 0].copy()
    for p in range(1, planes.shape[2]):
        acc += planes[:, :, p]
    return np.moveaxis(acc, 0, -1)


def aggregate_tiles(gs: GradientSet, parts: list[ChunkGradients], n: int) -> GradientSet:
    """Pixel -> subtile -> tile -> Gaussian sums.

    Each level is summed in a fixed order (row-major pixels, then subtile index),
    so the result does not depend on how subtiles were chunked.
    """
    u_rows, u_tiles, u_units, u_vals = [], [], [], []
    for p in parts:
        ch = p.chunk
        unit_sum = _sum_pixels(p.planes)  # (B, L, G)
        hit = ~ch.pad & ch.incl.any(axis=1)  # (B, L)
        bb, kk = np.nonzero(hit)
        u_rows.append(ch.rows[bb, kk])
        u_tiles.append(ch.tiles[bb])
        u_units.append(ch.units[bb])
        u_vals.append(unit_sum[bb, kk])
    g2 = np.zeros((n, G_WIDTH))
    if u_rows and sum(r.size for r in u_rows):
        rows = np.concatenate(u_rows)
        tiles = np.concatenate(u_tiles)
        units = np.concatenate(u_units)
        vals = np.concatenate(u_vals)
        order = np.lexsort((units, rows, tiles))
        rows, tiles, vals = rows[order], tiles[order], vals[order]
        start = np.flatnonzero(np.r_[True, (tiles[1:] != tiles[:-1]) | (rows[1:] != rows[:-1])])
        gs.tile_rows = rows[start]
        gs.tile_ids = tiles[start]
        gs.tile_values = np.add.reduceat(vals, start, axis=0)
        np.add.at(g2, gs.tile_rows, gs.tile_values)
    gs.gaussian2d = g2
    return gs


def aggregate_gradients(records: PixelRecords, n_gaussians: int, ids=None, conic=None) -> GradientSet:
    """Aggregate arbitrary pixel-level records into tile and Gaussian levels.

    Records are first put in (tile, row-major pixel) order, so the sums do not
    depend on how the input was partitioned or shuffled.
    """
    ids = np.arange(n_gaussians) if ids is None else np.asarray(ids)
    conic = np.tile(np.eye(2), (n_gaussians, 1, 1)) if conic is None else conic
    gs = GradientSet(ids=ids, conic=conic, pixel=records)
    if len(records) == 0:
        gs.gaussian2d = np.zeros((n_gaussians, G_WIDTH))
        return gs
    order = np.lexsort((records.pix_j, records.pix_i, records.gaussian_row, records.tile))
    row = records.gaussian_row[order]
    tile = records.tile[order]
    vals = records.values[order]
    key = np.stack([tile, row], axis=1)
    uniq, inv = np.unique(key, axis=0, return_inverse=True)
    inv = inv.reshape(-1)
    tv = np.zeros((len(uniq), G_WIDTH))
    np.add.at(tv, inv, vals)
    gs.tile_ids = uniq[:, 0]
    gs.tile_rows = uniq[:, 1]
    gs.tile_values = tv
    g2 = np.zeros((n_gaussians, G_WIDTH))
    np.add.at(g2, gs.tile_rows, tv)
    gs.gaussian2d = g2
    return gs


# ---------------------------------------------------------------------------
# preprocessing backprop


def merge_tree_sum(values: np.ndarray) -> np.ndarray:
    """Sum rows of ``values`` with a balanced binary adder tree."""
    v = np.asarray(values, dtype=np.float64)
    if v.shape[0] == 0:
        return np.zeros(v.shape[1:])
    while v.shape[0] > 1:
        if v.shape[0] % 2:
            v = np.concatenate([v, np.zeros((1,) + v.shape[1:])])
        v = v[0::2] + v[1::2]
    return v[0]


def preprocess_backward(gs: GradientSet, scene: Scene, record: RenderRecord, mode: str = TRACKING) -> GradientSet:
    """Chain Gaussian-level 2D gradients to 3D parameters and, in tracking mode, to the pose.

    The pose gradient is for the left perturbation ``p_cam -> Exp(w) p_cam + v``
    and is ordered ``(w, v)``.
    """
    proj = record.proj
    g2 = gs.gaussian2d
    valid = proj.valid
    n = len(proj)
    intr = proj.intr
    p = proj.p_cam
    z = np.where(valid, p[:, 2], 1.0)
    x, y = p[:, 0], p[:, 1]

    G_cov = conic_to_cov_grad(g2[:, G_CONIC], proj.conic)
    g_mean2d = g2[:, G_MEAN2D]

    dLdp = np.zeros((n, 3))
    dLdp[:, 0] += g_mean2d[:, 0] * intr.fx / z
    dLdp[:, 1] += g_mean2d[:, 1] * intr.fy / z
    dLdp[:, 2] += -g_mean2d[:, 0] * intr.fx * x / z**2 - g_mean2d[:, 1] * intr.fy * y / z**2
    dLdp[:, 2] += g2[:, G_DEPTH]

    J = proj.J
    G_J = 2.0 * G_cov @ J @ proj.cov_cam
    dLdp[:, 0] += G_J[:, 0, 2] * (-intr.fx / z**2)
    dLdp[:, 1] += G_J[:, 1, 2] * (-intr.fy / z**2)
    dLdp[:, 2] += (
        G_J[:, 0, 0] * (-intr.fx / z**2)
        + G_J[:, 0, 2] * (2.0 * intr.fx * x / z**3)
        + G_J[:, 1, 1] * (-intr.fy / z**2)
        + G_J[:, 1, 2] * (2.0 * intr.fy * y / z**3)
    )
    G_cam = np.swapaxes(J, 1, 2) @ G_cov @ J
    W = proj.W
    G_sigma = W.T @ G_cam @ W

    dLdp[~valid] = 0.0
    G_cam[~valid] = 0.0
    G_sigma[~valid] = 0.0

    Rg = quat_to_rotmat(scene.rotations)
    inner = np.swapaxes(Rg, 1, 2) @ G_sigma @ Rg
    d_scale = 2.0 * scene.scales * np.diagonal(inner, axis1=1, axis2=2)
    d_rot = rotation_tangent_grad(G_sigma, proj.cov3d)
    gs.gaussian3d = Gaussian3DGrads(
        dL_dmean=dLdp @ W,
        dL_dscale=d_scale,
        dL_drotation=d_rot,
        dL_dopacity=np.where(valid, g2[:, G_OPACITY], 0.0),
        dL_dcolor=np.where(valid[:, None], g2[:, G_COLOR], 0.0),
    )
    if mode == TRACKING:
        contrib = np.zeros((n, 6))
        contrib[:, :3] = np.cross(p, dLdp) + rotation_tangent_grad(G_cam, proj.cov_cam)
        contrib[:, 3:] = dLdp
        contrib[~valid] = 0.0
        gs.pose_contrib = contrib
        gs.pose_level = merge_tree_sum(contrib)
    elif mode != MAPPING:
        raise ValueError(f"unknown mode {mode!r}")
    return gs


def backward(record: RenderRecord, loss_grads: LossGradients, scene: Scene, mode: str = TRACKING, keep_pixel_level: bool = False) -> GradientSet:
    gs = render_backward(record, loss_grads, keep_pixel_level=keep_pixel_level)
    return preprocess_backward(gs, scene, record, mode)


def dump_gradients(path, gs: GradientSet) -> None:
    """Line-oriented dump: ``<id> <level> <values...>``."""
    lines = []
    if gs.gaussian2d is not None:
        for r in range(len(gs.ids)):
            lines.append(f"{int(gs.ids[r])} g2d " + " ".join(repr(float(v)) for v in gs.gaussian2d[r]))
    for r, t, v in zip(gs.tile_rows, gs.tile_ids, gs.tile_values):
        lines.append(f"{int(gs.ids[r])} tile{int(t)} " + " ".join(repr(float(x)) for x in v))
    if gs.gaussian3d is not None:
        g = gs.gaussian3d
        for r in range(len(gs.ids)):
            vals = [*g.dL_dmean[r], *g.dL_dscale[r], *g.dL_drotation[r], g.dL_dopacity[r], *g.dL_dcolor[r]]
            lines.append(f"{int(gs.ids[r])} g3d " + " ".join(repr(float(v)) for v in vals))
    if gs.pose_level is not None:
        lines.append("-1 pose " + " ".join(repr(float(v)) for v in gs.pose_level))
    Path(path).write_text("\n".join(lines) + "\n")


def read_gradient_dump(path) -> dict[tuple[int, str], np.ndarray]:
    out = {}
    for ln in Path(path).read_text().splitlines():
        if not ln.strip():
            continue
        parts = ln.split()
        out[(int(parts[0]), parts[1])] = np.array([float(v) for v in parts[2:]])
    return out
