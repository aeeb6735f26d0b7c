"""Work traces for the accelerator model: per-pixel fragment streams and gradient id streams.

A trace is organised frame -> iteration -> subtile.  Each subtile carries the
16 per-pixel fragment counts (after early termination), the Gaussian ids each
pixel blended in depth order, and the id stream its backward pass emits.
"""
from __future__ import annotations

from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from ..scene import TileLayout

PIXELS = 16  # pixels per 4x4 subtile
TRACKING = "tracking"
MAPPING = "mapping"


class TraceError(ValueError):
    pass


def bp_order(counts: np.ndarray) -> np.ndarray:
    """Permutation taking flat fragments (subtile, pixel, depth) to backward emission order.

    Within a subtile, step ``k`` visits every pixel that still has fragments and
    emits its k-th fragment counted from the back.
    """
    counts = np.asarray(counts, dtype=np.int64).reshape(-1, PIXELS)
    flat = counts.ravel()
    total = int(flat.sum())
    sub = np.repeat(np.arange(flat.size) // PIXELS, flat)
    pix = np.repeat(np.arange(flat.size) % PIXELS, flat)
    start = np.repeat(np.cumsum(flat) - flat, flat)
    back = np.repeat(flat, flat) - 1 - (np.arange(total) - start)
    return np.lexsort((pix, back, sub))


@dataclass
class IterationTrace:
    """One optimizer iteration over all subtiles (row-major subtile order).

    ``ids`` holds every blended fragment's Gaussian id, ordered by subtile,
    then pixel, then depth; ``counts`` gives the per-pixel lengths.  Gradient
    streams default to the backward emission order of the same fragments.
    """

    mode: str
    counts: np.ndarray
    ids: np.ndarray
    grad_ids: np.ndarray | None = None
    grad_counts: np.ndarray | None = None

    def __post_init__(self):
        self.counts = np.asarray(self.counts, dtype=np.int64).reshape(-1, PIXELS)
        self.ids = np.asarray(self.ids, dtype=np.int64).ravel()
        if self.mode not in (TRACKING, MAPPING):
            raise TraceError(f"unknown iteration mode {self.mode!r}")
        if np.any(self.counts < 0):
            raise TraceError("negative fragment count")
        if self.ids.size != self.counts.sum():
            raise TraceError("fragment ids do not match counts")
        if (self.grad_ids is None) != (self.grad_counts is None):
            raise TraceError("gradient ids and their per-subtile counts go together")
        if self.grad_ids is not None:
            self.grad_ids = np.asarray(self.grad_ids, dtype=np.int64).ravel()
            self.grad_counts = np.asarray(self.grad_counts, dtype=np.int64).ravel()
            if self.grad_counts.size != len(self.counts) or self.grad_ids.size != self.grad_counts.sum():
                raise TraceError("gradient streams do not match the subtile count")

    @property
    def num_subtiles(self) -> int:
        return len(self.counts)

    @property
    def fragment_total(self) -> int:
        return int(self.ids.size)

    @property
    def explicit_grads(self) -> bool:
        return self.grad_ids is not None

    def fragments(self, s: int) -> list[np.ndarray]:
        """Per-pixel Gaussian ids of subtile ``s`` in depth order."""
        start = int(self.counts[:s].sum())
        ends = start + np.cumsum(self.counts[s])
        return np.split(self.ids[start : int(ends[-1])], ends[:-1] - start)

    @property
    def grads(self) -> list[np.ndarray]:
        """Per-subtile gradient id streams."""
        if self.grad_ids is not None:
            ids, per = self.grad_ids, self.grad_counts
        else:
            ids, per = self.ids[bp_order(self.counts)], self.counts.sum(axis=1)
        return np.split(ids, np.cumsum(per)[:-1])

    @property
    def gaussians(self) -> int:
        """Distinct Gaussians receiving a gradient in this iteration."""
        ids = self.grad_ids if self.grad_ids is not None else self.ids
        return int(np.unique(ids).size)

    @classmethod
    def from_counts(cls, counts, mode: str = TRACKING, fill: int = -1) -> "IterationTrace":
        """Counts only; every fragment gets the placeholder id ``fill``."""
        counts = np.asarray(counts, dtype=np.int64).reshape(-1, PIXELS)
        return cls(mode, counts, np.full(int(counts.sum()), fill, dtype=np.int64))


@dataclass
class FrameTrace:
    frame_id: int
    is_keyframe: bool
    width: int
    height: int
    iterations: list[IterationTrace] = field(default_factory=list)

    @property
    def layout(self) -> TileLayout:
        return TileLayout(self.width, self.height)

    def validate(self, layout: TileLayout | None = None) -> None:
        layout = layout or self.layout
        if (layout.width, layout.height) != (self.width, self.height):
            raise TraceError(f"trace is {self.width}x{self.height} but layout is {layout.width}x{layout.height}")
        off = ~subtile_pixel_mask(layout)
        for k, it in enumerate(self.iterations):
            if it.num_subtiles != layout.num_subtiles:
                raise TraceError(f"iteration {k}: {it.num_subtiles} subtiles, layout has {layout.num_subtiles}")
            if np.any(it.counts[off] != 0):
                raise TraceError(f"iteration {k}: fragments on pixels outside the image")


@dataclass
class WorkTrace:
    frames: list[FrameTrace] = field(default_factory=list)

    def iterations(self):
        for fr in self.frames:
            yield from fr.iterations


def subtile_pixel_mask(layout: TileLayout) -> np.ndarray:
    """(num_subtiles, 16) mask of pixels that lie inside the image."""
    ss = layout.subtile_size
    sid = np.arange(layout.num_subtiles)
    oy, ox = np.divmod(sid, layout.subtiles_x)
    li, lj = np.divmod(np.arange(ss * ss), ss)
    return (oy[:, None] * ss + li < layout.height) & (ox[:, None] * ss + lj < layout.width)


def iteration_from_record(rec, mode: str = TRACKING) -> IterationTrace:
    """Capture the blended fragment streams of a :class:`RenderRecord`."""
    layout = rec.layout
    if layout.subtile_size * layout.subtile_size != PIXELS:
        raise TraceError("traces need 4x4 subtiles")
    counts = np.zeros((layout.num_subtiles, PIXELS), dtype=np.int64)
    keys, ids = [], []
    for ch in rec.chunks:
        b, p, l = np.nonzero(ch.incl)
        unit = ch.units[b]
        counts[ch.units] = ch.incl.sum(axis=2)
        keys.append(np.stack([unit, p, l]))
        ids.append(rec.proj.ids[ch.rows[b, l]])
    if not keys:
        return IterationTrace(mode, counts, np.zeros(0, dtype=np.int64))
    k = np.concatenate(keys, axis=1)
    order = np.lexsort((k[2], k[1], k[0]))
    return IterationTrace(mode, counts, np.concatenate(ids)[order])


class TraceRecorder:
    """Collects one :class:`FrameTrace` per frame from SLAM-loop iteration callbacks.

    ``max_iterations`` keeps only the first iterations of each frame and mode,
    which bounds memory on long runs.
    """

    def __init__(self, max_iterations: int | None = None):
        self.trace = WorkTrace()
        self.max_iterations = max_iterations
        self._seen: Counter = Counter()

    def __call__(self, frame_index: int, is_keyframe: bool, mode: str, rec) -> None:
        key = (frame_index, mode)
        if self.max_iterations is not None and self._seen[key] >= self.max_iterations:
            return
        self._seen[key] += 1
        w, h = rec.layout.width, rec.layout.height
        frames = self.trace.frames
        if not frames or (frames[-1].frame_id, frames[-1].width, frames[-1].height) != (frame_index, w, h):
            frames.append(FrameTrace(frame_index, is_keyframe, w, h))
        frames[-1].iterations.append(iteration_from_record(rec, mode))


# ---------------------------------------------------------------------------
# GTRACE v1 files

MAGIC = "GTRACE v1"


def write_trace(path, trace: WorkTrace, header: dict | None = None) -> None:
    """Write a GTRACE v1 file; ``header`` items become leading ``#`` lines."""
    lines = [MAGIC] + [f"# {k} = {v}" for k, v in sorted((header or {}).items())]
    for fr in trace.frames:
        lines.append(f"frame {fr.frame_id} {int(fr.is_keyframe)} {fr.width} {fr.height} {len(fr.iterations)}")
        for k, it in enumerate(fr.iterations):
            lines.append(f"iteration {k} {it.mode} {it.num_subtiles}")
            for s in range(it.num_subtiles):
                lines.append(f"subtile {s} counts " + " ".join(map(str, it.counts[s].tolist())))
                for p, f in enumerate(it.fragments(s)):
                    if len(f):
                        lines.append(f"px {p} " + " ".join(map(str, f.tolist())))
            lines.append("grads")
            for s, g in enumerate(it.grads):
                lines.append(f"subtile {s} " + " ".join(map(str, g.tolist())))
            lines.append("end")
    Path(path).write_text("\n".join(lines) + "\n")


def read_trace(path) -> WorkTrace:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(path)
    raw = path.read_text().splitlines()
    if not raw or raw[0].strip() != MAGIC:
        raise TraceError(f"{path}: not a {MAGIC} file")
    lines = [(n, ln.split()) for n, ln in enumerate(raw[1:], 2) if ln.strip() and not ln.startswith("#")]
    trace = WorkTrace()
    pos = 0

    def take(expect: str) -> list[str]:
        nonlocal pos
        if pos >= len(lines):
            raise TraceError(f"{path}: truncated trace, expected {expect!r}")
        n, parts = lines[pos]
        if parts[0] != expect:
            raise TraceError(f"{path}:{n}: expected {expect!r}, got {parts[0]!r}")
        pos += 1
        return parts

    try:
        while pos < len(lines):
            parts = take("frame")
            fr = FrameTrace(int(parts[1]), bool(int(parts[2])), int(parts[3]), int(parts[4]))
            for _ in range(int(parts[5])):
                parts = take("iteration")
                mode, S = parts[2], int(parts[3])
                counts = np.zeros((S, PIXELS), dtype=np.int64)
                ids: list[int] = []
                for s in range(S):
                    parts = take("subtile")
                    if parts[1:3] != [str(s), "counts"] or len(parts) != 3 + PIXELS:
                        raise TraceError(f"{path}:{lines[pos - 1][0]}: malformed subtile counts line")
                    counts[s] = list(map(int, parts[3:]))
                    rows = [[] for _ in range(PIXELS)]
                    while pos < len(lines) and lines[pos][1][0] == "px":
                        parts = take("px")
                        rows[int(parts[1])] = list(map(int, parts[2:]))
                    for r in rows:
                        ids.extend(r)
                take("grads")
                gids: list[int] = []
                gcounts = []
                for s in range(S):
                    parts = take("subtile")
                    if parts[1] != str(s):
                        raise TraceError(f"{path}:{lines[pos - 1][0]}: gradient stream out of order")
                    gids.extend(map(int, parts[2:]))
                    gcounts.append(len(parts) - 2)
                take("end")
                fr.iterations.append(IterationTrace(mode, counts, np.array(ids, dtype=np.int64), np.array(gids, dtype=np.int64), np.array(gcounts)))
            trace.frames.append(fr)
    except ValueError as e:
        if isinstance(e, TraceError):
            raise
        raise TraceError(f"{path}: {e}") from None
    return trace


# ---------------------------------------------------------------------------
# synthetic traces


def zipf_counts(rng: np.random.Generator, layout: TileLayout, exponent: float, scale: float, cap: int) -> np.ndarray:
    """Heavy-tailed per-pixel fragment counts: ``scale * Z`` with ``Z`` Zipf distributed."""
    z = rng.zipf(exponent, size=(layout.num_subtiles, PIXELS))
    counts = np.minimum(np.rint(scale * z), cap).astype(np.int64)
    counts[~subtile_pixel_mask(layout)] = 0
    return counts


def _depth_ordered_fragments(rng, counts_row, pool: np.ndarray) -> list[np.ndarray]:
    # each pixel blends an order-preserving random subset of the tile's depth-sorted pool
    out = []
    for n in counts_row:
        if n >= len(pool):
            out.append(np.resize(pool, n))
        else:
            out.append(pool[np.sort(rng.choice(len(pool), size=n, replace=False))])
    return out


def zipf_trace(
    seed: int = 0,
    width: int = 64,
    height: int = 64,
    iterations: int = 3,
    exponent: float = 1.8,
    scale: float = 8.0,
    cap: int = 1024,
    pool: int = 96,
    mode: str = TRACKING,
) -> FrameTrace:
    """One frame whose iterations repeat the same skewed workload.

    Consecutive optimizer iterations on one frame see nearly the same
    fragments, so the counts are held fixed across iterations.
    """
    rng = np.random.default_rng(seed)
    layout = TileLayout(width, height)
    counts = zipf_counts(rng, layout, exponent, scale, cap)
    per = layout.tile_size // layout.subtile_size
    sy, sx = np.divmod(np.arange(layout.num_subtiles), layout.subtiles_x)
    tile = (sy // per) * layout.tiles_x + sx // per
    pools = [np.sort(rng.choice(100_000, size=pool, replace=False)) + t * 100_000 for t in range(layout.num_tiles)]
    ids = np.concatenate(
        [f for s in range(layout.num_subtiles) for f in _depth_ordered_fragments(rng, counts[s], pools[tile[s]])]
    )
    its = [IterationTrace(mode, counts.copy(), ids.copy()) for _ in range(iterations)]
    return FrameTrace(seed, False, width, height, its)


def zipf_suite() -> list[FrameTrace]:
    """The skewed trace suite: light and heavy workloads at two tail exponents."""
    out = []
    for seed, (exponent, scale) in enumerate([(2.0, 6.0), (2.3, 10.0), (2.6, 14.0), (2.6, 90.0), (3.0, 100.0)]):
        out.append(zipf_trace(seed=seed, exponent=exponent, scale=scale))
    return out


def standard_trace() -> WorkTrace:
    """Fixed skewed trace used for toggle sweeps: one tracking and one mapping frame."""
    a = zipf_trace(seed=11, exponent=1.8, scale=8.0, pool=48)
    b = zipf_trace(seed=12, exponent=2.0, scale=10.0, pool=48, mode=MAPPING)
    a.frame_id, b.frame_id, b.is_keyframe = 0, 1, True
    return WorkTrace([a, b])


def clustered_streams(seed: int = 0, subtiles: int = 64, hot: int = 32, length: int = 128, exponent: float = 1.1) -> list[np.ndarray]:
    """Gradient id streams where every tile of 16 subtiles draws from ``hot`` shared ids.

    Popularity within the hot set is Zipf-like with ``exponent``.
    """
    if hot < 1 or hot > 32:
        raise ValueError("hot must be in [1, 32]")
    rng = np.random.default_rng(seed)
    w = 1.0 / np.arange(1, hot + 1) ** exponent
    w /= w.sum()
    ranks = [rng.permutation(hot) for _ in range(-(-subtiles // PIXELS))]
    out = []
    for s in range(subtiles):
        t = s // PIXELS
        ids = ranks[t][rng.choice(hot, size=length, p=w)] + t * 1000
        out.append(ids.astype(np.int64))
    return out
