"""Cycle-approximate model of the rendering and backpropagation accelerator.

Timing is driven by traces only.  Gradient values pass through the merge model
solely to check that both merge modes produce the same sums.

Phases of one optimizer iteration, simulated back to back:

* render: 16 rendering engines take 4x4 subtiles; each engine has 8 lanes and
  a lane serves a pair of pixels with two issue slots per cycle;
* bp: the backward pipeline of the same engines, alpha-gradient stage shared
  per pixel pair, covariance/position stages per pixel;
* merge: per-Gaussian gradient accumulation, atomic adds or a clustered
  reduction tree feeding an id-keyed stage buffer;
* preprocess: per-Gaussian backward on 16 processing elements plus, while
  tracking, a pose merging tree.
"""
from __future__ import annotations

import csv
import heapq
import itertools
import json
import math
from collections import Counter
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from ..scene import TileLayout
from .trace import MAPPING, PIXELS, TRACKING, FrameTrace, IterationTrace, TraceError, WorkTrace

TOGGLES = ("streaming", "pairing", "rb_reuse", "gmu")
ADJACENT = np.arange(PIXELS).reshape(PIXELS // 2, 2)


@dataclass(frozen=True)
class LatencyModel:
    """Stage latencies in cycles."""

    alpha_compute: int = 12
    alpha_blend: int = 3
    bp_alpha_grad_baseline: int = 20
    bp_alpha_grad_reused: int = 4
    bp_cov_pos_grad: int = 8
    gmu_adder_stage: int = 1
    atomic_commits_per_cycle: int = 1  # same-address adds committed per cycle
    benes_stage: int = 1
    pbc_latency: int = 8
    merge_tree_stage: int = 1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not isinstance(v, (int, np.integer)) or v <= 0:
                raise ValueError(f"{f.name} must be a positive integer, got {v!r}")
        if self.bp_alpha_grad_reused >= self.bp_alpha_grad_baseline:
            raise ValueError("reused alpha-gradient latency must be below the baseline")

    @property
    def render_fill(self) -> int:
        return self.alpha_compute + self.alpha_blend


@dataclass(frozen=True)
class SimConfig:
    """Feature toggles and structural parameters."""

    streaming: bool = True
    pairing: bool = True
    rb_reuse: bool = True
    gmu: bool = True
    num_re: int = 16
    lanes_per_re: int = 8
    gmu_groups: int = 4
    lane_width: int = 1
    stage_buffer_entries: int = 256
    evict_lookahead: int = 64
    num_pe: int = 16

    def __post_init__(self):
        if self.lanes_per_re * 2 != PIXELS:
            raise ValueError("each lane serves two pixels of a 16-pixel subtile")
        if self.num_re < 1 or self.num_pe < 1 or self.lane_width < 1:
            raise ValueError("unit counts must be positive")
        if self.num_re % self.gmu_groups:
            raise ValueError("engines must split evenly into merge groups")
        if self.stage_buffer_entries < self.num_re * self.lane_width:
            raise ValueError("stage buffer must hold at least one cycle of adds")
        if self.evict_lookahead < 0:
            raise ValueError("evict_lookahead must be non-negative")

    @property
    def tree_levels(self) -> int:
        return math.ceil(math.log2(self.num_re // self.gmu_groups * self.lane_width))

    def toggles(self) -> dict[str, bool]:
        return {t: bool(getattr(self, t)) for t in TOGGLES}


# ---------------------------------------------------------------------------
# pairing


@dataclass
class PairConfig:
    """Per-subtile pixel pairs for the 8 lanes; subtiles without an entry use adjacent pairs.

    Each row is ``(light, heavy)``: the i-th earliest and i-th latest completer.
    """

    table: dict[int, np.ndarray] = field(default_factory=dict)

    def valid(self, subtile: int) -> bool:
        return subtile in self.table

    def pairs_for(self, subtile: int) -> np.ndarray:
        return self.table.get(subtile, ADJACENT)


def pairs_from_order(order) -> np.ndarray:
    order = np.asarray(order, dtype=np.int64)
    if order.shape != (PIXELS,) or not np.array_equal(np.sort(order), np.arange(PIXELS)):
        raise ValueError("completion order must be a permutation of the 16 subtile pixels")
    fifo = order[: PIXELS // 2]
    lifo = order[PIXELS // 2 :]
    # popping both buffers together matches the earliest light pixel with the latest heavy one
    return np.stack([fifo, lifo[::-1]], axis=1)


def update_pair_config(orders: dict[int, np.ndarray], config: PairConfig | None = None) -> PairConfig:
    """Pairs for the next iteration from per-subtile completion orders."""
    out = PairConfig(dict(config.table) if config is not None else {})
    for s, order in orders.items():
        out.table[int(s)] = pairs_from_order(order)
    return out


def completion_order(counts) -> np.ndarray:
    """Pixel ranks by the cycle their last fragment retires on a dedicated slot.

    That cycle is the fragment count, so this is a stable sort by count with
    ties going to the lower pixel index.
    """
    counts = np.asarray(counts)
    return np.lexsort((np.arange(counts.size), counts))


# ---------------------------------------------------------------------------
# engine scheduling


def subtile_schedule(layout: TileLayout) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Subtile processing order (tile by tile), the tile of each, and its slot inside the tile."""
    per = layout.tile_size // layout.subtile_size
    sid = np.arange(layout.num_subtiles)
    sy, sx = np.divmod(sid, layout.subtiles_x)
    tile = (sy // per) * layout.tiles_x + sx // per
    slot = (sy % per) * per + sx % per
    order = np.lexsort((slot, tile))
    return order, tile[order], slot[order]


def schedule_engines(durations: np.ndarray, waves: np.ndarray, streaming: bool, num_re: int) -> tuple[int, np.ndarray]:
    """Makespan and per-engine busy cycles for subtiles taken in the given order.

    Streaming: a free engine pulls the next subtile at once.  Otherwise every
    wave (one tile) waits for its slowest subtile before the next begins.
    """
    busy = np.zeros(num_re, dtype=np.int64)
    if durations.size == 0:
        return 0, busy
    if streaming:
        heap = [(0, r) for r in range(num_re)]
        end = 0
        for d in durations:
            t, r = heapq.heappop(heap)
            busy[r] += d
            heapq.heappush(heap, (t + int(d), r))
            end = max(end, t + int(d))
        return end, busy
    total = 0
    starts = np.flatnonzero(np.r_[True, waves[1:] != waves[:-1]])
    for a, b in zip(starts, np.r_[starts[1:], durations.size]):
        w = durations[a:b]
        if w.size > num_re:
            raise ValueError("a wave holds more subtiles than there are engines")
        busy[: w.size] += w
        total += int(w.max())
    return total, busy


@dataclass
class PhaseResult:
    cycles: int
    busy: np.ndarray
    issue_slots: int = 0


def _check(it: IterationTrace, layout: TileLayout) -> None:
    FrameTrace(0, False, layout.width, layout.height, [it]).validate(layout)


def _pair_sums(counts: np.ndarray, pairs: PairConfig | None, subtiles: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    P = np.stack([ADJACENT if pairs is None else pairs.pairs_for(int(s)) for s in subtiles])
    rows = np.arange(len(subtiles))[:, None]
    a = counts[rows, P[:, :, 0]]
    b = counts[rows, P[:, :, 1]]
    return a, b


def render_subtile_cycles(counts: np.ndarray, pairs: PairConfig | None, lat: LatencyModel, subtiles=None) -> np.ndarray:
    """Cycles each subtile occupies an engine in the render phase.

    Without pairs each pixel owns one issue slot; with pairs a lane's two slots
    serve whichever of its pixels still has fragments.
    """
    counts = np.asarray(counts, dtype=np.int64)
    subtiles = np.arange(len(counts)) if subtiles is None else subtiles
    if pairs is None:
        work = counts.max(axis=1, initial=0)
    else:
        a, b = _pair_sums(counts, pairs, subtiles)
        work = (-(-(a + b) // 2)).max(axis=1)
    return work + lat.render_fill * (work > 0)


def bp_subtile_cycles(counts: np.ndarray, pairs: PairConfig | None, reuse: bool, lat: LatencyModel, subtiles=None) -> np.ndarray:
    """Cycles each subtile occupies an engine in the backward phase.

    Per lane the shared alpha-gradient unit handles both pixels' fragments and
    the covariance/position units handle one fragment per pixel at a time
    (either pixel's when the lane is paired); the slower stage bounds throughput.
    """
    counts = np.asarray(counts, dtype=np.int64)
    subtiles = np.arange(len(counts)) if subtiles is None else subtiles
    la = lat.bp_alpha_grad_reused if reuse else lat.bp_alpha_grad_baseline
    cp = lat.bp_cov_pos_grad
    a, b = _pair_sums(counts, pairs, subtiles)
    per_pixel = -(-(a + b) // 2) if pairs is not None else np.maximum(a, b)
    work = np.maximum(la * (a + b), cp * per_pixel).max(axis=1)
    return work + (la + cp) * (work > 0)


def simulate_render_phase(
    it: IterationTrace,
    layout: TileLayout,
    pairs: PairConfig | None,
    streaming: bool,
    lat: LatencyModel = LatencyModel(),
    num_re: int = 16,
) -> tuple[PhaseResult, dict[int, np.ndarray]]:
    """Render-phase cycles and the per-subtile completion orders for pairing feedback."""
    _check(it, layout)
    order, waves, _ = subtile_schedule(layout)
    cyc = render_subtile_cycles(it.counts[order], pairs, lat, order)
    total, busy = schedule_engines(cyc, waves, streaming, num_re)
    orders = {int(s): completion_order(it.counts[s]) for s in range(it.num_subtiles)}
    return PhaseResult(total, busy, it.fragment_total), orders


def simulate_bp_phase(
    it: IterationTrace,
    layout: TileLayout,
    reuse_rb: bool,
    pairs: PairConfig | None = None,
    streaming: bool = False,
    lat: LatencyModel = LatencyModel(),
    num_re: int = 16,
) -> PhaseResult:
    _check(it, layout)
    order, waves, _ = subtile_schedule(layout)
    cyc = bp_subtile_cycles(it.counts[order], pairs, reuse_rb, lat, order)
    total, busy = schedule_engines(cyc, waves, streaming, num_re)
    return PhaseResult(total, busy, it.fragment_total)


# ---------------------------------------------------------------------------
# gradient merging


@dataclass
class MergeResult:
    cycles: int
    issue_cycles: int
    stalls: int = 0
    conflicts: int = 0
    spills: int = 0
    merged: dict[int, float] | None = None


def merge_groups(streams: list[np.ndarray], layout: TileLayout | None = None, num_lanes: int = 16, values=None):
    """Split per-subtile streams into tiles of up to ``num_lanes`` lanes.

    Merging proceeds tile by tile; a subtile's lane is its slot inside the tile
    (or its index modulo the lane count without a layout), so the assignment
    does not depend on how the engines were scheduled.
    """
    if layout is not None:
        if len(streams) != layout.num_subtiles:
            raise TraceError("gradient streams do not match the layout")
        order, tiles, slot = subtile_schedule(layout)
    else:
        order = np.arange(len(streams))
        tiles, slot = np.divmod(order, num_lanes)
    groups: list[tuple[list[list[int]], list[list[float]] | None]] = []
    for t in np.unique(tiles):
        ids = [[] for _ in range(num_lanes)]
        vals = [[] for _ in range(num_lanes)] if values is not None else None
        for s, lane in zip(order[tiles == t], slot[tiles == t]):
            ids[lane % num_lanes].extend(np.asarray(streams[s], dtype=np.int64).tolist())
            if vals is not None:
                vals[lane % num_lanes].extend(np.asarray(values[s], dtype=np.float64).tolist())
        if any(ids):
            groups.append((ids, vals))
    return groups


def _atomic(groups, width: int, per_addr: int, acc: dict):
    cycles = conflicts = 0
    for lanes, vals in groups:
        heads = [0] * len(lanes)
        lens = [len(x) for x in lanes]
        active = [l for l in range(len(lanes)) if lens[l]]
        while active:
            cycles += 1
            used: dict[int, int] = {}
            for l in active:
                lane = lanes[l]
                for _ in range(width):
                    h = heads[l]
                    if h >= lens[l]:
                        break
                    g = lane[h]
                    c = used.get(g, 0)
                    if c >= per_addr:
                        conflicts += 1
                        break
                    used[g] = c + 1
                    heads[l] = h + 1
                    if vals is not None:
                        acc.setdefault(g, []).append(vals[l][h])
            active = [l for l in active if heads[l] < lens[l]]
    return cycles, conflicts


def _next_same(lane: list[int]) -> list[int]:
    """For each position, the next position holding the same id (or ``len(lane)``)."""
    a = np.asarray(lane, dtype=np.int64)
    out = np.full(a.size, a.size, dtype=np.int64)
    if a.size:
        order = np.argsort(a, kind="stable")
        same = a[order[1:]] == a[order[:-1]]
        out[order[:-1][same]] = order[1:][same]
    return out.tolist()


class _StageBuffer:
    """Id-keyed partial sums; an id is freed (written back) once its last add has arrived."""

    def __init__(self, capacity: int, lookahead: int, remaining: Counter):
        self.capacity = capacity
        self.lookahead = lookahead
        self.remaining = remaining
        self.live: dict[int, None] = {}
        self.stalls = 0
        self.spills = 0

    def run_group(self, lanes, vals, width: int, acc: dict) -> int:
        n = len(lanes)
        heads = [0] * n
        lens = [len(x) for x in lanes]
        nxt = [_next_same(lane) for lane in lanes]
        big = max(lens) + self.lookahead + 1
        # per id, its next position in every lane of this tile (``big`` if none)
        nextpos: dict[int, list[int]] = {}
        for l, lane in enumerate(lanes):
            for p in range(len(lane) - 1, -1, -1):
                nextpos.setdefault(lane[p], [big] * n)[l] = p
        live, remaining = self.live, self.remaining
        cycles = 0
        active = [l for l in range(n) if lens[l]]
        while active:
            batch: dict[int, None] = {}
            for l in active:
                for h in range(heads[l], min(heads[l] + width, lens[l])):
                    batch[lanes[l][h]] = None
            new = [g for g in batch if g not in live]
            need = len(live) + len(new) - self.capacity
            if need > 0:
                cand = [g for g in live if g not in batch]
                far_away = [big] * n
                dist = (np.array([nextpos.get(g, far_away) for g in cand]) - np.array(heads)).min(axis=1)
                order = np.lexsort((np.array(cand), -dist))
                far = [cand[i] for i in order if dist[i] > self.lookahead][:need]
                for g in far:
                    del live[g]
                self.spills += len(far)
                need -= len(far)
                if need > 0:
                    # back-pressure: hold the engines one cycle while entries spill
                    cycles += 1
                    self.stalls += 1
                    for i in [i for i in order if cand[i] in live][:need]:
                        del live[cand[i]]
                        self.spills += 1
                    continue
            for g in new:
                live[g] = None
            cycles += 1
            for l in active:
                stop = min(heads[l] + width, lens[l])
                lane = lanes[l]
                for h in range(heads[l], stop):
                    g = lane[h]
                    remaining[g] -= 1
                    q = nxt[l][h]
                    nextpos[g][l] = q if q < lens[l] else big
                    if vals is not None:
                        acc.setdefault(g, []).append(vals[l][h])
                    if remaining[g] == 0:
                        live.pop(g, None)
                heads[l] = stop
            active = [l for l in active if heads[l] < lens[l]]
        return cycles


def simulate_gradient_merge(
    streams: list[np.ndarray],
    mode: str,
    cfg: SimConfig = SimConfig(),
    lat: LatencyModel = LatencyModel(),
    layout: TileLayout | None = None,
    values: list[np.ndarray] | None = None,
) -> MergeResult:
    """Cycles to accumulate per-Gaussian gradients from per-subtile id streams.

    Both modes pay the same drain latency (permutation stage plus tree depth),
    so they differ only in how same-id adds are serialized.  With ``values``
    the merged sum per id is returned; sums use ``math.fsum``, which is exact
    and hence independent of the order either mode commits in.
    """
    if mode not in ("gmu", "atomic"):
        raise ValueError(f"unknown merge mode {mode!r}")
    groups = merge_groups(streams, layout, cfg.num_re, values)
    drain = lat.benes_stage + cfg.tree_levels * lat.gmu_adder_stage
    acc: dict[int, list[float]] = {}
    if not groups:
        return MergeResult(0, 0, merged={} if values is not None else None)
    if mode == "atomic":
        issue, conflicts = _atomic(groups, cfg.lane_width, lat.atomic_commits_per_cycle, acc)
        res = MergeResult(issue + drain, issue, conflicts=conflicts)
    else:
        remaining = Counter(g for lanes, _ in groups for lane in lanes for g in lane)
        buf = _StageBuffer(cfg.stage_buffer_entries, cfg.evict_lookahead, remaining)
        issue = sum(buf.run_group(lanes, vals, cfg.lane_width, acc) for lanes, vals in groups)
        res = MergeResult(issue + drain, issue, stalls=buf.stalls, spills=buf.spills)
    if values is not None:
        res.merged = {g: math.fsum(v) for g, v in sorted(acc.items())}
    return res


def simulate_preprocess_bp(gaussians: int, mode: str, lat: LatencyModel = LatencyModel(), num_pe: int = 16) -> int:
    """Cycles for the per-Gaussian backward on pipelined processing elements."""
    if mode not in (TRACKING, MAPPING):
        raise ValueError(f"unknown mode {mode!r}")
    if gaussians <= 0:
        return 0
    cycles = -(-gaussians // num_pe) + lat.pbc_latency - 1
    if mode == TRACKING:
        cycles += math.ceil(math.log2(num_pe)) * lat.merge_tree_stage
    return cycles


# ---------------------------------------------------------------------------
# reports


@dataclass
class CycleReport:
    """Cycle totals over a trace.

    ``render_bp_cycles`` is backward compute plus gradient merging; per-engine
    busy and idle lists always sum to the phase total.
    """

    config: dict
    frames: int = 0
    iterations: int = 0
    render_cycles: int = 0
    bp_cycles: int = 0
    merge_cycles: int = 0
    preprocess_cycles: int = 0
    render_busy: list = field(default_factory=list)
    bp_busy: list = field(default_factory=list)
    gmu_cycles: int = 0
    atomic_cycles: int = 0
    merge_stalls: int = 0
    merge_spills: int = 0
    atomic_conflicts: int = 0
    issue_slots: int = 0
    speedups: dict = field(default_factory=dict)

    @property
    def render_bp_cycles(self) -> int:
        return self.bp_cycles + self.merge_cycles

    @property
    def total_cycles(self) -> int:
        return self.render_cycles + self.bp_cycles + self.merge_cycles + self.preprocess_cycles

    @property
    def render_idle(self) -> list[int]:
        return [self.render_cycles - b for b in self.render_busy]

    @property
    def bp_idle(self) -> list[int]:
        return [self.bp_cycles - b for b in self.bp_busy]

    @staticmethod
    def _imbalance(busy) -> float:
        b = np.asarray(busy, dtype=np.float64)
        if b.size == 0 or b.mean() == 0:
            return 0.0
        return float((b.max() - b.mean()) / b.mean())

    @property
    def render_imbalance(self) -> float:
        return self._imbalance(self.render_busy)

    @property
    def bp_imbalance(self) -> float:
        return self._imbalance(self.bp_busy)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k in ("render_bp_cycles", "total_cycles", "render_idle", "bp_idle", "render_imbalance", "bp_imbalance"):
            d[k] = getattr(self, k)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


REPORT_FIELDS = sorted(CycleReport(config={}).to_dict())


def resolved_config(cfg: SimConfig, lat: LatencyModel) -> dict:
    return {"sim": asdict(cfg), "latency": asdict(lat)}


class Simulator:
    """Runs traces through the phase models, caching merge results per iteration."""

    def __init__(self, cfg: SimConfig = SimConfig(), lat: LatencyModel = LatencyModel()):
        self.cfg = cfg
        self.lat = lat
        self._merge: dict[tuple[int, str], MergeResult] = {}

    def with_config(self, cfg: SimConfig) -> "Simulator":
        sim = Simulator(cfg, self.lat)
        sim._merge = self._merge
        return sim

    def merge(self, it: IterationTrace, layout: TileLayout, mode: str) -> MergeResult:
        key = (id(it), mode)
        if key not in self._merge:
            self._merge[key] = simulate_gradient_merge(it.grads, mode, self.cfg, self.lat, layout)
        return self._merge[key]

    def run_frame(self, frame: FrameTrace, report: CycleReport | None = None) -> CycleReport:
        cfg, lat = self.cfg, self.lat
        report = report or self.empty_report()
        layout = frame.layout
        frame.validate(layout)
        pairs = PairConfig()  # no pairing feedback at the start of a frame
        for it in frame.iterations:
            use = pairs if cfg.pairing else None
            r, orders = simulate_render_phase(it, layout, use, cfg.streaming, lat, cfg.num_re)
            b = simulate_bp_phase(it, layout, cfg.rb_reuse, use, cfg.streaming, lat, cfg.num_re)
            gm = self.merge(it, layout, "gmu")
            at = self.merge(it, layout, "atomic")
            report.render_cycles += r.cycles
            report.bp_cycles += b.cycles
            report.render_busy = (np.asarray(report.render_busy, dtype=np.int64) + r.busy).tolist()
            report.bp_busy = (np.asarray(report.bp_busy, dtype=np.int64) + b.busy).tolist()
            report.gmu_cycles += gm.cycles
            report.atomic_cycles += at.cycles
            report.merge_cycles += gm.cycles if cfg.gmu else at.cycles
            report.merge_stalls += gm.stalls
            report.merge_spills += gm.spills
            report.atomic_conflicts += at.conflicts
            report.preprocess_cycles += simulate_preprocess_bp(it.gaussians, it.mode, lat, cfg.num_pe)
            report.issue_slots += r.issue_slots
            report.iterations += 1
            if cfg.pairing:
                pairs = update_pair_config(orders, pairs)
        report.frames += 1
        return report

    def run(self, trace: WorkTrace | FrameTrace) -> CycleReport:
        frames = [trace] if isinstance(trace, FrameTrace) else trace.frames
        report = self.empty_report()
        for fr in frames:
            self.run_frame(fr, report)
        return report

    def empty_report(self) -> CycleReport:
        z = [0] * self.cfg.num_re
        return CycleReport(config=resolved_config(self.cfg, self.lat), render_busy=list(z), bp_busy=list(z))


def simulate_trace(trace, cfg: SimConfig = SimConfig(), lat: LatencyModel = LatencyModel()) -> CycleReport:
    return Simulator(cfg, lat).run(trace)


# ---------------------------------------------------------------------------
# toggle sweeps


@dataclass
class SweepRow:
    toggles: dict
    report: CycleReport

    def as_csv_row(self, base_total: int) -> dict:
        r = self.report
        row = {t: int(self.toggles[t]) for t in TOGGLES}
        row.update(
            render=r.render_cycles,
            bp=r.bp_cycles,
            merge=r.merge_cycles,
            preprocess=r.preprocess_cycles,
            total=r.total_cycles,
            render_imbalance=round(r.render_imbalance, 6),
            speedup=round(base_total / r.total_cycles, 6) if r.total_cycles else 0.0,
        )
        return row


def sweep(trace, base: SimConfig = SimConfig(), lat: LatencyModel = LatencyModel()) -> list[SweepRow]:
    """Simulate all 16 toggle combinations, all-off first."""
    sim = Simulator(base, lat)
    rows = []
    for combo in itertools.product((False, True), repeat=len(TOGGLES)):
        t = dict(zip(TOGGLES, combo))
        rows.append(SweepRow(t, sim.with_config(replace(base, **t)).run(trace)))
    speedups = toggle_speedups(rows)
    for row in rows:
        row.report.speedups = speedups
    return rows


def _key(t: dict) -> tuple:
    return tuple(bool(t[k]) for k in TOGGLES)


def toggle_speedups(rows: list[SweepRow]) -> dict[str, float]:
    """Speedup of each toggle alone over all-off, and of each step of the cumulative chain."""
    total = {_key(r.toggles): r.report.total_cycles for r in rows}
    off = (False,) * len(TOGGLES)
    out = {}
    for i, t in enumerate(TOGGLES):
        alone = tuple(j == i for j in range(len(TOGGLES)))
        out[f"{t}_alone"] = total[off] / total[alone] if total[alone] else 0.0
        prev = tuple(j < i for j in range(len(TOGGLES)))
        cur = tuple(j <= i for j in range(len(TOGGLES)))
        out[f"{t}_cumulative"] = total[prev] / total[cur] if total[cur] else 0.0
    out["all"] = total[off] / total[(True,) * len(TOGGLES)] if total[(True,) * len(TOGGLES)] else 0.0
    return out


def monotone_violations(rows: list[SweepRow], metric: str = "total_cycles") -> list[tuple[tuple, tuple, int, int]]:
    """Pairs (without, with one more toggle) where adding the toggle raised ``metric``."""
    val = {_key(r.toggles): getattr(r.report, metric) for r in rows}
    bad = []
    for k, v in val.items():
        for i in range(len(TOGGLES)):
            if not k[i]:
                k2 = k[:i] + (True,) + k[i + 1 :]
                if val[k2] > v:
                    bad.append((k, k2, v, val[k2]))
    return bad


def write_sweep_csv(path, rows: list[SweepRow], config: dict | None = None) -> None:
    """CSV with one row per toggle combination, preceded by ``#`` configuration lines."""
    base_total = next(r.report.total_cycles for r in rows if not any(r.toggles.values()))
    data = [r.as_csv_row(base_total) for r in rows]
    with open(path, "w", newline="") as fh:
        for k, v in sorted((config or {}).items()):
            fh.write(f"# {k} = {json.dumps(v, sort_keys=True)}\n")
        w = csv.DictWriter(fh, fieldnames=list(data[0]))
        w.writeheader()
        w.writerows(data)


def write_speedups_csv(path, speedups: dict[str, float], config: dict | None = None) -> None:
    with open(path, "w", newline="") as fh:
        for k, v in sorted((config or {}).items()):
            fh.write(f"# {k} = {json.dumps(v, sort_keys=True)}\n")
        w = csv.writer(fh)
        w.writerow(["toggle", "speedup"])
        for k in sorted(speedups):
            w.writerow([k, repr(float(speedups[k]))])


def write_report(path, report: CycleReport) -> None:
    Path(path).write_text(report.to_json() + "\n")
