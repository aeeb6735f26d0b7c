"""Command-line entry point.

Subcommands: ``gen-scene``, ``gen-seq``, ``run``, ``sim`` and ``sweep``.
Configuration flags use the field names of :class:`TrackerConfig`,
:class:`SimConfig` and :class:`LatencyModel` verbatim; ``--config`` reads a
``key = value`` file applied before the flags.

Exit codes: 0 ok, 2 bad input, 3 quality gate failed, 4 internal error.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import sys
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .accel import LatencyModel, SimConfig, Simulator, TraceRecorder, read_trace, sweep, write_trace
from .accel.sim import monotone_violations, resolved_config, write_report, write_speedups_csv, write_sweep_csv
from .accel.trace import TraceError, WorkTrace, standard_trace
from .scene import read_scene, write_scene
from .slam import TrackerConfig, run_sequence
from .synthetic import gen_scene, gen_sequence_frames, read_manifest, write_manifest

log = logging.getLogger("splatsim")

EXIT_OK, EXIT_INPUT, EXIT_QUALITY, EXIT_INTERNAL = 0, 2, 3, 4
CONFIG_CLASSES = (TrackerConfig, SimConfig, LatencyModel)


class InputError(Exception):
    pass


class QualityGate(Exception):
    pass


# ---------------------------------------------------------------------------
# configuration


def _field_types(cls) -> dict[str, type]:
    hints = typing.get_type_hints(cls)
    return {f.name: hints[f.name] for f in dataclasses.fields(cls)}


def parse_value(text: str, tp):
    text = text.strip()
    origin = typing.get_origin(tp)
    if tp is bool:
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if origin is tuple:
        args = typing.get_args(tp)
        parts = [p for p in text.replace("(", "").replace(")", "").replace("x", ",").split(",") if p.strip()]
        if len(parts) != len(args):
            raise ValueError(f"expected {len(args)} comma-separated values, got {text!r}")
        return tuple(parse_value(p, a) for a, p in zip(args, parts))
    if tp is int:
        return int(text)
    if tp is float:
        return float(text)
    return text


def read_config_file(path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise InputError(f"config file not found: {path}")
    out = {}
    for n, line in enumerate(path.read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise InputError(f"{path}:{n}: expected 'key = value'")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def build_configs(overrides: dict[str, str]) -> tuple[TrackerConfig, SimConfig, LatencyModel]:
    known = {}
    for cls in CONFIG_CLASSES:
        for name, tp in _field_types(cls).items():
            known[name] = (cls, tp)
    kwargs: dict[type, dict] = {cls: {} for cls in CONFIG_CLASSES}
    for k, v in overrides.items():
        if k not in known:
            raise InputError(f"unknown configuration key {k!r}")
        cls, tp = known[k]
        try:
            kwargs[cls][k] = parse_value(v, tp)
        except ValueError as e:
            raise InputError(f"{k}: {e}") from None
    try:
        return tuple(cls(**kwargs[cls]) for cls in CONFIG_CLASSES)
    except ValueError as e:
        raise InputError(str(e)) from None


def _add_config_flags(p: argparse.ArgumentParser, classes) -> None:
    g = p.add_argument_group("configuration (field names verbatim)")
    g.add_argument("--config", help="line-oriented 'key = value' file")
    for cls in classes:
        for name in _field_types(cls):
            g.add_argument(f"--{name}", dest=f"cfg__{name}", metavar="V", help=f"{cls.__name__}.{name}")


def _overrides(args) -> dict[str, str]:
    out = read_config_file(args.config) if getattr(args, "config", None) else {}
    for k, v in vars(args).items():
        if k.startswith("cfg__") and v is not None:
            out[k[5:]] = v
    return out


@dataclass
class RunManifest:
    """Everything a ``run`` needs; written into every report."""

    name: str
    sequence: str | None
    seed: int | None
    frames: int | None
    out_dir: str
    tracker: dict = field(default_factory=dict)
    sim: dict = field(default_factory=dict)
    toggles: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _header_lines(config: dict) -> list[str]:
    return [f"# {k} = {json.dumps(v, sort_keys=True)}" for k, v in sorted(config.items())]


def _write_json(path: Path, data: dict) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_scene(args) -> int:
    scene = gen_scene(args.seed, args.count, args.extent, (args.scale_min, args.scale_max), args.layout)
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_scene(out, scene)
    print(f"wrote {len(scene)} gaussians to {out}")
    return EXIT_OK


def cmd_gen_seq(args) -> int:
    if not Path(args.scene).exists():
        raise InputError(f"scene not found: {args.scene}")
    scene = read_scene(args.scene)
    from .synthetic import default_intrinsics

    intr = default_intrinsics(args.width, args.height)
    traj = {"arc_deg": args.arc_deg, "radius": args.radius} if args.trajectory == "orbit" else {"length": args.length}
    try:
        frames = gen_sequence_frames(scene, args.trajectory, args.frames, args.noise, args.seed, intr, **traj)
    except ValueError as e:
        raise InputError(str(e)) from None
    extra = {"scene": args.scene, "trajectory": args.trajectory, "frames": args.frames, "noise": args.noise, "seed": args.seed, **traj}
    path = write_manifest(args.out, frames, extra)
    print(f"wrote {len(frames)} frames and {path}")
    return EXIT_OK


def _load_frames(args):
    if args.manifest:
        if not Path(args.manifest).exists():
            raise InputError(f"manifest not found: {args.manifest}")
        try:
            frames = read_manifest(args.manifest)
        except (ValueError, FileNotFoundError) as e:
            raise InputError(str(e)) from None
    else:
        frames = gen_sequence_frames(gen_scene(args.seed), frames=args.frames or 60)
    return frames[: args.frames] if args.frames else frames


def cmd_run(args) -> int:
    tracker, simcfg, lat = build_configs(_overrides(args))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest(
        name=args.name,
        sequence=args.manifest,
        seed=None if args.manifest else args.seed,
        frames=args.frames,
        out_dir=str(out),
        tracker=tracker.to_dict(),
        sim=resolved_config(simcfg, lat),
        toggles={"pruning": tracker.pruning, "downsampling": tracker.downsampling, **simcfg.toggles()},
    )
    config = manifest.to_dict()
    frames = _load_frames(args)
    want_trace = args.trace or args.sim or args.sweep
    recorder = TraceRecorder(args.trace_iters) if want_trace else None
    report = run_sequence(frames, tracker, recorder=recorder)
    d = report.to_dict()
    d["run"] = config
    _write_json(out / "report.json", d)
    with open(out / "frames.csv", "w", newline="") as fh:
        fh.write("\n".join(_header_lines(config)) + "\n")
        w = csv.writer(fh)
        w.writerow(["frame", "keyframe", "width", "height", "gaussians", "final_loss", "est_x", "est_y", "est_z", "gt_x", "gt_y", "gt_z"])
        kfs = set(report.keyframes)
        for i in range(len(report.final_losses)):
            w.writerow([i, int(i in kfs), *report.resolutions[i], report.gaussian_counts[i], repr(report.final_losses[i]),
                        *map(repr, report.est_positions[i]), *map(repr, report.gt_positions[i])])
    if recorder is not None:
        trace = recorder.trace
        if args.trace:
            write_trace(out / "trace.gtrace", trace, {k: json.dumps(v, sort_keys=True) for k, v in config.items()})
        if args.sim:
            cyc = Simulator(simcfg, lat).run(trace)
            cyc.config = {**cyc.config, "run": config}
            write_report(out / "cycles.json", cyc)
        if args.sweep:
            _sweep_outputs(trace, simcfg, lat, out, config)
    print(f"ATE {report.ate_rmse * 1000:.2f} mm, keyframe PSNR {report.mean_psnr:.2f} dB, {report.gaussian_counts[-1]} gaussians")
    failures = []
    if args.max_ate is not None and not report.ate_rmse <= args.max_ate:
        failures.append(f"ATE {report.ate_rmse:.6f} m exceeds budget {args.max_ate}")
    if args.min_psnr is not None and not report.mean_psnr >= args.min_psnr:
        failures.append(f"keyframe PSNR {report.mean_psnr:.3f} dB below budget {args.min_psnr}")
    if failures:
        raise QualityGate("; ".join(failures))
    return EXIT_OK


def _sweep_outputs(trace, simcfg, lat, out: Path, config: dict) -> list:
    rows = sweep(trace, simcfg, lat)
    write_sweep_csv(out / "ablation.csv", rows, config)
    write_speedups_csv(out / "speedups.csv", rows[-1].report.speedups, config)
    bad = monotone_violations(rows)
    for k, k2, v, v2 in bad:
        log.warning("adding a toggle raised total cycles: %s (%d) -> %s (%d)", k, v, k2, v2)
    return rows


def _load_trace(args) -> WorkTrace:
    if getattr(args, "standard", False):
        return standard_trace()
    if not args.trace:
        raise InputError("give --trace PATH (or --standard for sweeps)")
    if not Path(args.trace).exists():
        raise InputError(f"trace not found: {args.trace}")
    try:
        return read_trace(args.trace)
    except TraceError as e:
        raise InputError(str(e)) from None


def cmd_sim(args) -> int:
    _, simcfg, lat = build_configs(_overrides(args))
    trace = _load_trace(args)
    try:
        report = Simulator(simcfg, lat).run(trace)
    except TraceError as e:
        raise InputError(str(e)) from None
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.config = {**report.config, "trace": args.trace}
    write_report(out / "cycles.json", report)
    print(f"total {report.total_cycles} cycles (render {report.render_cycles}, bp {report.bp_cycles}, "
          f"merge {report.merge_cycles}, preprocess {report.preprocess_cycles})")
    return EXIT_OK


def cmd_sweep(args) -> int:
    _, simcfg, lat = build_configs(_overrides(args))
    trace = _load_trace(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = {**resolved_config(simcfg, lat), "trace": "standard" if args.standard else args.trace}
    try:
        rows = _sweep_outputs(trace, simcfg, lat, out, config)
    except TraceError as e:
        raise InputError(str(e)) from None
    for r in rows:
        on = "+".join(k for k, v in r.toggles.items() if v) or "baseline"
        print(f"{on:32s} {r.report.total_cycles}")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="splatsim", description=__doc__.split("\n\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-scene", help="random Gaussian scene")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--count", type=int, default=500)
    p.add_argument("--extent", type=float, default=1.0)
    p.add_argument("--scale_min", type=float, default=0.04)
    p.add_argument("--scale_max", type=float, default=0.15)
    p.add_argument("--layout", choices=("volume", "surface"), default="volume")
    p.set_defaults(func=cmd_gen_scene)

    p = sub.add_parser("gen-seq", help="render an RGB-D sequence with ground-truth poses")
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--trajectory", choices=("orbit", "line"), default="orbit")
    p.add_argument("--frames", type=int, default=60)
    p.add_argument("--noise", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=48)
    p.add_argument("--arc_deg", type=float, default=30.0)
    p.add_argument("--radius", type=float, default=3.0)
    p.add_argument("--length", type=float, default=0.6)
    p.set_defaults(func=cmd_gen_seq)

    p = sub.add_parser("run", help="track and map a sequence, optionally simulating the accelerator")
    p.add_argument("--manifest", help="sequence manifest from gen-seq; omitted: generate the standard orbit")
    p.add_argument("--seed", type=int, default=0, help="scene seed when no manifest is given")
    p.add_argument("--frames", type=int, help="use only the first N frames")
    p.add_argument("--out", required=True)
    p.add_argument("--name", default="run")
    p.add_argument("--trace", action="store_true", help="write trace.gtrace")
    p.add_argument("--trace_iters", type=int, help="record at most N iterations per frame and mode")
    p.add_argument("--sim", action="store_true", help="simulate the recorded trace")
    p.add_argument("--sweep", action="store_true", help="sweep all simulator toggle combinations")
    p.add_argument("--max_ate", type=float, help="quality gate: maximum ATE-RMSE in metres")
    p.add_argument("--min_psnr", type=float, help="quality gate: minimum mean keyframe PSNR in dB")
    _add_config_flags(p, CONFIG_CLASSES)
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sim", help="simulate a GTRACE file")
    p.add_argument("--trace", required=True)
    p.add_argument("--out", required=True)
    _add_config_flags(p, (SimConfig, LatencyModel))
    p.set_defaults(func=cmd_sim)

    p = sub.add_parser("sweep", help="all 16 simulator toggle combinations")
    p.add_argument("--trace")
    p.add_argument("--standard", action="store_true", help="use the built-in skewed trace")
    p.add_argument("--out", required=True)
    _add_config_flags(p, (SimConfig, LatencyModel))
    p.set_defaults(func=cmd_sweep)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except InputError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except QualityGate as e:
        print(f"quality gate failed: {e}", file=sys.stderr)
        return EXIT_QUALITY
    except Exception as e:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {e}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
