"""Cycle counts for every simulator toggle combination on the built-in traces.

    python scripts/sweep.py            # standard skewed trace
    python scripts/sweep.py --suite    # per-trace render and backward ratios on the Zipf suite
"""
import argparse

from splatsim.accel import SimConfig, Simulator, monotone_violations, sweep
from splatsim.accel.trace import standard_trace, zipf_suite


def main():
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--suite", action="store_true")
    args = ap.parse_args()

    if args.suite:
        print(f"{'trace':>5} {'frags/px':>9} {'render':>7} {'bp':>6}")
        for k, fr in enumerate(zipf_suite()):
            per_px = sum(it.fragment_total for it in fr.iterations) / len(fr.iterations) / (fr.width * fr.height)
            render = Simulator(SimConfig(streaming=True, pairing=True)).run(fr).render_cycles
            render_off = Simulator(SimConfig(streaming=False, pairing=False)).run(fr).render_cycles
            bp = Simulator(SimConfig(rb_reuse=True)).run(fr).bp_cycles / Simulator(SimConfig(rb_reuse=False)).run(fr).bp_cycles
            print(f"{k:5d} {per_px:9.1f} {render / render_off:7.3f} {bp:6.3f}")
        return

    rows = sweep(standard_trace())
    names = list(rows[0].toggles)
    print(" ".join(f"{n:>9}" for n in names), f"{'total':>10}")
    for r in rows:
        print(" ".join(f"{int(v):>9}" for v in r.toggles.values()), f"{r.report.total_cycles:>10}")
    bad = monotone_violations(rows)
    print(f"monotonicity violations: {len(bad)}")


if __name__ == "__main__":
    main()
