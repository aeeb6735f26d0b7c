"""Cycle-approximate accelerator model driven by renderer traces."""
from .driver import AcceleratorDriver, DriverTimeout, ProtocolError, Status
from .sim import (
    TOGGLES,
    CycleReport,
    LatencyModel,
    PairConfig,
    SimConfig,
    Simulator,
    simulate_bp_phase,
    simulate_gradient_merge,
    simulate_preprocess_bp,
    simulate_render_phase,
    simulate_trace,
    monotone_violations,
    sweep,
    toggle_speedups,
    write_sweep_csv,
    write_report,
    write_speedups_csv,
    update_pair_config,
)
from .trace import FrameTrace, IterationTrace, TraceError, TraceRecorder, WorkTrace, read_trace, write_trace
