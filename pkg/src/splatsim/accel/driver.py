"""Host-facing driver: execute a frame, then poll its status."""
from __future__ import annotations

import enum

from .sim import CycleReport, LatencyModel, SimConfig, Simulator
from .trace import FrameTrace


class Status(enum.Enum):
    IDLE = "IDLE"
    EXECUTING = "EXECUTING"
    WAIT_PRUNING = "WAIT_PRUNING"


class ProtocolError(RuntimeError):
    pass


class DriverTimeout(TimeoutError):
    pass


class AcceleratorDriver:
    """One frame in flight at a time.

    Time is counted in simulated cycles.  ``execute`` starts a frame at the
    current cycle and it stays EXECUTING until ``now`` passes its end.  A
    non-keyframe then waits in WAIT_PRUNING until the host calls
    :meth:`acknowledge_pruning`; keyframes skip pruning and go straight to IDLE.
    """

    def __init__(self, cfg: SimConfig = SimConfig(), lat: LatencyModel = LatencyModel(), cycle_budget: int = 10_000_000):
        self.sim = Simulator(cfg, lat)
        self.cycle_budget = cycle_budget
        self.now = 0
        self.frame_id: int | None = None
        self.is_keyframe = False
        self.busy_until = 0
        self.acknowledged = True
        self.reports: dict[int, CycleReport] = {}

    def _state(self) -> Status:
        if self.frame_id is None:
            return Status.IDLE
        if self.now < self.busy_until:
            return Status.EXECUTING
        if not self.is_keyframe and not self.acknowledged:
            return Status.WAIT_PRUNING
        return Status.IDLE

    def execute(self, frame_id: int, is_keyframe: bool, trace: FrameTrace) -> CycleReport:
        state = self._state()
        if state is not Status.IDLE:
            raise ProtocolError(f"execute(frame {frame_id}) while frame {self.frame_id} is {state.value}")
        report = self.sim.run_frame(trace)
        self.frame_id = frame_id
        self.is_keyframe = bool(is_keyframe)
        self.acknowledged = self.is_keyframe
        self.busy_until = self.now + report.total_cycles
        self.reports[frame_id] = report
        return report

    def advance(self, cycles: int) -> None:
        if cycles < 0:
            raise ValueError("cannot move time backwards")
        self.now += cycles

    def acknowledge_pruning(self, frame_id: int) -> None:
        if frame_id != self.frame_id or self._state() is not Status.WAIT_PRUNING:
            raise ProtocolError(f"frame {frame_id} is not waiting for pruning")
        self.acknowledged = True

    def check_status(self, frame_id: int, blocking: bool = False, budget: int | None = None) -> Status:
        """Current state; with ``blocking`` wait (in simulated cycles) until IDLE or the budget runs out."""
        if self.frame_id is not None and frame_id != self.frame_id:
            raise ProtocolError(f"frame {frame_id} is not the frame in flight ({self.frame_id})")
        if not blocking:
            return self._state()
        budget = self.cycle_budget if budget is None else budget
        deadline = self.now + budget
        if self._state() is Status.EXECUTING:
            self.now = min(self.busy_until, deadline)
        state = self._state()
        if state is Status.IDLE:
            return state
        self.now = deadline
        raise DriverTimeout(
            f"frame {frame_id} still {state.value} after {budget} cycles"
            + ("; the host has not acknowledged pruning" if state is Status.WAIT_PRUNING else "")
        )
