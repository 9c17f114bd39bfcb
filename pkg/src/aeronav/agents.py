"""Dual-rate decision/monitoring agents behind pluggable oracle interfaces.

The decision side proposes an image-space target at a high rate; the
monitoring side classifies task state at a low rate from the monitoring
memory. Both consume the same per-frame perception output (computed once per
frame and shared), and the monitoring result only gates execution when it
arrives, so a slow monitor never delays the decision cadence. The default
execution mode is a deterministic virtual-time loop; a thin wall-clock
threaded runner with the same contracts is provided for completeness.

Oracle extension point (for wiring in a live model client): a decision
oracle receives (subtask text, observation, optional history pixel) and
returns a pixel; a monitoring oracle receives (subtask text, ordered memory
slots) and returns one of CONTINUE/STOP/LOST; a decomposer turns an
instruction into subtask texts once per episode.
"""

from __future__ import annotations

import heapq
import logging
import math
import queue as queue_mod
import threading
import time as wallclock
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Protocol

import numpy as np

from .geometry import CameraIntrinsics, Pixel, Pose, project_to_pixel
from .memory import MonitoringMemory
from .verifier import CandidateGoal

logger = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class Observation:
    """One timestep's perception output: feature raster, depth raster, pose."""

    feature_map: np.ndarray
    depth_map: np.ndarray
    pose: Pose
    step: int
    odo_distance: float

    def __post_init__(self) -> None:
        if self.feature_map.shape[:2] != self.depth_map.shape:
            raise ValueError("feature and depth rasters must share dimensions")
        self.feature_map.flags.writeable = False
        self.depth_map.flags.writeable = False


class TaskStatus(Enum):
    CONTINUE = "CONTINUE"
    STOP = "STOP"
    LOST = "LOST"


class DecisionOracle(Protocol):
    def propose_target(
        self, subtask: str, obs: Observation, history: Pixel | None
    ) -> Pixel: ...


class MonitoringOracle(Protocol):
    def assess(self, subtask: str, memory: MonitoringMemory) -> TaskStatus: ...


class Decomposer(Protocol):
    def decompose(self, instruction: str) -> list[str]: ...


class DelimiterDecomposer:
    """Scripted decomposer: split the instruction on a delimiter token."""

    def __init__(self, delimiter: str = ";"):
        self.delimiter = delimiter
        self.call_count = 0

    def decompose(self, instruction: str) -> list[str]:
        self.call_count += 1
        parts = [p.strip() for p in instruction.split(self.delimiter)]
        return [p for p in parts if p]


@dataclass(frozen=True)
class TaskQueue:
    subtasks: tuple[str, ...]
    current_index: int = 0
    stop_streak: int = 0

    @property
    def complete(self) -> bool:
        return self.current_index >= len(self.subtasks)

    @property
    def current(self) -> str | None:
        return None if self.complete else self.subtasks[self.current_index]

    @property
    def on_final_subtask(self) -> bool:
        return self.current_index == len(self.subtasks) - 1


def decompose(instruction: str, decomposer: Decomposer) -> TaskQueue:
    """One-time instruction decomposition into a subtask queue."""
    if not instruction.strip():
        raise ValueError("instruction must be non-empty")
    parts = decomposer.decompose(instruction)
    if not parts:
        parts = [instruction.strip()]
    return TaskQueue(tuple(parts))


def advance_task(queue: TaskQueue, status: TaskStatus, k_stable: int = 2) -> TaskQueue:
    """Advance on a stable stop: ``k_stable`` consecutive STOP verdicts move
    the queue to the next subtask; anything else resets the streak."""
    if queue.complete:
        return queue
    if status is not TaskStatus.STOP:
        return replace(queue, stop_streak=0)
    streak = queue.stop_streak + 1
    if streak >= k_stable:
        return TaskQueue(queue.subtasks, queue.current_index + 1, 0)
    return replace(queue, stop_streak=streak)


def decision_step(
    oracle: DecisionOracle,
    subtask: str,
    obs: Observation,
    prev_goal: np.ndarray | None,
    k: CameraIntrinsics,
) -> CandidateGoal:
    """Run one decision query and package its output for verification.

    The previous 3D goal is reprojected into the current frame as a history
    cue when visible. Out-of-bounds oracle pixels are clamped and flagged.
    """
    history = None
    if prev_goal is not None:
        history = project_to_pixel(prev_goal, obs.pose, k)
    pixel = oracle.propose_target(subtask, obs, history)
    clamped = False
    if not pixel.in_bounds(k.width, k.height):
        pixel = Pixel(
            min(max(pixel.x, 0), k.width - 1),
            min(max(pixel.y, 0), k.height - 1),
        )
        clamped = True
    return CandidateGoal(pixel, obs.depth_map, obs.feature_map, obs.pose, clamped=clamped)


def monitoring_step(
    oracle: MonitoringOracle, subtask: str, memory: MonitoringMemory
) -> TaskStatus:
    status = oracle.assess(subtask, memory)
    logger.debug(
        "monitor subtask=%r status=%s slots=%s", subtask, status.value, memory.slot_ids()
    )
    return status


class DirectiveKind(Enum):
    NONE = "none"
    FORWARD_STOP = "forward_stop"
    TERMINATE = "terminate"
    HALT = "halt"
    RECOVER = "recover"


@dataclass(frozen=True)
class ControlDirective:
    kind: DirectiveKind
    yaw_target: float | None = None


@dataclass
class AgentState:
    """Execution-side bookkeeping the status handler consults."""

    position: np.ndarray
    last_normal_position: np.ndarray | None
    queue: TaskQueue
    k_stable: int = 2


def handle_status(status: TaskStatus, state: AgentState) -> ControlDirective:
    """Map a monitoring verdict to a control directive.

    STOP that would stably complete the final subtask terminates the
    episode; otherwise it is forwarded to the task manager. LOST halts and
    reorients toward the last position where monitoring still reported
    CONTINUE; without such a record it only halts.
    """
    if status is TaskStatus.CONTINUE:
        return ControlDirective(DirectiveKind.NONE)
    if status is TaskStatus.STOP:
        if (
            state.queue.on_final_subtask
            and state.queue.stop_streak + 1 >= state.k_stable
        ):
            return ControlDirective(DirectiveKind.TERMINATE)
        return ControlDirective(DirectiveKind.FORWARD_STOP)
    # LOST
    if state.last_normal_position is None:
        return ControlDirective(DirectiveKind.HALT)
    delta = state.last_normal_position - state.position
    return ControlDirective(DirectiveKind.RECOVER, yaw_target=math.atan2(delta[1], delta[0]))


class SharedPerception:
    """Per-frame memoization of the perception function.

    Both agents read the same frame; the underlying extraction runs exactly
    once per step no matter how many consumers ask.
    """

    def __init__(self, render: Callable[[int], Observation]):
        self._render = render
        self._cache: dict[int, Observation] = {}
        self.compute_count = 0

    def frame(self, step: int) -> Observation:
        if step not in self._cache:
            self._cache[step] = self._render(step)
            self.compute_count += 1
            self._cache.pop(step - 3, None)  # keep a short tail only
        return self._cache[step]


@dataclass(frozen=True)
class Event:
    t: float
    kind: str
    data: dict = field(default_factory=dict)


def run_dual_rate(
    decision_period: float,
    monitoring_period: float,
    duration: float,
    on_decision: Callable[[float], dict | None] | None = None,
    on_monitoring: Callable[[float], dict | None] | None = None,
    monitoring_cost: Callable[[float], float] | float = 0.0,
    single_stream: bool = False,
) -> list[Event]:
    """Virtual-time agent schedule over [0, duration).

    In the default decoupled mode, decision ticks fire at exact multiples of
    their period regardless of monitoring cost; each monitoring query logs a
    result event at query time plus its simulated cost. In single-stream
    mode the two share one inference stream, so a monitoring query delays
    every subsequent decision tick by its cost.
    """
    if decision_period >= monitoring_period:
        raise ValueError("decision period must be shorter than the monitoring period")
    cost_fn = monitoring_cost if callable(monitoring_cost) else (lambda _t: float(monitoring_cost))
    events: list[Event] = []

    if single_stream:
        t = 0.0
        next_monitor = 0.0
        while t < duration - 1e-9:
            data = on_decision(t) if on_decision else None
            events.append(Event(t, "decision", data or {}))
            delay = 0.0
            if t >= next_monitor - 1e-9:
                mdata = on_monitoring(t) if on_monitoring else None
                cost = cost_fn(t)
                events.append(Event(t, "monitor_query", mdata or {}))
                events.append(Event(t + cost, "monitor_result", {"cost": cost}))
                next_monitor += monitoring_period
                delay = cost
            t += decision_period + delay
        events.sort(key=lambda e: (e.t, e.kind))
        return events

    heap: list[tuple[float, int, str]] = []
    seq = 0
    k = 0
    while k * decision_period < duration - 1e-9:
        heapq.heappush(heap, (k * decision_period, seq, "decision"))
        seq += 1
        k += 1
    k = 0
    while k * monitoring_period < duration - 1e-9:
        heapq.heappush(heap, (k * monitoring_period, seq, "monitor_query"))
        seq += 1
        k += 1
    while heap:
        t, _, kind = heapq.heappop(heap)
        if kind == "decision":
            data = on_decision(t) if on_decision else None
            events.append(Event(t, "decision", data or {}))
        elif kind == "monitor_query":
            data = on_monitoring(t) if on_monitoring else None
            cost = cost_fn(t)
            events.append(Event(t, "monitor_query", data or {}))
            heapq.heappush(heap, (t + cost, seq, "monitor_result"))
            seq += 1
        else:
            events.append(Event(t, "monitor_result", {}))
    events.sort(key=lambda e: (e.t, e.kind))
    return events


def run_dual_rate_threaded(
    decision_period: float,
    monitoring_period: float,
    duration: float,
    on_decision: Callable[[float], dict | None],
    on_monitoring: Callable[[float], dict | None],
) -> list[Event]:
    """Wall-clock counterpart of the decoupled schedule.

    Two threads tick independently; monitoring results are delivered over a
    single-producer queue. Timing is best-effort (OS scheduling applies), so
    this mode is for live runs, not reproducible experiments.
    """
    events: list[Event] = []
    lock = threading.Lock()
    status_channel: queue_mod.Queue = queue_mod.Queue()
    t0 = wallclock.monotonic()

    def c_now() -> float:
        return wallclock.monotonic() - t0

    def decision_loop():
        k = 0
        while k * decision_period < duration:
            target = k * decision_period
            delay = target - c_now()
            if delay > 0:
                wallclock.sleep(delay)
            data = on_decision(c_now()) or {}
            with lock:
                events.append(Event(c_now(), "decision", data))
            k += 1

    def monitor_loop():
        k = 0
        while k * monitoring_period < duration:
            target = k * monitoring_period
            delay = target - c_now()
            if delay > 0:
                wallclock.sleep(delay)
            data = on_monitoring(c_now()) or {}
            status_channel.put(data)
            with lock:
                events.append(Event(c_now(), "monitor_query", data))
            k += 1

    threads = [threading.Thread(target=decision_loop), threading.Thread(target=monitor_loop)]
    for th in threads:
        th.start()
    for th in threads:
        th.join()
    events.sort(key=lambda e: (e.t, e.kind))
    return events
