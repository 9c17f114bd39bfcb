"""Deterministic closed-loop simulator and episode metrics.

Rendering raycasts the voxel world per pixel (DDA traversal), producing a
depth raster and a per-pixel feature raster (label appearance plus seeded
noise). Episodes wire perception, the dual-rate agents, goal verification,
and the local planner into a virtual-time loop and score the standard four
metrics: success (stopped inside the goal region without collision), oracle
success (entered the region at any point), collision, and flight time.

The language model is replaced by scripted oracles that read the ground
truth: the decision oracle aims at the farthest visible point of a
shortest-path field toward the current subtask goal, and the monitoring
oracle thresholds on true goal distance, gated by the trajectory span its
memory actually covers (an anchor at the episode start is what lets it
certify enough progress to stop).
"""

from __future__ import annotations

import heapq
import json
import math
from dataclasses import dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
from scipy import ndimage

from .agents import (
    AgentState,
    DelimiterDecomposer,
    DirectiveKind,
    Observation,
    SharedPerception,
    TaskStatus,
    advance_task,
    decision_step,
    decompose,
    handle_status,
    monitoring_step,
)
from .config import RunConfig
from .geometry import (
    CAM_TO_BODY,
    CameraIntrinsics,
    Pixel,
    Pose,
    bearing_to_column,
    project_to_pixel,
    round_half_away,
    wrap_angle,
)
from .memory import make_policy, prefix_reuse_tokens
from .planner import LocalPlanner, Trajectory, _time_parameterize, hover_trajectory, yaw_plan
from .verifier import CandidateGoal, NavigationGoal, lift_goal, verify
from .worlds import SKY_LABEL, GoalRegion, World


@lru_cache(maxsize=8)
def _pixel_rays(width: int, height: int, f_x: float, f_y: float, c_x: float, c_y: float):
    """Unit camera-frame ray directions per pixel, plus the z-component used
    to convert ray length to z-depth."""
    xs, ys = np.meshgrid(np.arange(width), np.arange(height))
    dirs = np.stack(
        [(xs - c_x) / f_x, (ys - c_y) / f_y, np.ones_like(xs, dtype=float)], axis=-1
    ).reshape(-1, 3)
    norms = np.linalg.norm(dirs, axis=1, keepdims=True)
    return dirs / norms, (1.0 / norms[:, 0])


def raycast(cells: np.ndarray, resolution: float, origin: np.ndarray,
            directions: np.ndarray, max_range: float,
            free_out: np.ndarray | None = None):
    """Voxel traversal for a bundle of rays from a common origin.

    Returns (ray lengths with inf for misses, hit cell indices with -1 rows
    for misses). Traversal is the standard axis-stepping scheme: advance the
    axis whose next cell boundary is closest, in lockstep across rays.

    When ``free_out`` (a boolean grid of the same shape) is given, every
    traversed free cell is marked True in it; this is how the mapping layer
    carves observed-free space without re-walking the rays.
    """
    n = len(directions)
    dims = np.asarray(cells.shape)
    t_hit = np.full(n, np.inf)
    hit_cells = np.full((n, 3), -1, dtype=int)

    cell0 = np.floor(origin / resolution).astype(int)
    if np.any(cell0 < 0) or np.any(cell0 >= dims):
        raise ValueError("ray origin outside the world grid")
    cell = np.tile(cell0, (n, 1))
    d = directions
    step = np.where(d > 0, 1, np.where(d < 0, -1, 0))
    with np.errstate(divide="ignore", invalid="ignore"):
        t_delta = np.where(step != 0, resolution / np.abs(d), np.inf)
        boundary = (cell + (step > 0)) * resolution
        t_max = np.where(step != 0, (boundary - origin) / d, np.inf)
    t_max = np.nan_to_num(t_max, nan=np.inf, posinf=np.inf, neginf=np.inf)

    active = np.arange(n)
    if cells[cell0[0], cell0[1], cell0[2]]:
        return np.zeros(n), np.tile(cell0, (n, 1))
    if free_out is not None:
        free_out[cell0[0], cell0[1], cell0[2]] = True

    while len(active):
        tm = t_max[active]
        axis = np.argmin(tm, axis=1)
        t_next = tm[np.arange(len(active)), axis]
        alive = t_next <= max_range
        active = active[alive]
        if not len(active):
            break
        axis = axis[alive]
        t_next = t_next[alive]
        cell[active, axis] += step[active, axis]
        sub = cell[active]
        inb = np.all((sub >= 0) & (sub < dims), axis=1)
        # out-of-bounds rays leave the world: no hit
        keep = active[inb]
        axis = axis[inb]
        t_next = t_next[inb]
        sub = sub[inb]
        hit = cells[sub[:, 0], sub[:, 1], sub[:, 2]]
        if hit.any():
            hit_idx = keep[hit]
            t_hit[hit_idx] = t_next[hit]
            hit_cells[hit_idx] = sub[hit]
        survivors = keep[~hit]
        if free_out is not None and len(survivors):
            frees = sub[~hit]
            free_out[frees[:, 0], frees[:, 1], frees[:, 2]] = True
        t_max[survivors, axis[~hit]] += t_delta[survivors, axis[~hit]]
        active = survivors
    return t_hit, hit_cells


@dataclass
class FrameData:
    """Render output plus the ray geometry the map integrator reuses."""

    observation: Observation
    directions_world: np.ndarray
    ray_lengths: np.ndarray


def render_frame(
    world: World,
    pose: Pose,
    k: CameraIntrinsics,
    step: int,
    odo_distance: float,
    seed: int,
    feature_noise: float,
    max_range: float,
    free_out: np.ndarray | None = None,
) -> FrameData:
    """Raycast one frame; deterministic in (world, pose, seed, step)."""
    if not world.contains(pose.position):
        raise ValueError(f"camera pose {pose.position} outside the world")
    dirs_cam, z_scale = _pixel_rays(k.width, k.height, k.f_x, k.f_y, k.c_x, k.c_y)
    rot = pose.rotation @ CAM_TO_BODY
    dirs_world = dirs_cam @ rot.T
    t_hit, hit_cells = raycast(
        world.occupancy.cells, world.resolution, pose.position, dirs_world, max_range,
        free_out=free_out,
    )
    depth = (t_hit * z_scale).reshape(k.height, k.width)

    labels = np.full(len(t_hit), SKY_LABEL, dtype=np.int16)
    valid = hit_cells[:, 0] >= 0
    labels[valid] = world.semantics[
        hit_cells[valid, 0], hit_cells[valid, 1], hit_cells[valid, 2]
    ]
    feats = world.feature_table[labels].astype(np.float64)
    if feature_noise > 0.0:
        rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(7, step)))
        feats = feats + feature_noise * rng.normal(size=feats.shape)
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    feature_map = feats.reshape(k.height, k.width, -1)

    obs = Observation(feature_map, depth, pose, step, odo_distance)
    return FrameData(obs, dirs_world, t_hit)


def render(world: World, pose: Pose, k: CameraIntrinsics, step: int = 0,
           odo_distance: float = 0.0, seed: int = 0, feature_noise: float = 0.05,
           max_range: float = 30.0) -> Observation:
    """Observation-only rendering entry point."""
    return render_frame(
        world, pose, k, step, odo_distance, seed, feature_noise, max_range
    ).observation


def check_collision(world: World, position: np.ndarray, uav_radius: float) -> bool:
    """True when any occupied voxel center lies within the body radius."""
    return bool(world.clearance(position)[0] <= uav_radius)


@dataclass
class UavState:
    position: np.ndarray
    velocity: np.ndarray
    yaw: float
    odo_distance: float = 0.0
    traj_time: float = 0.0


def step_dynamics(state: UavState, traj: Trajectory, dt: float) -> UavState:
    """Advance along the active trajectory's time parameterization; past the
    end the vehicle holds the final pose."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    t_next = state.traj_time + dt
    pos, vel, yaw = traj.state_at(t_next)
    return UavState(
        position=pos,
        velocity=vel,
        yaw=yaw,
        odo_distance=state.odo_distance + float(np.linalg.norm(pos - state.position)),
        traj_time=t_next,
    )


# ---------------------------------------------------------------------------
# Scripted oracles
# ---------------------------------------------------------------------------


class ScriptedDecisionOracle:
    """Ground-truth stand-in for the decision model.

    Aims at the farthest point of an 8-connected shortest-path field (toward
    the current subtask goal, at flight altitude) that is still in line of
    sight; targets outside the frame are clamped to the frame edge at the
    desired bearing, which the bearing gate downstream turns into a
    turn-then-advance maneuver. Pixel noise, when enabled, models an
    imperfect model at fixed variance.
    """

    def __init__(self, world: World, k: CameraIntrinsics, noise_sigma: float,
                 rng: np.random.Generator, margin: float = 0.3):
        self.world = world
        self.k = k
        self.noise_sigma = noise_sigma
        self.rng = rng
        self.margin = margin
        self._subtask_index = {text: i for i, text in enumerate(world.subtasks)}
        self._fields: dict[int, tuple] = {}

    def _goal(self, subtask: str) -> GoalRegion:
        return self.world.goals[self._subtask_index[subtask]]

    def _field(self, idx: int):
        """Cost-to-go over the altitude slice, computed once per subtask."""
        if idx in self._fields:
            return self._fields[idx]
        goal = self.world.goals[idx]
        res = self.world.resolution
        z_idx = min(
            int(goal.center[2] / res), self.world.occupancy.dims[2] - 1
        )
        occ2d = self.world.occupancy.cells[:, :, z_idx]
        clearance2d = ndimage.distance_transform_edt(~occ2d) * res
        feasible = clearance2d >= self.margin
        gx = min(int(goal.center[0] / res), occ2d.shape[0] - 1)
        gy = min(int(goal.center[1] / res), occ2d.shape[1] - 1)
        dist = np.full(occ2d.shape, np.inf)
        if feasible[gx, gy]:
            seeds = [(gx, gy)]
        else:  # nearest feasible cell to the goal seeds the field
            cand = np.argwhere(feasible)
            order = np.argsort(
                np.linalg.norm(cand - np.array([gx, gy]), axis=1), kind="stable"
            )
            seeds = [tuple(cand[order[0]])] if len(cand) else []
        heap = []
        for s in seeds:
            dist[s] = 0.0
            heapq.heappush(heap, (0.0, s))
        moves = [
            (dx, dy, math.hypot(dx, dy) * res)
            for dx in (-1, 0, 1) for dy in (-1, 0, 1) if dx or dy
        ]
        while heap:
            d, (cx, cy) = heapq.heappop(heap)
            if d > dist[cx, cy]:
                continue
            for dx, dy, cost in moves:
                nx, ny = cx + dx, cy + dy
                if 0 <= nx < occ2d.shape[0] and 0 <= ny < occ2d.shape[1] and feasible[nx, ny]:
                    nd = d + cost
                    if nd < dist[nx, ny]:
                        dist[nx, ny] = nd
                        heapq.heappush(heap, (nd, (nx, ny)))
        self._fields[idx] = (dist, z_idx)
        return self._fields[idx]

    def _line_of_sight(self, a: np.ndarray, b: np.ndarray) -> bool:
        span = b - a
        length = float(np.linalg.norm(span))
        if length < 1e-9:
            return True
        n = max(int(length / (self.world.resolution * 0.5)), 1)
        ts = (np.arange(n + 1)) / n
        pts = a[None, :] + span[None, :] * ts[:, None]
        idx = np.floor(pts / self.world.resolution).astype(int)
        dims = self.world.occupancy.dims
        idx = np.clip(idx, 0, np.asarray(dims) - 1)
        return not self.world.occupancy.cells[idx[:, 0], idx[:, 1], idx[:, 2]].any()

    def _descend(self, position: np.ndarray, idx: int) -> list[np.ndarray]:
        dist, z_idx = self._field(idx)
        res = self.world.resolution
        altitude = (z_idx + 0.5) * res
        cx = min(max(int(position[0] / res), 0), dist.shape[0] - 1)
        cy = min(max(int(position[1] / res), 0), dist.shape[1] - 1)
        if not np.isfinite(dist[cx, cy]):
            # step to the best finite neighbor cell in a small neighborhood
            window = dist[
                max(cx - 4, 0):cx + 5, max(cy - 4, 0):cy + 5
            ]
            if not np.isfinite(window).any():
                return []
            off = np.unravel_index(np.argmin(np.where(np.isfinite(window), window, np.inf)),
                                   window.shape)
            cx = max(cx - 4, 0) + int(off[0])
            cy = max(cy - 4, 0) + int(off[1])
        path = [np.array([(cx + 0.5) * res, (cy + 0.5) * res, altitude])]
        seen = 0
        while dist[cx, cy] > 0.0 and seen < 4000:
            best = None
            for dx in (-1, 0, 1):
                for dy in (-1, 0, 1):
                    if not (dx or dy):
                        continue
                    nx, ny = cx + dx, cy + dy
                    if 0 <= nx < dist.shape[0] and 0 <= ny < dist.shape[1]:
                        if best is None or dist[nx, ny] < dist[best]:
                            best = (nx, ny)
            if best is None or dist[best] >= dist[cx, cy]:
                break
            cx, cy = best
            path.append(np.array([(cx + 0.5) * res, (cy + 0.5) * res, altitude]))
            seen += 1
        return path

    def aim_point(self, subtask: str, pose: Pose) -> np.ndarray:
        goal = self._goal(subtask)
        if self._line_of_sight(pose.position, goal.center):
            return goal.center
        idx = self._subtask_index[subtask]
        path = self._descend(pose.position, idx)
        for point in reversed(path):
            if self._line_of_sight(pose.position, point):
                return point
        return goal.center

    def propose_target(self, subtask: str, obs: Observation, history) -> Pixel:
        aim = self.aim_point(subtask, obs.pose)
        pixel = project_to_pixel(aim, obs.pose, self.k)
        if pixel is None:
            delta = aim - obs.pose.position
            theta = wrap_angle(math.atan2(delta[1], delta[0]) - obs.pose.yaw)
            theta = min(max(theta, -self.k.half_fov_x * 0.98), self.k.half_fov_x * 0.98)
            pixel = Pixel(bearing_to_column(theta, self.k), int(self.k.c_y))
        if self.noise_sigma > 0.0:
            noise = self.rng.normal(scale=self.noise_sigma, size=2)
            pixel = Pixel(
                pixel.x + round_half_away(noise[0]), pixel.y + round_half_away(noise[1])
            )
        return Pixel(
            min(max(pixel.x, 0), self.k.width - 1),
            min(max(pixel.y, 0), self.k.height - 1),
        )


class ScriptedMonitoringOracle:
    """Ground-truth stand-in for the monitoring model.

    STOP requires proximity to the subtask goal plus covered-progress
    evidence from the memory itself: the trajectory span between the
    memory's anchor slot and its latest slot must account for the distance
    from the episode start to the goal. A memory that forgets the start
    cannot certify that and keeps reporting CONTINUE. LOST fires after
    repeated heading divergence while the vehicle is actually moving.
    """

    def __init__(self, world: World, stop_radius: float, divergence: float = 2.0944,
                 lost_checks: int = 3, min_motion: float = 0.2):
        self.world = world
        self.stop_radius = stop_radius
        self.divergence = divergence
        self.lost_checks = lost_checks
        self.min_motion = min_motion
        self._subtask_index = {text: i for i, text in enumerate(world.subtasks)}
        start = world.start_pose.position
        self._required_span = [
            max(0.0, float(np.linalg.norm(g.center - start)) - stop_radius) - 1e-9
            for g in world.goals
        ]
        self._diverged = 0
        self._last_odo: float | None = None

    def assess(self, subtask: str, memory) -> TaskStatus:
        idx = self._subtask_index[subtask]
        goal = self.world.goals[idx]
        latest = memory.latest.item
        anchor = memory.first.item
        true_dist = float(np.linalg.norm(latest.pose.position - goal.center))
        span = float(latest.odo_distance) - float(anchor.odo_distance)
        if true_dist < self.stop_radius and span >= self._required_span[idx]:
            return TaskStatus.STOP

        moved = (
            self._last_odo is not None
            and latest.odo_distance - self._last_odo > self.min_motion
        )
        self._last_odo = float(latest.odo_distance)
        delta = goal.center - latest.pose.position
        div = abs(wrap_angle(math.atan2(delta[1], delta[0]) - latest.pose.yaw))
        if moved and div > self.divergence:
            self._diverged += 1
        else:
            self._diverged = 0
        if self._diverged >= self.lost_checks:
            self._diverged = 0
            return TaskStatus.LOST
        return TaskStatus.CONTINUE


# ---------------------------------------------------------------------------
# Episode loop
# ---------------------------------------------------------------------------


@dataclass
class EpisodeResult:
    world_name: str
    seed: int
    success: bool
    oracle_success: bool
    collided: bool
    flight_time: float
    termination: str
    final_distance: float
    min_clearance: float
    trajectory: Trajectory
    clearances: np.ndarray
    events: list[dict]
    stuck_events: int
    feature_extractions: int
    decision_ticks: int
    monitor_queries: int
    mean_reuse_tokens: float
    memory_records: list[dict]

    def __post_init__(self) -> None:
        if self.success and (not self.oracle_success or self.collided):
            raise AssertionError("success implies oracle success and no collision")

    def metrics(self) -> dict:
        return {
            "SR": 1.0 if self.success else 0.0,
            "OSR": 1.0 if self.oracle_success else 0.0,
            "CR": 1.0 if self.collided else 0.0,
            "FT": self.flight_time,
        }


def _raw_lift(candidate: CandidateGoal, cfg, k: CameraIntrinsics) -> NavigationGoal:
    """Verifier-off path: back-project the raw pixel at its capped depth."""
    d = float(candidate.depth_map[candidate.pixel.y, candidate.pixel.x])
    if not math.isfinite(d):
        d = cfg.max_depth
    return lift_goal(candidate.pixel, min(d, cfg.max_depth), k, candidate.pose)


def run_episode(
    world: World,
    config: RunConfig,
    seed: int,
    decision_oracle=None,
    monitoring_oracle=None,
) -> EpisodeResult:
    """Run one closed-loop episode in virtual time.

    Terminates on collision, a stable STOP on the final subtask, or the
    world's time limit. Oracle overrides exist for fault-injection tests.
    """
    config.validate()
    world.validate()
    k = config.camera.intrinsics()
    dt = config.sim.physics_dt
    oracle_rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(3,)))

    dec_oracle = decision_oracle or ScriptedDecisionOracle(
        world, k, config.agents.pixel_noise_sigma, oracle_rng, config.sim.oracle_margin
    )
    mon_oracle = monitoring_oracle or ScriptedMonitoringOracle(
        world, config.sim.stop_radius, config.sim.lost_divergence,
        config.sim.lost_checks, config.sim.lost_min_motion,
    )
    decomposer = DelimiterDecomposer(";")
    queue = decompose(world.instruction, decomposer)
    policy = make_policy(config.memory_policy, config.memory)

    planner = None
    if config.planner_enabled:
        planner = LocalPlanner(config.planner, config.limits, np.zeros(3), world.size)

    state = UavState(
        position=world.start_pose.position.copy(),
        velocity=np.zeros(3),
        yaw=world.start_pose.yaw,
        odo_distance=0.0,
        traj_time=0.0,
    )
    frames: dict[int, FrameData] = {}
    # rendering carves observed-free space straight into the planner's map
    # when the grids line up (they do under the default configuration)
    free_carve = None
    if planner is not None and abs(config.planner.resolution - world.resolution) < 1e-12:
        free_carve = planner.map.known_free

    def render_tick(tick: int) -> Observation:
        frame = render_frame(
            world, Pose(state.position.copy(), state.yaw), k, tick, state.odo_distance,
            seed, config.sim.feature_noise_sigma, config.sim.max_render_range,
            free_out=free_carve,
        )
        frames[tick] = frame
        frames.pop(tick - 3, None)
        return frame.observation

    shared = SharedPerception(render_tick)

    active_traj = hover_trajectory(state.position, state.yaw, config.limits, 1.0, dt)
    events: list[dict] = []
    memory_records: list[dict] = []
    reuse_values: list[float] = []
    pending: list[tuple[float, TaskStatus]] = []
    current_memory = None
    last_query_memory = None
    prev_goal: np.ndarray | None = None
    last_normal: np.ndarray | None = None
    recovery_target: float | None = None
    collided = False
    stuck_events = 0
    final_goal = world.goal_region
    min_goal_dist = float(np.linalg.norm(state.position - final_goal.center))
    termination = "time_limit"

    per_decision = round(config.agents.decision_period / dt)
    per_monitor = round(config.agents.monitoring_period / dt)
    n_steps = round(world.time_limit / dt)
    tokens_total = (config.memory.segment_count + 2) * config.memory.tokens_per_slot
    next_stream_t = 0.0  # single-stream scheduling
    next_stream_monitor = 0.0

    trace_t = [0.0]
    trace_pos = [state.position.copy()]
    trace_vel = [state.velocity.copy()]
    trace_yaw = [state.yaw]
    trace_clear = [float(world.clearance(state.position)[0])]
    decision_count = 0
    monitor_count = 0
    end_time = 0.0

    def swap_trajectory(traj: Trajectory, validate: bool = True) -> None:
        nonlocal active_traj
        if validate:
            traj.validate(config.limits)
        active_traj = traj
        state.traj_time = 0.0

    def monitor_cost(reused: int) -> float:
        fresh = max(tokens_total - reused, 0)
        return config.agents.monitor_base_cost + fresh / config.agents.monitor_tokens_per_second

    def run_decision(t: float, tick: int) -> None:
        nonlocal prev_goal, stuck_events, decision_count
        decision_count += 1
        obs = shared.frame(tick)
        memory = policy.update(obs)
        _record_memory(memory, tick)
        if recovery_target is not None:
            return
        subtask = queue.current
        if subtask is None:
            return
        candidate = decision_step(dec_oracle, subtask, obs, prev_goal, k)
        if config.verifier_enabled:
            nav = verify(candidate, config.verifier, k)
        else:
            nav = _raw_lift(candidate, config.verifier, k)
        prev_goal = nav.point
        event = {
            "t": round(t, 6), "kind": "decision", "tick": tick,
            "pixel": [candidate.pixel.x, candidate.pixel.y],
            "clamped": candidate.clamped,
            "goal": [round(v, 4) for v in nav.point],
            "gated_range": round(nav.gated_range, 4),
            "bearing": round(nav.bearing, 4),
            "unrefined": nav.unrefined,
        }
        if planner is not None:
            frame = frames[tick]
            if free_carve is not None:
                planner.integrate_hits(
                    obs.pose.position, frame.directions_world, frame.ray_lengths
                )
            else:
                planner.integrate_observation(
                    obs.pose.position, frame.directions_world, frame.ray_lengths
                )
            outcome = planner.replan(
                state.position.copy(), state.yaw, float(np.linalg.norm(state.velocity)),
                nav.point,
            )
            if outcome.trajectory is not None:
                swap_trajectory(outcome.trajectory, validate=False)  # validated inside
                outcome.trajectory.validate(config.limits)
            else:
                delta = nav.point - state.position
                yaw_target = math.atan2(delta[1], delta[0]) if np.linalg.norm(delta[:2]) > 1e-6 else state.yaw
                swap_trajectory(hover_trajectory(
                    state.position, state.yaw, config.limits,
                    config.agents.decision_period * 2, dt, yaw_target,
                ))
                event["plan_failed"] = True
                if outcome.stuck:
                    stuck_events += 1
                    event["planner_stuck"] = True
        else:
            span = float(np.linalg.norm(nav.point - state.position))
            if span < 1e-6:
                swap_trajectory(hover_trajectory(
                    state.position, state.yaw, config.limits,
                    config.agents.decision_period * 2, dt,
                ))
            else:
                traj = _time_parameterize(
                    np.vstack([state.position, nav.point]), config.limits, dt,
                    v_start=float(np.linalg.norm(state.velocity)),
                )
                traj = yaw_plan(traj, nav.point, config.limits, state.yaw)
                swap_trajectory(traj)
        events.append(event)

    def _record_memory(memory, tick: int) -> None:
        nonlocal current_memory
        reused = 0
        if current_memory is not None:
            reused = prefix_reuse_tokens(
                current_memory, memory, config.memory.tokens_per_slot
            )
        reuse_values.append(float(reused))
        record = {"slot_ids": memory.slot_ids(), "reused_tokens": reused, "tick": tick}
        if getattr(policy, "last_trace", None):
            record.update(policy.last_trace)
        memory_records.append(record)
        current_memory = memory

    def run_monitor(t: float) -> float:
        nonlocal last_query_memory, monitor_count
        if current_memory is None or queue.current is None:
            return 0.0
        monitor_count += 1
        status = monitoring_step(mon_oracle, queue.current, current_memory)
        reused = 0
        if last_query_memory is not None:
            reused = prefix_reuse_tokens(
                last_query_memory, current_memory, config.memory.tokens_per_slot
            )
        last_query_memory = current_memory
        cost = monitor_cost(reused)
        events.append({
            "t": round(t, 6), "kind": "monitor_query", "status": status.value,
            "reused_tokens": reused, "cost": round(cost, 6),
        })
        pending.append((t + cost, status))
        return cost

    def apply_status(t: float, status: TaskStatus) -> bool:
        """Returns True when the episode just completed."""
        nonlocal queue, recovery_target, last_normal
        directive = handle_status(
            status,
            AgentState(state.position.copy(), last_normal, queue, config.agents.k_stable),
        )
        queue = advance_task(queue, status, config.agents.k_stable)
        events.append({
            "t": round(t, 6), "kind": "monitor_result", "status": status.value,
            "directive": directive.kind.value,
            "subtask_index": queue.current_index,
        })
        if status is TaskStatus.CONTINUE:
            last_normal = state.position.copy()
        if directive.kind is DirectiveKind.RECOVER:
            recovery_target = directive.yaw_target
            swap_trajectory(hover_trajectory(
                state.position, state.yaw, config.limits, 10.0, dt, recovery_target,
            ))
        elif directive.kind is DirectiveKind.HALT:
            swap_trajectory(hover_trajectory(
                state.position, state.yaw, config.limits,
                config.agents.decision_period * 2, dt,
            ))
        return queue.complete

    done = False
    for i in range(1, n_steps + 1):
        t_prev = (i - 1) * dt
        # deliver monitoring verdicts that have finished "computing"
        for due_t, status in sorted(pending):
            if due_t <= t_prev + 1e-9:
                pending.remove((due_t, status))
                if apply_status(due_t, status):
                    termination = "stable_stop"
                    end_time = due_t
                    done = True
                    break
        if done:
            break

        if config.agents.dual_agent:
            if (i - 1) % per_decision == 0:
                run_decision(t_prev, (i - 1) // per_decision)
            if (i - 1) % per_monitor == 0:
                run_monitor(t_prev)
        else:
            if t_prev >= next_stream_t - 1e-9:
                run_decision(t_prev, decision_count)
                delay = 0.0
                if t_prev >= next_stream_monitor - 1e-9:
                    delay = run_monitor(t_prev)
                    next_stream_monitor += config.agents.monitoring_period
                    # coupled stream: the verdict lands before the next tick
                    for due_t, status in list(pending):
                        pending.remove((due_t, status))
                        if apply_status(due_t, status):
                            termination = "stable_stop"
                            done = True
                next_stream_t = t_prev + config.agents.decision_period + delay
            if done:
                end_time = t_prev
                break

        state_new = step_dynamics(state, active_traj, dt)
        state.position = state_new.position
        state.velocity = state_new.velocity
        state.yaw = state_new.yaw
        state.odo_distance = state_new.odo_distance
        state.traj_time = state_new.traj_time
        t = i * dt
        end_time = t

        if recovery_target is not None and abs(wrap_angle(state.yaw - recovery_target)) < config.sim.recovery_yaw_tolerance:
            recovery_target = None
            events.append({"t": round(t, 6), "kind": "recovery_complete"})

        clear = float(world.clearance(state.position)[0])
        trace_t.append(t)
        trace_pos.append(state.position.copy())
        trace_vel.append(state.velocity.copy())
        trace_yaw.append(state.yaw)
        trace_clear.append(clear)
        min_goal_dist = min(
            min_goal_dist, float(np.linalg.norm(state.position - final_goal.center))
        )
        if clear <= config.sim.uav_radius:
            collided = True
            termination = "collision"
            events.append({"t": round(t, 6), "kind": "collision"})
            break

    final_distance = float(np.linalg.norm(state.position - final_goal.center))
    success = (
        termination == "stable_stop"
        and not collided
        and final_distance <= config.sim.stop_radius
    )
    oracle_success = min_goal_dist <= config.sim.stop_radius
    exec_traj = Trajectory(
        np.asarray(trace_t), np.asarray(trace_pos), np.asarray(trace_vel),
        np.asarray(trace_yaw), horizon=end_time,
    )
    return EpisodeResult(
        world_name=world.name,
        seed=seed,
        success=success,
        oracle_success=oracle_success,
        collided=collided,
        flight_time=end_time,
        termination=termination,
        final_distance=final_distance,
        min_clearance=float(np.min(trace_clear)),
        trajectory=exec_traj,
        clearances=np.asarray(trace_clear),
        events=events,
        stuck_events=stuck_events,
        feature_extractions=shared.compute_count,
        decision_ticks=decision_count,
        monitor_queries=monitor_count,
        mean_reuse_tokens=float(np.mean(reuse_values)) if reuse_values else 0.0,
        memory_records=memory_records,
    )


@dataclass
class BenchmarkRow:
    world_name: str
    repeat: int
    seed: int
    sr: float
    osr: float
    cr: float
    ft: float
    error: str = ""


@dataclass
class BenchmarkResult:
    rows: list[BenchmarkRow]

    def aggregate(self) -> dict:
        if not self.rows:
            return {"SR": 0.0, "OSR": 0.0, "CR": 0.0, "FT": 0.0, "episodes": 0}
        return {
            "SR": float(np.mean([r.sr for r in self.rows])),
            "OSR": float(np.mean([r.osr for r in self.rows])),
            "CR": float(np.mean([r.cr for r in self.rows])),
            "FT": float(np.mean([r.ft for r in self.rows])),
            "episodes": len(self.rows),
        }


def run_benchmark(
    worlds: list[World], config: RunConfig, repeats: int = 3, base_seed: int = 0
) -> BenchmarkResult:
    """Run every world ``repeats`` times; a crashing episode becomes a
    failure row instead of aborting the suite."""
    if repeats < 1:
        raise ValueError("repeats must be at least 1")
    rows: list[BenchmarkRow] = []
    for wi, world in enumerate(worlds):
        for rep in range(repeats):
            seed = int(
                np.random.SeedSequence(entropy=base_seed, spawn_key=(wi, rep)).generate_state(1)[0]
            )
            try:
                result = run_episode(world, config, seed)
                rows.append(BenchmarkRow(
                    world.name, rep, seed,
                    result.metrics()["SR"], result.metrics()["OSR"],
                    result.metrics()["CR"], result.metrics()["FT"],
                ))
            except Exception as exc:  # noqa: BLE001 - suite must keep going
                rows.append(BenchmarkRow(world.name, rep, seed, 0.0, 0.0, 1.0,
                                         world.time_limit, error=str(exc)))
    return BenchmarkResult(rows)


def write_event_log(events: list[dict], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8") as fh:
        for event in events:
            fh.write(json.dumps(event, sort_keys=True) + "\n")


def result_to_dict(result: EpisodeResult) -> dict:
    return {
        "world": result.world_name,
        "seed": result.seed,
        "success": result.success,
        "oracle_success": result.oracle_success,
        "collided": result.collided,
        "flight_time": round(result.flight_time, 4),
        "termination": result.termination,
        "final_distance": round(result.final_distance, 4),
        "min_clearance": round(result.min_clearance, 4),
        "stuck_events": result.stuck_events,
        "decision_ticks": result.decision_ticks,
        "monitor_queries": result.monitor_queries,
        "feature_extractions": result.feature_extractions,
        "mean_reuse_tokens": round(result.mean_reuse_tokens, 4),
    }
