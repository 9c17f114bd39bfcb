"""ESDF-based receding-horizon local planning.

The planner keeps a depth-integrated occupancy map (unknown space counts as
occupied, so plans stay inside observed-free volume), derives a truncated
Euclidean signed distance field over a window around the vehicle, searches a
26-connected grid path above a clearance margin, relaxes it with a
smoothness + clearance objective, time-parameterizes it under velocity and
acceleration limits, and tracks the goal bearing with a rate-limited yaw
profile.

Clearance margins chain as: grid search requires ``safety_margin +
corner_buffer`` so straight segments between feasible cell centers cannot
dip below the margin, the smoother pushes toward the same target, and every
returned trajectory is validated sample-by-sample against the raw margin.
"""

from __future__ import annotations

import heapq
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import Pose, wrap_angle

SQRT3 = math.sqrt(3.0)


class PlanningError(Exception):
    pass


@dataclass
class DynamicLimits:
    v_max: float = 0.6
    a_max: float = 0.6
    yaw_rate_max: float = 0.4

    def __post_init__(self) -> None:
        if min(self.v_max, self.a_max, self.yaw_rate_max) <= 0.0:
            raise ValueError("all dynamic limits must be positive")


@dataclass
class PlannerConfig:
    resolution: float = 0.2
    window_size: tuple[float, float, float] = (20.0, 20.0, 6.0)
    esdf_truncation: float = 2.0
    safety_margin: float = 0.4
    corner_buffer: float = 0.2  # extra search margin covering between-cell dips
    replan_period: float = 0.5
    horizon: float = 3.0
    lambda_yaw: float = 1.0
    lambda_smooth: float = 1.0
    lambda_clearance: float = 10.0
    max_consecutive_failures: int = 6
    smooth_iterations: int = 60
    sample_dt: float = 0.05
    integration_range: float = 15.0
    goal_tolerance: float = 1.0  # accept the nearest feasible cell this close to the goal
    search_expansion_budget: int = 8000  # per-replan bound; overruns degrade to best effort


@dataclass
class OccupancyGrid:
    """Axis-aligned voxel grid; cells[ix, iy, iz] is True where occupied."""

    resolution: float
    origin: np.ndarray
    cells: np.ndarray

    def __post_init__(self) -> None:
        if self.resolution <= 0.0:
            raise ValueError("resolution must be positive")
        self.origin = np.asarray(self.origin, dtype=float)
        if self.cells.ndim != 3:
            raise ValueError("cells must be a 3D array")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.cells.shape

    def index_of(self, point: np.ndarray) -> tuple[int, int, int]:
        idx = np.floor((np.asarray(point) - self.origin) / self.resolution).astype(int)
        return tuple(idx)

    def in_bounds(self, idx) -> bool:
        return all(0 <= i < n for i, n in zip(idx, self.cells.shape))

    def center_of(self, idx) -> np.ndarray:
        return self.origin + (np.asarray(idx, dtype=float) + 0.5) * self.resolution


@dataclass
class EsdfGrid:
    """Truncated distance (m) to the nearest occupied cell, on the same
    geometry as the source occupancy grid. Occupied cells are exactly zero."""

    resolution: float
    origin: np.ndarray
    values: np.ndarray

    def index_of(self, point: np.ndarray) -> tuple[int, int, int]:
        idx = np.floor((np.asarray(point) - self.origin) / self.resolution).astype(int)
        return tuple(idx)

    def sample(self, points: np.ndarray) -> np.ndarray:
        """Trilinear interpolation at world points; out-of-grid queries are
        conservatively zero."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        # continuous index space with cell centers at integer coordinates
        u = (pts - self.origin) / self.resolution - 0.5
        nx, ny, nz = self.values.shape
        inside = (
            (u[:, 0] >= 0) & (u[:, 0] <= nx - 1)
            & (u[:, 1] >= 0) & (u[:, 1] <= ny - 1)
            & (u[:, 2] >= 0) & (u[:, 2] <= nz - 1)
        )
        out = np.zeros(len(pts))
        if inside.any():
            ui = u[inside]
            i0 = np.floor(ui).astype(int)
            i0 = np.minimum(i0, np.array(self.values.shape) - 2)
            f = ui - i0
            v = self.values
            x0, y0, z0 = i0[:, 0], i0[:, 1], i0[:, 2]
            c = np.zeros(len(ui))
            for dx in (0, 1):
                for dy in (0, 1):
                    for dz in (0, 1):
                        w = (
                            (f[:, 0] if dx else 1 - f[:, 0])
                            * (f[:, 1] if dy else 1 - f[:, 1])
                            * (f[:, 2] if dz else 1 - f[:, 2])
                        )
                        c += w * v[x0 + dx, y0 + dy, z0 + dz]
            out[inside] = c
        return out if np.asarray(points).ndim > 1 else out

    def gradient(self, points: np.ndarray, h: float | None = None) -> np.ndarray:
        """Central-difference gradient of the sampled field."""
        h = h or self.resolution / 2.0
        pts = np.atleast_2d(points)
        grad = np.zeros_like(pts)
        for axis in range(3):
            offset = np.zeros(3)
            offset[axis] = h
            grad[:, axis] = (self.sample(pts + offset) - self.sample(pts - offset)) / (2 * h)
        return grad


def build_esdf(grid: OccupancyGrid, truncation: float) -> EsdfGrid:
    """Exact truncated Euclidean distance transform of the free space."""
    if truncation <= 0.0:
        raise ValueError("truncation must be positive")
    if not grid.cells.any():
        values = np.full(grid.cells.shape, truncation)
    else:
        dist = ndimage.distance_transform_edt(~grid.cells) * grid.resolution
        values = np.minimum(dist, truncation)
    return EsdfGrid(grid.resolution, grid.origin.copy(), values)


def _neighbor_offsets() -> tuple[np.ndarray, np.ndarray]:
    offsets = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                if dx or dy or dz:
                    offsets.append((dx, dy, dz))
    offs = np.array(offsets, dtype=int)
    costs = np.linalg.norm(offs, axis=1)
    return offs, costs


_OFFSETS, _OFFSET_COSTS = _neighbor_offsets()


def search_path(
    start: np.ndarray,
    goal: np.ndarray,
    esdf: EsdfGrid,
    safety_margin: float,
    goal_tolerance: float = 1.0,
    max_expansions: int = 200_000,
    allow_partial: bool = False,
) -> list[np.ndarray] | None:
    """A* over 26-connected cells whose clearance meets the margin.

    Waypoints run from the exact start position through feasible cell
    centers to the goal cell (or the nearest feasible cell within
    ``goal_tolerance`` of the goal when the goal cell itself is blocked).
    Returns None when no feasible path exists within the grid.

    With ``allow_partial`` the search instead degrades to best effort: if
    the goal is unreachable (or the expansion budget runs out), the path to
    the explored cell closest to the goal is returned, so a vehicle mapping
    as it flies keeps making progress toward unobserved goals.
    """
    res = esdf.resolution
    shape = esdf.values.shape
    feasible = esdf.values >= safety_margin

    start_idx = esdf.index_of(start)
    goal_idx = esdf.index_of(goal)
    if not all(0 <= i < n for i, n in zip(start_idx, shape)):
        return None
    feasible[start_idx] = True  # the vehicle is already there

    goal_cells: set[tuple[int, int, int]] = set()
    heuristic_slack = 0.0
    if all(0 <= i < n for i, n in zip(goal_idx, shape)) and feasible[goal_idx]:
        goal_cells.add(goal_idx)
    else:
        reach = int(math.ceil(goal_tolerance / res)) + 1
        lo = [max(goal_idx[a] - reach, 0) for a in range(3)]
        hi = [min(goal_idx[a] + reach + 1, shape[a]) for a in range(3)]
        if all(l < h for l, h in zip(lo, hi)):
            sub = feasible[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
            idxs = np.argwhere(sub)
            if len(idxs):
                centers = esdf.origin + (idxs + np.array(lo) + 0.5) * res
                dists = np.linalg.norm(centers - goal, axis=1)
                near = idxs[dists <= goal_tolerance]
                goal_cells.update(tuple(i + np.array(lo)) for i in near)
        heuristic_slack = goal_tolerance
        if not goal_cells and not allow_partial:
            return None

    ox, oy, oz = float(esdf.origin[0]), float(esdf.origin[1]), float(esdf.origin[2])
    gx, gy, gz = float(goal[0]), float(goal[1]), float(goal[2])

    def heuristic(idx) -> float:
        dx = ox + (idx[0] + 0.5) * res - gx
        dy = oy + (idx[1] + 0.5) * res - gy
        dz = oz + (idx[2] + 0.5) * res - gz
        return max(0.0, math.sqrt(dx * dx + dy * dy + dz * dz) - heuristic_slack)

    def reconstruct(node) -> list[np.ndarray]:
        cells = [node]
        while node in came:
            node = came[node]
            cells.append(node)
        cells.reverse()
        waypoints = [np.asarray(start, dtype=float)]
        waypoints += [esdf.origin + (np.asarray(c) + 0.5) * res for c in cells[1:]]
        if len(waypoints) == 1:
            waypoints.append(esdf.origin + (np.asarray(cells[0]) + 0.5) * res)
        return waypoints

    start_key = start_idx
    open_heap: list[tuple[float, float, tuple[int, int, int]]] = []
    heapq.heappush(open_heap, (heuristic(start_key), 0.0, start_key))
    g_score = {start_key: 0.0}
    came: dict[tuple, tuple] = {}
    closed: set[tuple] = set()
    expansions = 0
    best_node = start_key
    best_h = heuristic(start_key)

    while open_heap:
        f, g, current = heapq.heappop(open_heap)
        if current in closed:
            continue
        if current in goal_cells:
            return reconstruct(current)
        closed.add(current)
        h = f - g
        if h < best_h:
            best_h = h
            best_node = current
        expansions += 1
        if expansions > max_expansions:
            break
        for off, cost in zip(_OFFSETS, _OFFSET_COSTS):
            nxt = (current[0] + off[0], current[1] + off[1], current[2] + off[2])
            if not (0 <= nxt[0] < shape[0] and 0 <= nxt[1] < shape[1] and 0 <= nxt[2] < shape[2]):
                continue
            if not feasible[nxt] or nxt in closed:
                continue
            tentative = g + cost * res
            if tentative < g_score.get(nxt, math.inf):
                g_score[nxt] = tentative
                came[nxt] = current
                heapq.heappush(open_heap, (tentative + heuristic(nxt), tentative, nxt))

    if allow_partial and best_node != start_key:
        return reconstruct(best_node)
    return None


@dataclass
class Trajectory:
    """Time-parameterized pose sequence produced by the planner."""

    times: np.ndarray
    positions: np.ndarray
    velocities: np.ndarray
    yaws: np.ndarray
    horizon: float

    def __len__(self) -> int:
        return len(self.times)

    @property
    def duration(self) -> float:
        return float(self.times[-1] - self.times[0])

    def validate(self, limits: DynamicLimits) -> None:
        t = self.times
        if not np.all(np.diff(t) > 0):
            raise ValueError("timestamps must be strictly increasing")
        speeds = np.linalg.norm(self.velocities, axis=1)
        if speeds.max(initial=0.0) > limits.v_max + 1e-6:
            raise ValueError(f"speed {speeds.max():.4f} exceeds {limits.v_max}")
        if len(t) > 1:
            dv = np.diff(self.velocities, axis=0)
            dt = np.diff(t)[:, None]
            acc = np.linalg.norm(dv / dt, axis=1)
            if acc.max(initial=0.0) > limits.a_max + 1e-3:
                raise ValueError(f"acceleration {acc.max():.4f} exceeds {limits.a_max}")
            yaw_steps = np.array([wrap_angle(b - a) for a, b in zip(self.yaws, self.yaws[1:])])
            rates = np.abs(yaw_steps) / np.diff(t)
            if rates.max(initial=0.0) > limits.yaw_rate_max + 1e-3:
                raise ValueError(f"yaw rate {rates.max():.4f} exceeds {limits.yaw_rate_max}")

    def state_at(self, t: float) -> tuple[np.ndarray, np.ndarray, float]:
        """Interpolated (position, velocity, yaw) at time t, clamped to the
        trajectory's span; past the end the vehicle holds the final pose."""
        times = self.times
        if t <= times[0]:
            return self.positions[0].copy(), self.velocities[0].copy(), float(self.yaws[0])
        if t >= times[-1]:
            return self.positions[-1].copy(), np.zeros(3), float(self.yaws[-1])
        i = int(np.searchsorted(times, t, side="right")) - 1
        frac = (t - times[i]) / (times[i + 1] - times[i])
        pos = self.positions[i] + frac * (self.positions[i + 1] - self.positions[i])
        vel = self.velocities[i] + frac * (self.velocities[i + 1] - self.velocities[i])
        yaw = wrap_angle(self.yaws[i] + frac * wrap_angle(self.yaws[i + 1] - self.yaws[i]))
        return pos, vel, yaw

    def truncated(self, horizon: float) -> "Trajectory":
        keep = self.times - self.times[0] <= horizon + 1e-9
        keep[0] = True
        n = max(int(keep.sum()), 2) if len(self.times) > 1 else 1
        return Trajectory(
            self.times[:n].copy(), self.positions[:n].copy(),
            self.velocities[:n].copy(), self.yaws[:n].copy(), horizon,
        )

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        buf.write("t,x,y,z,vx,vy,vz,yaw\n")
        for i in range(len(self.times)):
            row = [self.times[i], *self.positions[i], *self.velocities[i], self.yaws[i]]
            buf.write(",".join(f"{v:.6f}" for v in row) + "\n")
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text, encoding="utf-8")
        return text


def densify(waypoints: list[np.ndarray], spacing: float) -> np.ndarray:
    pts = [np.asarray(waypoints[0], dtype=float)]
    for a, b in zip(waypoints, waypoints[1:]):
        seg = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
        dist = float(np.linalg.norm(seg))
        if dist < 1e-12:
            continue
        steps = max(int(math.ceil(dist / spacing)), 1)
        for s in range(1, steps + 1):
            pts.append(np.asarray(a) + seg * (s / steps))
    return np.asarray(pts)


def shortcut_path(
    waypoints: list[np.ndarray], esdf: EsdfGrid, margin: float
) -> list[np.ndarray]:
    """String-pulling: drop intermediate grid waypoints whenever the direct
    segment keeps the clearance margin, leaving only corners that obstacles
    actually force."""
    pts = [np.asarray(p, dtype=float) for p in waypoints]
    if len(pts) <= 2:
        return pts

    def segment_clear(a: np.ndarray, b: np.ndarray) -> bool:
        dist = float(np.linalg.norm(b - a))
        n = max(int(math.ceil(dist / (esdf.resolution * 0.5))), 1)
        ts = np.arange(n + 1) / n
        samples = a[None, :] + (b - a)[None, :] * ts[:, None]
        return bool(esdf.sample(samples).min() >= margin)

    out = [pts[0]]
    i = 0
    while i < len(pts) - 1:
        j = len(pts) - 1
        while j > i + 1 and not segment_clear(pts[i], pts[j]):
            j -= 1
        out.append(pts[j])
        i = j
    return out


def _curvature_radius(points: np.ndarray) -> np.ndarray:
    """Circumradius through each interior point triple (inf when collinear)."""
    radius = np.full(len(points), np.inf)
    if len(points) < 3:
        return radius
    a = np.linalg.norm(points[1:-1] - points[:-2], axis=1)
    b = np.linalg.norm(points[2:] - points[1:-1], axis=1)
    c = np.linalg.norm(points[2:] - points[:-2], axis=1)
    cross = np.cross(points[1:-1] - points[:-2], points[2:] - points[1:-1])
    area2 = np.linalg.norm(np.atleast_2d(cross), axis=-1)
    with np.errstate(divide="ignore", invalid="ignore"):
        r = np.where(area2 > 1e-12, a * b * c / (2.0 * area2), np.inf)
    radius[1:-1] = r
    return radius


def _time_parameterize(
    points: np.ndarray,
    limits: DynamicLimits,
    dt: float,
    v_start: float = 0.0,
) -> Trajectory:
    """Speed profile along the polyline, sampled at dt.

    Per-point speed caps combine the velocity limit with a lateral
    acceleration budget from the local curvature; a forward/backward pass
    enforces the longitudinal budget, ending at rest. A rescale loop backs
    up the analytic profile against finite-difference effects.
    """
    seg = np.diff(points, axis=0)
    seg_len = np.linalg.norm(seg, axis=1)
    keep = np.concatenate([[True], seg_len > 1e-12])
    points = points[keep]
    seg_len = seg_len[seg_len > 1e-12]
    arc = np.concatenate([[0.0], np.cumsum(seg_len)])
    total = float(arc[-1])
    v_cruise = limits.v_max * 0.995
    a_long = limits.a_max * 0.45
    a_lat = limits.a_max * 0.45

    if total < 1e-9:
        times = np.array([0.0, max(dt, 0.05)])
        pos = np.vstack([points[0], points[0]])
        return Trajectory(times, pos, np.zeros((2, 3)), np.zeros(2), horizon=times[-1])

    radius = _curvature_radius(points)
    cap = np.minimum(v_cruise, np.sqrt(np.maximum(a_lat * radius, 4e-4)))
    cap[-1] = 0.0
    v = cap.copy()
    v[0] = min(max(v_start, 0.0), cap[0])
    for i in range(len(v) - 1):  # forward: acceleration budget
        v[i + 1] = min(v[i + 1], math.sqrt(v[i] ** 2 + 2.0 * a_long * seg_len[i]))
    for i in range(len(v) - 2, -1, -1):  # backward: braking budget
        v[i] = min(v[i], math.sqrt(v[i + 1] ** 2 + 2.0 * a_long * seg_len[i]))

    # speed ceiling on a 1 cm arc grid, using the exact constant-acceleration
    # shape inside each polyline segment
    v_eff = np.maximum(v, 0.02)
    ds = 0.01
    s_dense = np.concatenate([np.arange(0.0, total, ds), [total]])
    idx = np.clip(np.searchsorted(arc, s_dense, side="right") - 1, 0, len(arc) - 2)
    v0s, v1s = v_eff[idx], v_eff[idx + 1]
    a_seg = (v1s**2 - v0s**2) / (2.0 * seg_len[idx])
    v_ceiling = np.sqrt(np.maximum(v0s**2 + 2.0 * a_seg * (s_dense - arc[idx]), 4e-4))

    # integrate s(t) in the time domain so sampled speed changes stay within
    # the longitudinal budget all the way to the stop
    dt_sub = dt / 4.0
    t_list = [0.0]
    s_list = [0.0]
    v_now = float(min(max(v_start, 0.0), v_ceiling[0]))
    guard = int(10.0 * total / (0.02 * dt_sub)) + 10_000
    while s_list[-1] < total - 1e-9 and len(t_list) < guard:
        s = s_list[-1]
        v_cand = v_now + a_long * dt_sub
        ceiling = float(np.interp(s + v_cand * dt_sub, s_dense, v_ceiling))
        v_now = max(min(ceiling, v_cand), 0.02)
        s_list.append(min(s + v_now * dt_sub, total))
        t_list.append(t_list[-1] + dt_sub)
    t_grid = np.asarray(t_list)
    s_grid = np.asarray(s_list)
    duration = float(t_grid[-1])

    for scale_iter in range(10):
        n = max(int(duration / dt), 1)
        times = np.arange(n + 1) * dt
        # land exactly on the end time without creating a tiny final step
        if duration - times[-1] > 1e-9:
            if duration - times[-1] < 0.5 * dt and len(times) > 1:
                times = times.copy()
                times[-1] = duration
            else:
                times = np.append(times, duration)
        s_at_t = np.interp(times, t_grid, s_grid)
        pos = np.empty((len(times), 3))
        for axis in range(3):
            pos[:, axis] = np.interp(s_at_t, arc, points[:, axis])
        vel = np.zeros_like(pos)
        if len(times) > 1:
            vel[:-1] = np.diff(pos, axis=0) / np.diff(times)[:, None]
        speeds = np.linalg.norm(vel, axis=1)
        acc = 0.0
        if len(times) > 2:
            acc = float(
                np.linalg.norm(
                    np.diff(vel, axis=0) / np.diff(times)[:, None], axis=1
                ).max()
            )
        if speeds.max() <= limits.v_max + 1e-9 and acc <= limits.a_max + 1e-4:
            return Trajectory(times, pos, vel, np.zeros(len(times)), horizon=times[-1])
        stretch = max(
            speeds.max() / limits.v_max if speeds.max() > 0 else 1.0,
            math.sqrt(acc / limits.a_max) if acc > 0 else 1.0,
            1.02,
        )
        t_grid = t_grid * stretch
        duration = float(t_grid[-1])
    raise PlanningError("time scaling failed to satisfy dynamic limits")


def smooth_trajectory(
    waypoints: list[np.ndarray],
    limits: DynamicLimits,
    esdf: EsdfGrid,
    lambda_smooth: float = 1.0,
    lambda_clearance: float = 10.0,
    dt: float = 0.05,
    safety_margin: float = 0.4,
    clearance_target: float | None = None,
    iterations: int = 40,
    v_start: float = 0.0,
) -> Trajectory:
    """Relax the grid path and time-parameterize it.

    Interior points descend the smoothness (squared second differences) plus
    clearance-hinge objective with endpoints pinned; if the relaxed path ever
    dips below the safety margin the original polyline is used instead, so
    the output is feasible either way.
    """
    if len(waypoints) < 2:
        raise PlanningError("need at least two waypoints")
    target = clearance_target if clearance_target is not None else safety_margin + 0.2
    # shortcut segments are clearance-checked densely, so unlike raw grid
    # hops they only need the true margin plus a sampling allowance; this is
    # what straightens the 26-connected staircase inside narrow corridors
    corners = shortcut_path(waypoints, esdf, safety_margin + 0.05)
    base = densify(corners, spacing=esdf.resolution)
    pts = base.copy()
    step_cap = esdf.resolution / 2.0
    # descent step bounded by the objective's curvature (second-difference
    # stencil contributes up to 32*lambda_smooth, the hinge 2*lambda_clearance)
    lr = 1.6 / (32.0 * lambda_smooth + 2.0 * lambda_clearance + 1e-9)

    if len(pts) > 2:
        for _ in range(iterations):
            interior = pts[1:-1]
            d2 = pts[:-2] - 2.0 * pts[1:-1] + pts[2:]
            grad = np.zeros_like(pts)
            grad[:-2] += 2.0 * lambda_smooth * d2
            grad[1:-1] += -4.0 * lambda_smooth * d2
            grad[2:] += 2.0 * lambda_smooth * d2

            clear = esdf.sample(interior)
            deficit = np.maximum(0.0, target - clear)
            active = deficit > 0.0
            if active.any():
                g_esdf = esdf.gradient(interior[active])
                grad[1:-1][active] += -2.0 * lambda_clearance * deficit[active][:, None] * g_esdf

            step = -lr * grad[1:-1]
            norms = np.linalg.norm(step, axis=1, keepdims=True)
            overshoot = norms > step_cap
            if overshoot.any():
                step = np.where(overshoot, step * (step_cap / np.maximum(norms, 1e-12)), step)
            pts[1:-1] = interior + step

        dense = densify([p for p in pts], spacing=esdf.resolution / 2.0)
        if esdf.sample(dense).min() < safety_margin:
            pts = base  # relaxation broke clearance; fall back to the raw path

    traj = _time_parameterize(pts, limits, dt, v_start=v_start)
    clear = esdf.sample(traj.positions)
    if clear.min() < safety_margin:
        traj = _time_parameterize(base, limits, dt, v_start=v_start)
    return traj


def yaw_plan(
    traj: Trajectory,
    goal_point: np.ndarray,
    limits: DynamicLimits,
    start_yaw: float,
) -> Trajectory:
    """Fill the yaw profile: rate-limited greedy tracking of the bearing from
    each sample toward the goal, which minimizes the summed squared wrapped
    error under the rate constraint."""
    yaws = np.empty(len(traj.times))
    yaw = wrap_angle(start_yaw)
    yaws[0] = yaw
    for i in range(1, len(traj.times)):
        dt = traj.times[i] - traj.times[i - 1]
        delta = goal_point[:2] - traj.positions[i][:2]
        if np.linalg.norm(delta) < 1e-6:
            target = yaw
        else:
            target = math.atan2(delta[1], delta[0])
        err = wrap_angle(target - yaw)
        max_step = limits.yaw_rate_max * dt
        yaw = wrap_angle(yaw + min(max(err, -max_step), max_step))
        yaws[i] = yaw
    return Trajectory(traj.times, traj.positions, traj.velocities, yaws, traj.horizon)


def yaw_cost(yaws: np.ndarray, positions: np.ndarray, goal_point: np.ndarray,
             lambda_yaw: float = 1.0) -> float:
    """Summed squared wrapped yaw error toward the goal bearing."""
    total = 0.0
    for yaw, pos in zip(yaws, positions):
        delta = goal_point[:2] - pos[:2]
        if np.linalg.norm(delta) < 1e-6:
            continue
        err = wrap_angle(math.atan2(delta[1], delta[0]) - yaw)
        total += lambda_yaw * err * err
    return total


def hover_trajectory(
    position: np.ndarray,
    yaw: float,
    limits: DynamicLimits,
    duration: float,
    dt: float = 0.05,
    yaw_target: float | None = None,
) -> Trajectory:
    """Hold position; optionally slew yaw toward a target at the rate limit."""
    n = max(int(round(duration / dt)), 1)
    times = np.arange(n + 1) * dt
    pos = np.tile(np.asarray(position, dtype=float), (n + 1, 1))
    yaws = np.empty(n + 1)
    y = wrap_angle(yaw)
    yaws[0] = y
    for i in range(1, n + 1):
        if yaw_target is None:
            yaws[i] = y
            continue
        err = wrap_angle(yaw_target - y)
        step = limits.yaw_rate_max * dt
        y = wrap_angle(y + min(max(err, -step), step))
        yaws[i] = y
    return Trajectory(times, pos, np.zeros((n + 1, 3)), yaws, horizon=duration)


class DepthMap3D:
    """Persistent known-free / known-occupied voxel map built from depth
    raycasts. Unknown cells are treated as occupied when planning."""

    def __init__(self, origin: np.ndarray, size_m: tuple[float, float, float], resolution: float):
        self.resolution = resolution
        self.origin = np.asarray(origin, dtype=float)
        dims = tuple(int(round(s / resolution)) for s in size_m)
        self.known_free = np.zeros(dims, dtype=bool)
        self.known_occupied = np.zeros(dims, dtype=bool)

    def _indices(self, points: np.ndarray) -> np.ndarray:
        return np.floor((points - self.origin) / self.resolution).astype(int)

    def _in_bounds_mask(self, idx: np.ndarray) -> np.ndarray:
        dims = self.known_free.shape
        return (
            (idx[:, 0] >= 0) & (idx[:, 0] < dims[0])
            & (idx[:, 1] >= 0) & (idx[:, 1] < dims[1])
            & (idx[:, 2] >= 0) & (idx[:, 2] < dims[2])
        )

    def mark_free_sphere(self, center: np.ndarray, radius: float) -> None:
        """Clear the volume the vehicle itself occupies (it is demonstrably
        free of obstacles)."""
        r = int(math.ceil(radius / self.resolution))
        c = self._indices(np.asarray(center)[None, :])[0]
        dims = self.known_free.shape
        lo = [max(c[a] - r, 0) for a in range(3)]
        hi = [min(c[a] + r + 1, dims[a]) for a in range(3)]
        if any(l >= h for l, h in zip(lo, hi)):
            return
        grid = np.stack(
            np.meshgrid(*[np.arange(lo[a], hi[a]) for a in range(3)], indexing="ij"),
            axis=-1,
        )
        centers = self.origin + (grid + 0.5) * self.resolution
        mask = np.linalg.norm(centers - center, axis=-1) <= radius
        view = self.known_free[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
        view[mask & ~self.known_occupied[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]] = True

    def integrate_rays(
        self,
        camera_origin: np.ndarray,
        directions: np.ndarray,
        ranges: np.ndarray,
        max_range: float,
    ) -> None:
        """Mark cells along each ray free up to the hit (or max range) and
        the hit cell occupied. Directions are unit vectors; ranges may be inf."""
        hit = np.isfinite(ranges) & (ranges <= max_range)
        free_len = np.where(hit, np.maximum(ranges - self.resolution * 0.5, 0.0),
                            np.minimum(ranges, max_range))
        step = self.resolution * 0.5
        max_steps = int(math.ceil(max_range / step))
        ts = (np.arange(max_steps) + 0.5) * step
        pts = camera_origin[None, None, :] + directions[:, None, :] * ts[None, :, None]
        valid = ts[None, :] <= free_len[:, None]
        flat = pts[valid]
        if len(flat):
            idx = np.floor(
                (flat - self.origin[None, :]) * (1.0 / self.resolution)
            ).astype(np.int32)
            ok = self._in_bounds_mask(idx)
            idx = idx[ok]
            self.known_free[idx[:, 0], idx[:, 1], idx[:, 2]] = True
        self.mark_hits(camera_origin, directions, ranges, max_range)

    def mark_hits(
        self,
        camera_origin: np.ndarray,
        directions: np.ndarray,
        ranges: np.ndarray,
        max_range: float,
    ) -> None:
        """Mark only the hit cells occupied (free space carved elsewhere)."""
        hit = np.isfinite(ranges) & (ranges <= max_range)
        if hit.any():
            hits = camera_origin[None, :] + directions[hit] * ranges[hit][:, None]
            idx = self._indices(hits)
            ok = self._in_bounds_mask(idx)
            idx = idx[ok]
            self.known_occupied[idx[:, 0], idx[:, 1], idx[:, 2]] = True
            self.known_free[idx[:, 0], idx[:, 1], idx[:, 2]] = False

    def planning_occupancy(self, lo_idx, hi_idx) -> OccupancyGrid:
        """Occupancy over a window: occupied plus everything not known free."""
        free = self.known_free[lo_idx[0]:hi_idx[0], lo_idx[1]:hi_idx[1], lo_idx[2]:hi_idx[2]]
        occ = self.known_occupied[lo_idx[0]:hi_idx[0], lo_idx[1]:hi_idx[1], lo_idx[2]:hi_idx[2]]
        cells = occ | ~free
        origin = self.origin + np.asarray(lo_idx) * self.resolution
        return OccupancyGrid(self.resolution, origin, cells)


@dataclass
class PlanOutcome:
    trajectory: Trajectory | None
    failed: bool
    stuck: bool
    reason: str = ""


class LocalPlanner:
    """Receding-horizon planner over the depth-integrated map."""

    def __init__(
        self,
        config: PlannerConfig,
        limits: DynamicLimits,
        map_origin: np.ndarray,
        map_size: tuple[float, float, float],
    ):
        self.config = config
        self.limits = limits
        self.map = DepthMap3D(map_origin, map_size, config.resolution)
        self.consecutive_failures = 0
        self.last_esdf: EsdfGrid | None = None

    def integrate_observation(
        self,
        camera_origin: np.ndarray,
        directions: np.ndarray,
        ranges: np.ndarray,
    ) -> None:
        self.map.integrate_rays(
            camera_origin, directions, ranges, self.config.integration_range
        )
        self.map.mark_free_sphere(camera_origin, 2.0 * self.config.safety_margin)

    def integrate_hits(
        self,
        camera_origin: np.ndarray,
        directions: np.ndarray,
        ranges: np.ndarray,
    ) -> None:
        """Hit-only integration for callers that carve free space during
        rendering (see the raycast free_out hook)."""
        self.map.mark_hits(
            camera_origin, directions, ranges, self.config.integration_range
        )
        self.map.mark_free_sphere(camera_origin, 2.0 * self.config.safety_margin)

    def _window(self, center: np.ndarray):
        half = np.asarray(self.config.window_size) / 2.0
        dims = self.map.known_free.shape
        lo_pt = center - half
        hi_pt = center + half
        lo = np.floor((lo_pt - self.map.origin) / self.config.resolution).astype(int)
        hi = np.ceil((hi_pt - self.map.origin) / self.config.resolution).astype(int)
        lo = np.maximum(lo, 0)
        hi = np.minimum(hi, dims)
        return tuple(lo), tuple(hi)

    def replan(
        self,
        position: np.ndarray,
        yaw: float,
        speed: float,
        goal_point: np.ndarray,
        horizon: float | None = None,
    ) -> PlanOutcome:
        """Search + smooth + yaw over the current map window.

        Failures increment a counter; once it passes the configured limit the
        outcome carries a stuck signal for the agent layer.
        """
        cfg = self.config
        horizon = horizon if horizon is not None else cfg.horizon
        lo, hi = self._window(position)
        occ = self.map.planning_occupancy(lo, hi)
        esdf = build_esdf(occ, cfg.esdf_truncation)
        self.last_esdf = esdf

        # goals beyond the window are pulled just inside it; the next replan
        # cycle sees farther once the vehicle has moved
        pad = 2.0 * cfg.resolution
        win_lo = self.map.origin + np.asarray(lo) * cfg.resolution + pad
        win_hi = self.map.origin + np.asarray(hi) * cfg.resolution - pad
        goal_point = np.clip(goal_point, win_lo, win_hi)

        search_margin = cfg.safety_margin + cfg.corner_buffer
        waypoints = search_path(
            position, goal_point, esdf, search_margin, cfg.goal_tolerance,
            max_expansions=cfg.search_expansion_budget, allow_partial=True,
        )
        if waypoints is None:
            self.consecutive_failures += 1
            return PlanOutcome(
                None, failed=True,
                stuck=self.consecutive_failures >= cfg.max_consecutive_failures,
                reason="no feasible path in local map",
            )
        try:
            traj = smooth_trajectory(
                waypoints, self.limits, esdf,
                lambda_smooth=cfg.lambda_smooth,
                lambda_clearance=cfg.lambda_clearance,
                dt=cfg.sample_dt,
                safety_margin=cfg.safety_margin,
                clearance_target=search_margin,
                iterations=cfg.smooth_iterations,
                v_start=speed,
            )
        except PlanningError as exc:
            self.consecutive_failures += 1
            return PlanOutcome(
                None, failed=True,
                stuck=self.consecutive_failures >= cfg.max_consecutive_failures,
                reason=str(exc),
            )
        traj = yaw_plan(traj, goal_point, self.limits, start_yaw=yaw)
        traj = traj.truncated(horizon)
        self.consecutive_failures = 0
        return PlanOutcome(traj, failed=False, stuck=False)

    def export_esdf(self, path: str | Path) -> None:
        """Flat CSV snapshot of the latest window ESDF (debugging aid)."""
        if self.last_esdf is None:
            raise PlanningError("no ESDF has been built yet")
        esdf = self.last_esdf
        with Path(path).open("w", encoding="utf-8") as fh:
            fh.write("ix,iy,iz,x,y,z,distance\n")
            nx, ny, nz = esdf.values.shape
            for ix in range(nx):
                for iy in range(ny):
                    for iz in range(nz):
                        c = esdf.origin + (np.array([ix, iy, iz]) + 0.5) * esdf.resolution
                        fh.write(
                            f"{ix},{iy},{iz},{c[0]:.3f},{c[1]:.3f},{c[2]:.3f},"
                            f"{esdf.values[ix, iy, iz]:.6f}\n"
                        )
