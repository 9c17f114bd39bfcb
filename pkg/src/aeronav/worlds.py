"""Synthetic worlds: voxelized box scenes with semantic labels.

Worlds are authored in a small line-oriented text format so scenarios can be
edited by hand and diffed:

    # comment
    name: gap-wall
    size: 26 18 3.2            # meters
    resolution: 0.2
    start: 2.0 9.0 1.5 yaw 0.0
    time_limit: 70
    feature_dim: 16
    feature_seed: 7
    instruction: slip through the opening; stop at the beacon
    goal: 12.0 4.0 1.5 radius 5.0
    goal: 22.0 9.0 1.5 radius 5.0
    floor: auto
    box: 10.0 0.0 0.0 10.6 3.0 3.2 wall

``goal:`` lines pair up one-to-one with the ';'-separated subtasks of the
instruction; the last goal is the episode goal. ``box:`` is an axis-aligned
obstacle with a semantic label; ``floor: auto`` adds a one-cell ground slab.
Per-label appearance features are seeded unit vectors, so a world file fully
determines the scene.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path

import numpy as np
from scipy.spatial import cKDTree

from .geometry import Pose
from .planner import OccupancyGrid

SKY_LABEL = 0


class WorldFormatError(ValueError):
    pass


@dataclass
class GoalRegion:
    center: np.ndarray
    radius: float


@dataclass
class Box:
    lo: np.ndarray
    hi: np.ndarray
    label: str


@dataclass
class World:
    name: str
    size: tuple[float, float, float]
    resolution: float
    start_pose: Pose
    instruction: str
    goals: list[GoalRegion]
    boxes: list[Box]
    time_limit: float = 70.0
    feature_dim: int = 16
    feature_seed: int = 7

    def __post_init__(self) -> None:
        if not self.goals:
            raise WorldFormatError("world needs at least one goal")
        for g in self.goals:
            if g.radius <= 0.0:
                raise WorldFormatError("goal radius must be positive")
        subtasks = [s.strip() for s in self.instruction.split(";") if s.strip()]
        if len(subtasks) != len(self.goals):
            raise WorldFormatError(
                f"instruction has {len(subtasks)} subtasks but {len(self.goals)} goals"
            )
        self.subtasks = subtasks

    @property
    def goal_region(self) -> GoalRegion:
        return self.goals[-1]

    @cached_property
    def labels(self) -> dict[str, int]:
        """Label name -> id; 'sky' is the reserved no-hit label."""
        out = {"sky": SKY_LABEL}
        for box in self.boxes:
            if box.label not in out:
                out[box.label] = len(out)
        return out

    @cached_property
    def feature_table(self) -> np.ndarray:
        """Unit feature vector per label id, drawn from the world seed."""
        rng = np.random.default_rng(np.random.SeedSequence(self.feature_seed))
        table = rng.normal(size=(len(self.labels), self.feature_dim))
        return table / np.linalg.norm(table, axis=1, keepdims=True)

    @cached_property
    def occupancy(self) -> OccupancyGrid:
        dims = tuple(int(round(s / self.resolution)) for s in self.size)
        cells = np.zeros(dims, dtype=bool)
        for box in self.boxes:
            sl = self._box_slices(box)
            cells[sl] = True
        return OccupancyGrid(self.resolution, np.zeros(3), cells)

    @cached_property
    def semantics(self) -> np.ndarray:
        grid = np.full(self.occupancy.dims, SKY_LABEL, dtype=np.int16)
        for box in self.boxes:  # later boxes overwrite earlier labels
            grid[self._box_slices(box)] = self.labels[box.label]
        return grid

    def _box_slices(self, box: Box):
        res = self.resolution
        dims = self.occupancy.dims if "occupancy" in self.__dict__ else tuple(
            int(round(s / res)) for s in self.size
        )
        idx = []
        for axis in range(3):
            lo = int(math.ceil(box.lo[axis] / res - 0.5))
            hi = int(math.ceil(box.hi[axis] / res - 0.5))
            idx.append(slice(max(lo, 0), min(hi, dims[axis])))
        return tuple(idx)

    @cached_property
    def _occupied_centers(self) -> np.ndarray:
        occ = np.argwhere(self.occupancy.cells)
        return (occ + 0.5) * self.resolution

    @cached_property
    def _kdtree(self) -> cKDTree | None:
        centers = self._occupied_centers
        return cKDTree(centers) if len(centers) else None

    def clearance(self, points: np.ndarray) -> np.ndarray:
        """Exact distance from each point to the nearest occupied voxel
        center (the ground-truth distance field, untruncated)."""
        pts = np.atleast_2d(np.asarray(points, dtype=float))
        if self._kdtree is None:
            return np.full(len(pts), np.inf)
        dist, _ = self._kdtree.query(pts)
        return np.asarray(dist)

    def contains(self, point: np.ndarray) -> bool:
        p = np.asarray(point)
        return bool(np.all(p >= 0.0) and np.all(p < np.asarray(self.size)))

    def validate(self, min_start_clearance: float = 0.8) -> None:
        if not self.contains(self.start_pose.position):
            raise WorldFormatError("start pose lies outside the world")
        start_clear = float(self.clearance(self.start_pose.position)[0])
        if start_clear < min_start_clearance:
            raise WorldFormatError(
                f"start clearance {start_clear:.2f} m is below {min_start_clearance} m"
            )
        for g in self.goals:
            if not self.contains(g.center):
                raise WorldFormatError("goal center lies outside the world")


def _parse_floats(parts: list[str], n: int, context: str) -> list[float]:
    if len(parts) < n:
        raise WorldFormatError(f"{context}: expected {n} numbers, got {len(parts)}")
    try:
        return [float(p) for p in parts[:n]]
    except ValueError as exc:
        raise WorldFormatError(f"{context}: {exc}") from None


def parse_world(text: str, name_hint: str = "unnamed") -> World:
    """Parse the world text format; diagnostics name the offending line."""
    fields: dict = {
        "name": name_hint, "time_limit": 70.0, "feature_dim": 16, "feature_seed": 7,
    }
    goals: list[GoalRegion] = []
    boxes: list[Box] = []
    floor_auto = False
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if ":" not in line:
            raise WorldFormatError(f"line {lineno}: expected 'key: value', got {raw!r}")
        key, value = (part.strip() for part in line.split(":", 1))
        ctx = f"line {lineno} ({key})"
        if key == "name":
            fields["name"] = value
        elif key == "size":
            fields["size"] = tuple(_parse_floats(value.split(), 3, ctx))
        elif key == "resolution":
            fields["resolution"] = _parse_floats([value], 1, ctx)[0]
        elif key == "start":
            parts = value.split()
            xyz = _parse_floats(parts, 3, ctx)
            yaw = 0.0
            if "yaw" in parts:
                yaw = _parse_floats([parts[parts.index("yaw") + 1]], 1, ctx)[0]
            fields["start"] = Pose(np.array(xyz), yaw)
        elif key == "time_limit":
            fields["time_limit"] = _parse_floats([value], 1, ctx)[0]
        elif key == "feature_dim":
            fields["feature_dim"] = int(_parse_floats([value], 1, ctx)[0])
        elif key == "feature_seed":
            fields["feature_seed"] = int(_parse_floats([value], 1, ctx)[0])
        elif key == "instruction":
            fields["instruction"] = value
        elif key == "goal":
            parts = value.split()
            xyz = _parse_floats(parts, 3, ctx)
            if "radius" not in parts:
                raise WorldFormatError(f"{ctx}: missing 'radius'")
            radius = _parse_floats([parts[parts.index("radius") + 1]], 1, ctx)[0]
            goals.append(GoalRegion(np.array(xyz), radius))
        elif key == "floor":
            if value != "auto":
                raise WorldFormatError(f"{ctx}: only 'auto' is supported")
            floor_auto = True
        elif key == "box":
            parts = value.split()
            if len(parts) < 7:
                raise WorldFormatError(f"{ctx}: expected 6 numbers and a label")
            nums = _parse_floats(parts, 6, ctx)
            boxes.append(Box(np.array(nums[:3]), np.array(nums[3:6]), parts[6]))
        else:
            raise WorldFormatError(f"line {lineno}: unknown key {key!r}")

    for required in ("size", "resolution", "start", "instruction"):
        if required not in fields:
            raise WorldFormatError(f"missing required key {required!r}")
    if floor_auto:
        sx, sy, _ = fields["size"]
        boxes.insert(0, Box(np.zeros(3), np.array([sx, sy, fields["resolution"]]), "floor"))
    return World(
        name=fields["name"],
        size=fields["size"],
        resolution=fields["resolution"],
        start_pose=fields["start"],
        instruction=fields["instruction"],
        goals=goals,
        boxes=boxes,
        time_limit=fields["time_limit"],
        feature_dim=fields["feature_dim"],
        feature_seed=fields["feature_seed"],
    )


def world_to_text(world: World) -> str:
    lines = [
        f"name: {world.name}",
        f"size: {world.size[0]:g} {world.size[1]:g} {world.size[2]:g}",
        f"resolution: {world.resolution:g}",
        (
            f"start: {world.start_pose.position[0]:g} {world.start_pose.position[1]:g} "
            f"{world.start_pose.position[2]:g} yaw {world.start_pose.yaw:g}"
        ),
        f"time_limit: {world.time_limit:g}",
        f"feature_dim: {world.feature_dim}",
        f"feature_seed: {world.feature_seed}",
        f"instruction: {world.instruction}",
    ]
    for g in world.goals:
        lines.append(
            f"goal: {g.center[0]:g} {g.center[1]:g} {g.center[2]:g} radius {g.radius:g}"
        )
    for box in world.boxes:
        lines.append(
            f"box: {box.lo[0]:g} {box.lo[1]:g} {box.lo[2]:g} "
            f"{box.hi[0]:g} {box.hi[1]:g} {box.hi[2]:g} {box.label}"
        )
    return "\n".join(lines) + "\n"


def load_world(path: str | Path) -> World:
    path = Path(path)
    if not path.exists():
        raise WorldFormatError(f"world file not found: {path}")
    return parse_world(path.read_text(encoding="utf-8"), name_hint=path.stem)


# ---------------------------------------------------------------------------
# Bundled scenario suite. All scenes share a 26 x 18 x 3.2 m footprint, a
# start on the west side, and a goal on the east side, so episodes finish
# well inside the 70 s budget at 0.6 m/s. Openings are at least 1.6 m wide:
# the path search needs 0.6 m of clearance, obstacles sit on a 0.2 m grid.
# ---------------------------------------------------------------------------

_HEADER = """\
size: 26 18 3.2
resolution: 0.2
time_limit: 70
feature_dim: 16
floor: auto
"""


def _world_text(name, seed, start, yaw, goals, instruction, boxes):
    lines = [f"name: {name}", _HEADER.rstrip(), f"feature_seed: {seed}"]
    lines.append(f"start: {start[0]:g} {start[1]:g} {start[2]:g} yaw {yaw:g}")
    lines.append(f"instruction: {instruction}")
    for center, radius in goals:
        lines.append(f"goal: {center[0]:g} {center[1]:g} {center[2]:g} radius {radius:g}")
    for lo, hi, label in boxes:
        lines.append(
            f"box: {lo[0]:g} {lo[1]:g} {lo[2]:g} {hi[0]:g} {hi[1]:g} {hi[2]:g} {label}"
        )
    return "\n".join(lines) + "\n"


def _gap_wall(name, seed, gap_lo, gap_hi, goal_y, multi=False):
    wall = []
    if gap_lo > 0:
        wall.append(((10.0, 0.0, 0.0), (10.6, gap_lo, 3.2), "wall"))
    if gap_hi < 18:
        wall.append(((10.0, gap_hi, 0.0), (10.6, 18.0, 3.2), "wall"))
    gap_mid = (gap_lo + gap_hi) / 2.0
    if multi:
        goals = [((12.5, gap_mid, 1.5), 5.0), ((22.0, goal_y, 1.5), 5.0)]
        instruction = "slip through the wall opening; then stop at the far beacon"
    else:
        goals = [((22.0, goal_y, 1.5), 5.0)]
        instruction = "pass the wall opening and stop at the beacon"
    return _world_text(name, seed, (2.0, 9.0, 1.5), 0.0, goals, instruction, wall)


def _dogleg(name, seed, channel_y, channel_w, turn_x, goal, mirror=False):
    y0 = channel_y - channel_w / 2.0
    y1 = channel_y + channel_w / 2.0
    if not mirror:
        blocks = [
            ((6.0, 0.0, 0.0), (20.0, y0, 3.2), "block"),
            ((6.0, y1, 0.0), (turn_x, 18.0, 3.2), "block"),
        ]
    else:
        blocks = [
            ((6.0, y1, 0.0), (20.0, 18.0, 3.2), "block"),
            ((6.0, 0.0, 0.0), (turn_x, y0, 3.2), "block"),
        ]
    return _world_text(
        name, seed, (2.0, channel_y, 1.5), 0.0, [(goal, 5.0)],
        "follow the passage and stop at the beacon", blocks,
    )


def _slalom(name, seed, w1_top, w2_bottom):
    boxes = [
        ((8.0, 0.0, 0.0), (8.6, w1_top, 3.2), "wall"),
        ((15.0, w2_bottom, 0.0), (15.6, 18.0, 3.2), "wall"),
    ]
    return _world_text(
        name, seed, (2.0, 9.0, 1.5), 0.0, [((22.0, 9.0, 1.5), 5.0)],
        "weave between the walls and stop at the beacon", boxes,
    )


def _pillars(name, seed, xs, ys, side=0.8):
    boxes = []
    for x in xs:
        for y in ys:
            h = side / 2.0
            boxes.append(((x - h, y - h, 0.0), (x + h, y + h, 3.2), "pillar"))
    return _world_text(
        name, seed, (2.0, 9.0, 1.5), 0.0, [((23.0, 9.0, 1.5), 5.0)],
        "thread the pillars and stop at the beacon", boxes,
    )


def _block(name, seed, lo, hi):
    return _world_text(
        name, seed, (2.0, 9.0, 1.5), 0.0, [((22.0, 9.0, 1.5), 5.0)],
        "go around the crate and stop at the beacon",
        [((lo[0], lo[1], 0.0), (hi[0], hi[1], 3.2), "block")],
    )


def builtin_world_texts() -> dict[str, str]:
    worlds = {
        "tutorial": _world_text(
            "tutorial", 3, (2.0, 9.0, 1.5), 0.0, [((16.0, 9.0, 1.5), 5.0)],
            "fly straight ahead and stop at the beacon",
            [((12.0, 14.0, 0.0), (14.0, 16.0, 3.2), "crate")],
        ),
        "gap-south": _gap_wall("gap-south", 11, 3.0, 4.6, 9.0),
        "gap-mid-low": _gap_wall("gap-mid-low", 12, 5.0, 6.6, 10.0),
        "gap-north": _gap_wall("gap-north", 13, 13.4, 15.0, 9.0),
        "gap-high-wide": _gap_wall("gap-high-wide", 14, 11.0, 13.0, 7.0),
        "gap-south-multi": _gap_wall("gap-south-multi", 15, 3.6, 5.2, 10.0, multi=True),
        "gap-north-multi": _gap_wall("gap-north-multi", 16, 12.6, 14.2, 8.0, multi=True),
        "dogleg-north": _dogleg("dogleg-north", 21, 8.8, 2.0, 14.0, (22.0, 13.0, 1.5)),
        "dogleg-north-tight": _dogleg("dogleg-north-tight", 22, 8.0, 1.8, 13.0, (22.0, 13.5, 1.5)),
        "dogleg-south": _dogleg("dogleg-south", 23, 9.2, 2.0, 14.0, (22.0, 5.0, 1.5), mirror=True),
        "dogleg-south-late": _dogleg("dogleg-south-late", 24, 10.0, 2.0, 16.0, (22.0, 5.5, 1.5), mirror=True),
        "dogleg-wide": _dogleg("dogleg-wide", 25, 8.8, 2.4, 15.0, (23.0, 13.0, 1.5)),
        "slalom-a": _slalom("slalom-a", 31, 11.0, 7.0),
        "slalom-b": _slalom("slalom-b", 32, 12.0, 6.0),
        "slalom-tight": _slalom("slalom-tight", 33, 10.4, 7.6),
        "slalom-offset": _slalom("slalom-offset", 34, 11.6, 5.4),
        "pillars-grid": _pillars("pillars-grid", 41, (9.0, 13.0, 17.0), (6.0, 9.0, 12.0)),
        "pillars-stagger": _pillars(
            "pillars-stagger", 42, (8.0, 12.0, 16.0), (7.0, 10.5, 14.0)
        ),
        "pillars-dense": _pillars("pillars-dense", 43, (8.0, 11.0, 14.0, 17.0), (7.5, 10.5)),
        "crate-astride": _block("crate-astride", 51, (10.0, 6.0), (13.0, 11.0)),
        "crate-offset": _block("crate-offset", 52, (11.0, 7.5), (14.0, 12.5)),
    }
    return worlds


def load_builtin(name: str) -> World:
    texts = builtin_world_texts()
    if name not in texts:
        raise WorldFormatError(
            f"unknown builtin world {name!r}; available: {', '.join(sorted(texts))}"
        )
    return parse_world(texts[name], name_hint=name)


def acceptance_suite() -> list[str]:
    """The 20 obstacle-course scenes used by the safety/success suites."""
    return [n for n in builtin_world_texts() if n != "tutorial"]


def resolve_world(ref: str) -> World:
    """Accept either 'builtin:<name>' or a filesystem path."""
    if ref.startswith("builtin:"):
        return load_builtin(ref.split(":", 1)[1])
    return load_world(ref)
