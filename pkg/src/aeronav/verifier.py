"""Semantic-geometric goal verification.

A predicted image target carries semantic intent but no feasibility
guarantee: it may sit on an obstacle or at the image boundary where depth is
unreliable. The pipeline here (1) re-anchors the pixel inside the
semantically consistent region that also passes a depth-clearance check, and
(2) attenuates the forward range by a Gaussian in bearing so boundary
targets make the vehicle turn before it commits to forward motion. The
result is lifted to a 3D goal in the odometry frame for the local planner.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from scipy import ndimage

from .geometry import (
    CameraIntrinsics,
    Pixel,
    Pose,
    bearing,
    camera_to_odom,
    pixel_to_camera,
    round_half_away,
)

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)


@dataclass
class VerifierConfig:
    similarity_threshold: float = 0.5  # cosine similarity floor for the mask
    roi_half_extent: int = 48
    max_depth: float = 7.0
    dilation_radius_m: float = 0.2
    dilation_mode: str = "metric"  # or "pixel": radius interpreted in pixels
    bearing_sigma: float = 0.5
    obstacle_depth_margin: float = 1.2
    unrefined_range_scale: float = 0.5  # caution factor when refinement finds nothing

    def __post_init__(self) -> None:
        if not -1.0 <= self.similarity_threshold <= 1.0:
            raise ValueError("similarity_threshold must be in [-1, 1]")
        if self.max_depth <= 0.0:
            raise ValueError("max_depth must be positive")
        if self.dilation_radius_m < 0.0:
            raise ValueError("dilation radius must be non-negative")
        if self.bearing_sigma <= 0.0:
            raise ValueError("bearing_sigma must be positive")
        if self.dilation_mode not in ("metric", "pixel"):
            raise ValueError("dilation_mode must be 'metric' or 'pixel'")


@dataclass
class CandidateGoal:
    """Packaged decision-agent output: target pixel plus the rasters and pose
    it was predicted against."""

    pixel: Pixel
    depth_map: np.ndarray
    feature_map: np.ndarray
    pose: Pose
    clamped: bool = False

    def __post_init__(self) -> None:
        h, w = self.depth_map.shape
        if self.feature_map.shape[:2] != (h, w):
            raise ValueError("depth and feature rasters must share dimensions")
        if not self.pixel.in_bounds(w, h):
            raise ValueError(f"pixel {self.pixel} outside {w}x{h} raster")


@dataclass(frozen=True)
class NavigationGoal:
    """Verified 3D goal in the odometry frame."""

    point: np.ndarray
    refined_pixel: Pixel
    gated_range: float
    bearing: float
    unrefined: bool = False

    def validate(self, cfg: VerifierConfig, k: CameraIntrinsics) -> None:
        if not 0.0 < self.gated_range <= cfg.max_depth:
            raise ValueError(f"gated range {self.gated_range} outside (0, {cfg.max_depth}]")
        if abs(self.bearing) > k.half_fov_x + 1e-9:
            raise ValueError(f"bearing {self.bearing} exceeds half field of view")


@dataclass(frozen=True)
class RefinedTarget:
    pixel: Pixel
    depth: float
    unrefined: bool = False  # no feasible pixel found in the target's region
    skipped: bool = False    # long-range target, refinement bypassed


def roi_bounds(p: Pixel, half_extent: int, width: int, height: int):
    """Inclusive-exclusive (y0, y1, x0, x1) of the ROI clipped to the image."""
    y0 = max(p.y - half_extent, 0)
    y1 = min(p.y + half_extent + 1, height)
    x0 = max(p.x - half_extent, 0)
    x1 = min(p.x + half_extent + 1, width)
    return y0, y1, x0, x1


def similarity_mask(
    feature_map: np.ndarray, p: Pixel, tau: float, roi_half_extent: int
) -> np.ndarray:
    """Image-sized boolean mask: inside the ROI around p and cosine-similar
    to p's feature at threshold tau. The target pixel itself is always set."""
    h, w = feature_map.shape[:2]
    if not p.in_bounds(w, h):
        raise ValueError(f"pixel {p} outside raster")
    y0, y1, x0, x1 = roi_bounds(p, roi_half_extent, w, h)
    ref = feature_map[p.y, p.x]
    sims = feature_map[y0:y1, x0:x1] @ ref
    mask = np.zeros((h, w), dtype=bool)
    mask[y0:y1, x0:x1] = sims >= tau
    mask[p.y, p.x] = True
    return mask


def connected_region(mask: np.ndarray, p: Pixel) -> np.ndarray:
    """4-connected component of the mask containing p.

    A cleared target pixel degenerates to the singleton {p}.
    """
    out = np.zeros_like(mask, dtype=bool)
    if not mask[p.y, p.x]:
        out[p.y, p.x] = True
        return out
    labels, _ = ndimage.label(mask, structure=FOUR_CONNECTED)
    out[:] = labels == labels[p.y, p.x]
    return out


def disk_structure(radius: int) -> np.ndarray:
    if radius <= 0:
        return np.ones((1, 1), dtype=bool)
    span = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(span, span, indexing="ij")
    return dy * dy + dx * dx <= radius * radius


def feasible_set(
    depth_map: np.ndarray,
    cfg: VerifierConfig,
    k: CameraIntrinsics,
    target_depth: float,
) -> np.ndarray:
    """Depth-feasible pixels: the complement of the near-obstacle mask after
    dilation by a clearance disk.

    In metric mode the disk radius converts the metric clearance to pixels
    at the target's depth (floored at 0.5 m so the radius stays bounded).
    """
    obstacle = depth_map < cfg.obstacle_depth_margin
    if cfg.dilation_mode == "metric":
        ref_depth = max(target_depth, 0.5) if math.isfinite(target_depth) else 0.5
        radius = round_half_away(cfg.dilation_radius_m * k.f_x / ref_depth)
    else:
        radius = round_half_away(cfg.dilation_radius_m)
    if radius > 0 and obstacle.any():
        obstacle = ndimage.binary_dilation(obstacle, structure=disk_structure(radius))
    return ~obstacle


def refine_target(goal: CandidateGoal, cfg: VerifierConfig, k: CameraIntrinsics) -> RefinedTarget:
    """Move the target to the nearest semantically consistent, depth-feasible
    pixel; long-range targets are passed through at the depth cap."""
    p = goal.pixel
    d = float(goal.depth_map[p.y, p.x])
    if not math.isfinite(d) or d > cfg.max_depth:
        return RefinedTarget(p, cfg.max_depth, skipped=True)

    mask = similarity_mask(goal.feature_map, p, cfg.similarity_threshold, cfg.roi_half_extent)
    region = connected_region(mask, p)
    feasible = feasible_set(goal.depth_map, cfg, k, d)
    candidates = region & feasible
    if not candidates.any():
        return RefinedTarget(p, min(d, cfg.max_depth), unrefined=True)

    ys, xs = np.nonzero(candidates)
    d2 = (xs - p.x) ** 2 + (ys - p.y) ** 2
    order = np.lexsort((xs, ys, d2))  # nearest first, ties by smaller row then column
    best = order[0]
    refined = Pixel(int(xs[best]), int(ys[best]))
    depth = float(goal.depth_map[refined.y, refined.x])
    if not math.isfinite(depth):
        depth = cfg.max_depth
    return RefinedTarget(refined, min(depth, cfg.max_depth))


def gate_range(depth: float, theta: float, cfg: VerifierConfig, k: CameraIntrinsics) -> float:
    """Attenuate the forward range by a Gaussian in bearing."""
    if depth <= 0.0:
        raise ValueError("depth must be positive")
    theta_max = k.half_fov_x
    if theta_max <= 0.0:
        raise ValueError("camera must have a positive field of view")
    z = theta / (cfg.bearing_sigma * theta_max)
    return depth * math.exp(-0.5 * z * z)


def lift_goal(
    pixel: Pixel,
    gated: float,
    k: CameraIntrinsics,
    pose: Pose,
    unrefined: bool = False,
) -> NavigationGoal:
    """Back-project the refined pixel at the gated range and express it in
    the odometry frame."""
    point = camera_to_odom(pixel_to_camera(pixel, gated, k), pose)
    return NavigationGoal(point, pixel, gated, bearing(pixel, k), unrefined)


def verify(goal: CandidateGoal, cfg: VerifierConfig, k: CameraIntrinsics) -> NavigationGoal:
    """Full pipeline: refine, gate by bearing, lift to 3D.

    When refinement found no feasible pixel the gated range is additionally
    scaled down as a caution measure before the goal reaches the planner.
    """
    refined = refine_target(goal, cfg, k)
    theta = bearing(refined.pixel, k)
    gated = gate_range(refined.depth, theta, cfg, k)
    if refined.unrefined:
        gated *= cfg.unrefined_range_scale
    return lift_goal(refined.pixel, gated, k, goal.pose, unrefined=refined.unrefined)


def write_pgm(path: str | Path, values: np.ndarray) -> None:
    """Binary PGM dump of a boolean or [0, 1] float raster (debug aid)."""
    arr = np.asarray(values)
    if arr.dtype == bool:
        gray = np.where(arr, 255, 0).astype(np.uint8)
    else:
        finite = np.where(np.isfinite(arr), arr, 0.0)
        top = float(finite.max()) if finite.size and finite.max() > 0 else 1.0
        gray = np.clip(finite / top * 255.0, 0, 255).astype(np.uint8)
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(f"P5\n{gray.shape[1]} {gray.shape[0]}\n255\n".encode("ascii"))
        fh.write(gray.tobytes())


def dump_debug_rasters(
    out_dir: str | Path,
    step: int,
    goal: CandidateGoal,
    cfg: VerifierConfig,
    k: CameraIntrinsics,
) -> None:
    """Write mask/region/feasible/chosen-pixel rasters keyed by step index."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    p = goal.pixel
    mask = similarity_mask(goal.feature_map, p, cfg.similarity_threshold, cfg.roi_half_extent)
    region = connected_region(mask, p)
    d = float(goal.depth_map[p.y, p.x])
    feasible = feasible_set(goal.depth_map, cfg, k, d if math.isfinite(d) else cfg.max_depth)
    refined = refine_target(goal, cfg, k)
    chosen = np.zeros_like(mask)
    chosen[refined.pixel.y, refined.pixel.x] = True
    write_pgm(out / f"step{step:05d}_mask.pgm", mask)
    write_pgm(out / f"step{step:05d}_region.pgm", region)
    write_pgm(out / f"step{step:05d}_feasible.pgm", feasible)
    write_pgm(out / f"step{step:05d}_refined.pgm", chosen)
