import math
from collections import deque

import numpy as np
import pytest

from aeronav.geometry import CameraIntrinsics, Pixel, Pose
from aeronav.verifier import (
    CandidateGoal,
    VerifierConfig,
    connected_region,
    disk_structure,
    feasible_set,
    gate_range,
    lift_goal,
    refine_target,
    similarity_mask,
    verify,
    write_pgm,
)

K640 = CameraIntrinsics(320.0, 320.0, 320.0, 240.0, 640, 480, 2.0 * math.atan(1.0))
K64 = CameraIntrinsics.from_fov(64, 48, math.pi / 2.0)


def unit_rows(arr):
    return arr / np.linalg.norm(arr, axis=-1, keepdims=True)


def uniform_features(h, w, dim=8):
    f = np.zeros((h, w, dim))
    f[..., 0] = 1.0
    return f


def random_features(h, w, dim, rng):
    return unit_rows(rng.normal(size=(h, w, dim)))


class TestSimilarityMask:
    def test_uniform_raster_masks_entire_roi(self):
        feats = uniform_features(32, 32)
        mask = similarity_mask(feats, Pixel(16, 16), 0.5, 5)
        assert mask[11:22, 11:22].all()
        assert mask.sum() == 11 * 11

    def test_orthogonal_regions_split(self):
        feats = uniform_features(32, 32)
        feats[:, 16:, 0] = 0.0
        feats[:, 16:, 1] = 1.0
        mask = similarity_mask(feats, Pixel(8, 16), 0.5, 31)
        assert mask[:, :16].all()
        assert not mask[:, 16:].any()

    def test_matches_bruteforce_threshold(self):
        rng = np.random.default_rng(3)
        feats = random_features(16, 16, 6, rng)
        p = Pixel(7, 9)
        mask = similarity_mask(feats, p, 0.7, 6)
        ref = np.zeros((16, 16), dtype=bool)
        for y in range(16):
            for x in range(16):
                in_roi = abs(x - p.x) <= 6 and abs(y - p.y) <= 6
                ref[y, x] = in_roi and float(feats[y, x] @ feats[p.y, p.x]) >= 0.7
        ref[p.y, p.x] = True
        assert np.array_equal(mask, ref)

    def test_target_pixel_always_set(self):
        rng = np.random.default_rng(5)
        feats = random_features(8, 8, 4, rng)
        mask = similarity_mask(feats, Pixel(3, 3), 1.0, 2)
        assert mask[3, 3]


def flood_fill(mask, p):
    """BFS reference for 4-connected components."""
    out = np.zeros_like(mask, dtype=bool)
    if not mask[p.y, p.x]:
        out[p.y, p.x] = True
        return out
    q = deque([(p.y, p.x)])
    out[p.y, p.x] = True
    h, w = mask.shape
    while q:
        y, x = q.popleft()
        for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and mask[ny, nx] and not out[ny, nx]:
                out[ny, nx] = True
                q.append((ny, nx))
    return out


class TestConnectedRegion:
    def test_full_mask_returns_everything(self):
        mask = np.ones((10, 10), dtype=bool)
        region = connected_region(mask, Pixel(4, 4))
        assert region.all()

    def test_diagonal_blobs_are_separate(self):
        mask = np.zeros((6, 6), dtype=bool)
        mask[0:2, 0:2] = True
        mask[2:4, 2:4] = True  # touches the first blob only at a corner
        region = connected_region(mask, Pixel(0, 0))
        assert region[0:2, 0:2].all()
        assert not region[2:4, 2:4].any()

    def test_cleared_pixel_degenerates_to_singleton(self):
        mask = np.zeros((5, 5), dtype=bool)
        region = connected_region(mask, Pixel(2, 3))
        assert region[3, 2] and region.sum() == 1

    def test_matches_flood_fill_oracle(self):
        rng = np.random.default_rng(17)
        for trial in range(25):
            mask = rng.random((32, 32)) < 0.55
            p = Pixel(int(rng.integers(32)), int(rng.integers(32)))
            mask[p.y, p.x] = True
            assert np.array_equal(connected_region(mask, p), flood_fill(mask, p))


def brute_dilate(obstacle, radius):
    h, w = obstacle.shape
    out = np.zeros_like(obstacle)
    ys, xs = np.nonzero(obstacle)
    for y in range(h):
        for x in range(w):
            if ((ys - y) ** 2 + (xs - x) ** 2 <= radius * radius).any():
                out[y, x] = True
    return out


class TestFeasibleSet:
    def test_all_far_everything_feasible(self):
        depth = np.full((20, 20), np.inf)
        cfg = VerifierConfig()
        assert feasible_set(depth, cfg, K64, 3.0).all()

    def test_zero_radius_only_obstacle_pixel_infeasible(self):
        depth = np.full((20, 20), 10.0)
        depth[5, 5] = 0.4
        cfg = VerifierConfig(dilation_radius_m=0.0)
        feas = feasible_set(depth, cfg, K64, 3.0)
        assert not feas[5, 5]
        assert feas.sum() == 20 * 20 - 1

    def test_wall_band_width_at_target_depth(self):
        # wall on the left half closer than the obstacle margin; clearance
        # 0.2 m at 2 m with f_x = 320 dilates by round(0.2*320/2) = 32 px
        depth = np.full((480, 640), 10.0)
        depth[:, :320] = 0.5
        cfg = VerifierConfig(dilation_radius_m=0.2)
        feas = feasible_set(depth, cfg, K640, 2.0)
        assert not feas[:, :352].any()
        assert feas[:, 352:].all()

    def test_matches_morphological_oracle(self):
        rng = np.random.default_rng(23)
        depth = np.where(rng.random((24, 24)) < 0.1, 0.5, 9.0)
        cfg = VerifierConfig(dilation_radius_m=0.2)
        k = K640
        feas = feasible_set(depth, cfg, k, 2.5)
        radius = round(0.2 * k.f_x / 2.5)
        expected = ~brute_dilate(depth < cfg.obstacle_depth_margin, radius)
        assert np.array_equal(feas, expected)

    def test_pixel_mode_uses_radius_directly(self):
        depth = np.full((20, 20), 10.0)
        depth[10, 10] = 0.4
        cfg = VerifierConfig(dilation_radius_m=2.0, dilation_mode="pixel")
        feas = feasible_set(depth, cfg, K64, 3.0)
        expected = ~brute_dilate(depth < cfg.obstacle_depth_margin, 2)
        assert np.array_equal(feas, expected)


def make_goal(depth, feats, pixel):
    return CandidateGoal(pixel, depth, feats, Pose(np.zeros(3), 0.0))


class TestRefineTarget:
    def test_long_range_target_skips_refinement(self):
        depth = np.full((48, 64), 9.0)
        goal = make_goal(depth, uniform_features(48, 64), Pixel(30, 20))
        out = refine_target(goal, VerifierConfig(), K64)
        assert out.skipped
        assert out.pixel == goal.pixel
        assert out.depth == 7.0

    def test_feasible_target_is_unchanged(self):
        depth = np.full((48, 64), 5.0)
        goal = make_goal(depth, uniform_features(48, 64), Pixel(30, 20))
        out = refine_target(goal, VerifierConfig(), K64)
        assert not out.skipped and not out.unrefined
        assert out.pixel == goal.pixel
        assert out.depth == 5.0

    def test_non_finite_depth_treated_as_long_range(self):
        depth = np.full((48, 64), np.inf)
        goal = make_goal(depth, uniform_features(48, 64), Pixel(30, 20))
        out = refine_target(goal, VerifierConfig(), K64)
        assert out.skipped and out.depth == 7.0

    def test_empty_intersection_flags_unrefined(self):
        depth = np.full((48, 64), 0.6)  # everything is an obstacle
        goal = make_goal(depth, uniform_features(48, 64), Pixel(30, 20))
        out = refine_target(goal, VerifierConfig(), K64)
        assert out.unrefined
        assert out.pixel == goal.pixel

    def test_matches_bruteforce_nearest_feasible(self):
        rng = np.random.default_rng(31)
        cfg = VerifierConfig(roi_half_extent=20)
        for trial in range(20):
            depth = np.where(rng.random((48, 64)) < 0.12, 0.6, 4.0)
            feats = uniform_features(48, 64)
            p = Pixel(int(rng.integers(10, 54)), int(rng.integers(10, 38)))
            depth[p.y, p.x] = 4.0  # keep the target itself mid-range
            goal = make_goal(depth, feats, p)
            out = refine_target(goal, cfg, K64)

            mask = similarity_mask(feats, p, cfg.similarity_threshold, cfg.roi_half_extent)
            region = connected_region(mask, p)
            feas = feasible_set(depth, cfg, K64, 4.0)
            cand = region & feas
            if not cand.any():
                assert out.unrefined
                continue
            best = None
            for y in range(48):
                for x in range(64):
                    if cand[y, x]:
                        key = ((x - p.x) ** 2 + (y - p.y) ** 2, y, x)
                        if best is None or key < best[0]:
                            best = (key, Pixel(x, y))
            assert out.pixel == best[1]

    def test_refined_pixel_semantically_consistent(self):
        rng = np.random.default_rng(37)
        feats = random_features(48, 64, 8, rng)
        depth = np.where(rng.random((48, 64)) < 0.15, 0.6, 4.0)
        cfg = VerifierConfig(similarity_threshold=0.2, roi_half_extent=24)
        for trial in range(10):
            p = Pixel(int(rng.integers(5, 59)), int(rng.integers(5, 43)))
            depth[p.y, p.x] = 4.0
            goal = make_goal(depth, feats, p)
            out = refine_target(goal, cfg, K64)
            if not out.skipped and not out.unrefined and out.pixel != p:
                sim = float(feats[out.pixel.y, out.pixel.x] @ feats[p.y, p.x])
                assert sim >= cfg.similarity_threshold
            assert out.depth <= cfg.max_depth


class TestGateRange:
    CFG = VerifierConfig()

    def test_zero_bearing_passes_through(self):
        assert gate_range(5.0, 0.0, self.CFG, K64) == 5.0

    def test_unit_argument(self):
        theta = self.CFG.bearing_sigma * K64.half_fov_x
        assert gate_range(4.0, theta, self.CFG, K64) == pytest.approx(
            4.0 * math.exp(-0.5), abs=1e-12
        )

    def test_hand_evaluated_case(self):
        # half fov pi/4, sigma 0.5, bearing pi/8 -> exp(-1/2)
        k = CameraIntrinsics.from_fov(640, 480, math.pi / 2.0)
        out = gate_range(7.0, math.pi / 8.0, VerifierConfig(bearing_sigma=0.5), k)
        assert out == pytest.approx(7.0 * math.exp(-0.5), abs=1e-9)
        assert out == pytest.approx(4.2457, abs=1e-4)

    def test_strictly_decreasing_in_bearing_magnitude(self):
        thetas = np.linspace(0.0, K64.half_fov_x, 25)
        gates = [gate_range(6.0, t, self.CFG, K64) for t in thetas]
        assert all(b < a for a, b in zip(gates, gates[1:]))
        neg = [gate_range(6.0, -t, self.CFG, K64) for t in thetas]
        assert neg == gates

    def test_rejects_nonpositive_depth(self):
        with pytest.raises(ValueError):
            gate_range(0.0, 0.1, self.CFG, K64)


class TestLiftGoal:
    def test_principal_point_is_straight_ahead(self):
        goal = lift_goal(Pixel(32, 24), 3.0, K64, Pose(np.zeros(3), 0.0))
        assert np.allclose(goal.point, [3.0, 0.0, 0.0])
        assert goal.bearing == 0.0

    def test_matches_composition_on_random_cases(self):
        from aeronav.geometry import camera_to_odom, pixel_to_camera

        rng = np.random.default_rng(41)
        for _ in range(100):
            px = Pixel(int(rng.integers(64)), int(rng.integers(48)))
            d = float(rng.uniform(0.5, 7.0))
            pose = Pose(rng.normal(size=3), float(rng.uniform(-3, 3)))
            goal = lift_goal(px, d, K64, pose)
            expected = camera_to_odom(pixel_to_camera(px, d, K64), pose)
            assert np.allclose(goal.point, expected)

    def test_goal_invariants_hold(self):
        cfg = VerifierConfig()
        goal = lift_goal(Pixel(60, 24), 2.0, K64, Pose(np.zeros(3), 0.0))
        goal.validate(cfg, K64)


class TestVerifyPipeline:
    def test_unrefined_halves_gated_range(self):
        depth = np.full((48, 64), 0.6)
        goal = make_goal(depth, uniform_features(48, 64), Pixel(32, 24))
        cfg = VerifierConfig()
        nav = verify(goal, cfg, K64)
        assert nav.unrefined
        assert nav.gated_range == pytest.approx(0.6 * cfg.unrefined_range_scale)

    def test_clean_target_full_range(self):
        depth = np.full((48, 64), 5.0)
        goal = make_goal(depth, uniform_features(48, 64), Pixel(32, 24))
        nav = verify(goal, VerifierConfig(), K64)
        assert not nav.unrefined
        assert nav.gated_range == pytest.approx(5.0)
        assert np.allclose(nav.point, [5.0, 0.0, 0.0])


class TestDebugDump:
    def test_pgm_roundtrip_header(self, tmp_path):
        arr = np.zeros((4, 6), dtype=bool)
        arr[1, 2] = True
        path = tmp_path / "mask.pgm"
        write_pgm(path, arr)
        data = path.read_bytes()
        assert data.startswith(b"P5\n6 4\n255\n")
        assert len(data) == len(b"P5\n6 4\n255\n") + 24
