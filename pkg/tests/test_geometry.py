import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aeronav.geometry import (
    CameraIntrinsics,
    Pixel,
    Pose,
    bearing,
    bearing_to_column,
    camera_to_odom,
    pixel_to_camera,
    project_to_pixel,
    round_half_away,
    wrap_angle,
)

K640 = CameraIntrinsics(320.0, 320.0, 320.0, 240.0, 640, 480, 2.0 * math.atan(1.0))


def identity_pose():
    return Pose(np.zeros(3), 0.0)


class TestWrapAngle:
    def test_zero(self):
        assert wrap_angle(0.0) == 0.0

    def test_three_half_pi(self):
        assert wrap_angle(3.0 * math.pi / 2.0) == pytest.approx(-math.pi / 2.0, abs=1e-12)

    def test_negative_pi_maps_to_pi(self):
        # half-open interval (-pi, pi]
        assert wrap_angle(-math.pi) == pytest.approx(math.pi, abs=1e-12)

    def test_non_finite_rejected(self):
        with pytest.raises(ValueError):
            wrap_angle(float("nan"))
        with pytest.raises(ValueError):
            wrap_angle(float("inf"))

    @given(st.floats(-50.0, 50.0))
    def test_idempotent_and_in_range(self, a):
        w = wrap_angle(a)
        assert -math.pi < w <= math.pi
        assert wrap_angle(w) == pytest.approx(w, abs=1e-12)
        # congruent mod 2*pi
        assert math.isclose(math.sin(w), math.sin(a), abs_tol=1e-9)
        assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)


class TestRounding:
    @pytest.mark.parametrize(
        "value,expected",
        [(2.5, 3), (-2.5, -3), (2.4, 2), (-2.4, -2), (0.5, 1), (-0.5, -1), (0.0, 0)],
    )
    def test_half_away_from_zero(self, value, expected):
        assert round_half_away(value) == expected


class TestIntrinsics:
    def test_fov_consistency_enforced(self):
        with pytest.raises(ValueError):
            CameraIntrinsics(320.0, 320.0, 320.0, 240.0, 640, 480, 1.0)

    def test_from_fov(self):
        k = CameraIntrinsics.from_fov(64, 48, math.pi / 2.0)
        assert k.f_x == pytest.approx(32.0)
        assert k.c_x == 32.0 and k.c_y == 24.0


class TestPixelToCamera:
    def test_principal_point_is_optical_axis(self):
        v = pixel_to_camera(Pixel(320, 240), 2.0, K640)
        assert np.allclose(v, [0.0, 0.0, 2.0])

    def test_unit_tangent(self):
        # a pixel one focal length right of the principal point sits at 45 degrees
        k = CameraIntrinsics(320.0, 320.0, 300.0, 240.0, 640, 480,
                             2.0 * math.atan(1.0))
        v = pixel_to_camera(Pixel(620, 240), 1.0, k)
        assert np.allclose(v, [1.0, 0.0, 1.0])

    def test_hand_evaluated_case(self):
        # d*(p - c)/f per axis
        v = pixel_to_camera(Pixel(480, 300), 3.5, K640)
        assert np.allclose(v, [1.75, 0.65625, 3.5], atol=1e-12)

    def test_nonpositive_depth_rejected(self):
        with pytest.raises(ValueError):
            pixel_to_camera(Pixel(320, 240), 0.0, K640)
        with pytest.raises(ValueError):
            pixel_to_camera(Pixel(320, 240), -1.0, K640)


class TestCameraToOdom:
    def test_identity_pose_axis_convention(self):
        # camera z (forward) maps to body/odom x
        v = camera_to_odom(np.array([0.0, 0.0, 2.0]), identity_pose())
        assert np.allclose(v, [2.0, 0.0, 0.0])

    def test_quarter_turn_with_offset(self):
        pose = Pose(np.array([1.0, 1.0, 0.0]), math.pi / 2.0)
        v = camera_to_odom(np.array([0.0, 0.0, 1.0]), pose)
        assert np.allclose(v, [1.0, 2.0, 0.0], atol=1e-12)

    def test_rotation_orthonormal(self):
        pose = Pose(np.array([0.3, -0.2, 1.5]), 0.7, pitch=0.1)
        r = pose.rotation
        assert np.allclose(r.T @ r, np.eye(3), atol=1e-9)


class TestProjectToPixel:
    def test_point_ahead_hits_principal_point(self):
        p = project_to_pixel(np.array([2.0, 0.0, 0.0]), identity_pose(), K640)
        assert p == Pixel(320, 240)

    def test_point_behind_camera(self):
        assert project_to_pixel(np.array([-1.0, 0.0, 0.0]), identity_pose(), K640) is None

    def test_roundtrip_of_backprojection_case(self):
        x = camera_to_odom(pixel_to_camera(Pixel(480, 300), 3.5, K640), identity_pose())
        assert project_to_pixel(x, identity_pose(), K640) == Pixel(480, 300)

    @given(
        st.integers(0, 639),
        st.integers(0, 479),
        st.floats(0.5, 50.0),
        st.floats(-3.0, 3.0),
        st.floats(-0.2, 0.2),
    )
    @settings(max_examples=200)
    def test_project_backproject_roundtrip(self, px, py, depth, yaw, pitch):
        pose = Pose(np.array([0.4, -1.2, 2.0]), yaw, pitch=pitch)
        x = camera_to_odom(pixel_to_camera(Pixel(px, py), depth, K640), pose)
        back = project_to_pixel(x, pose, K640)
        assert back is not None
        assert abs(back.x - px) <= 0.5 and abs(back.y - py) <= 0.5


class TestBearing:
    def test_center_zero(self):
        assert bearing(Pixel(320, 100), K640) == 0.0

    def test_focal_offset_is_quarter_pi(self):
        assert bearing(Pixel(640 - 0, 0), K640) == pytest.approx(math.atan(1.0), abs=1e-12)

    def test_hand_evaluated(self):
        assert bearing(Pixel(160, 0), K640) == pytest.approx(math.atan(-0.5), abs=1e-12)

    def test_monotone_in_column(self):
        values = [bearing(Pixel(x, 0), K640) for x in range(0, 640, 7)]
        assert all(b > a for a, b in zip(values, values[1:]))

    def test_bearing_to_column_inverts(self):
        for col in (0, 100, 320, 555, 639):
            theta = bearing(Pixel(col, 0), K640)
            assert bearing_to_column(theta, K640) == col
