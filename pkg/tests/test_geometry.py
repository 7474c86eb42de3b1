import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from handover_sim.geometry import (
    CameraIntrinsics,
    InvalidDepthError,
    OutOfBoundsError,
    Pose,
    deproject,
    direction_of_yaw,
    perpendicular_frame,
    project,
    quat_from_matrix,
    transform_point,
    yaw_error,
    yaw_of_direction,
)

INTR = CameraIntrinsics(fx=615.0, fy=615.0, cx=320.0, cy=240.0, width=640, height=480)


def random_pose(rng) -> Pose:
    q = rng.normal(size=4)
    return Pose(position=rng.uniform(-2, 2, size=3), orientation=q)


class TestIntrinsics:
    def test_defaults(self):
        assert INTR.min_depth == 0.105
        assert INTR.max_depth > INTR.min_depth

    @pytest.mark.parametrize(
        "kwargs",
        [
            dict(fx=0.0, fy=615.0, cx=320, cy=240, width=640, height=480),
            dict(fx=615.0, fy=-1.0, cx=320, cy=240, width=640, height=480),
            dict(fx=615.0, fy=615.0, cx=640, cy=240, width=640, height=480),
            dict(fx=615.0, fy=615.0, cx=320, cy=240, width=640, height=480, min_depth=2.0, max_depth=1.0),
        ],
    )
    def test_invalid_rejected(self, kwargs):
        with pytest.raises(ValueError):
            CameraIntrinsics(**kwargs)


class TestDeproject:
    def test_principal_point_on_axis(self):
        p = deproject((INTR.cx, INTR.cy), 0.5, INTR)
        assert np.allclose(p, [0.0, 0.0, 0.5], atol=1e-12)

    def test_one_focal_length_off_axis(self):
        # Short focal length so cx + fx stays inside the image.
        intr = CameraIntrinsics(fx=200.0, fy=200.0, cx=320.0, cy=240.0, width=640, height=480)
        p = deproject((intr.cx + intr.fx, intr.cy), 1.0, intr)
        assert np.allclose(p, [1.0, 0.0, 1.0], atol=1e-12)

    def test_out_of_bounds_pixel(self):
        with pytest.raises(OutOfBoundsError):
            deproject((INTR.width, 10), 0.5, INTR)

    @pytest.mark.parametrize("depth", [0.0, 0.05, 5.0])
    def test_invalid_depth(self, depth):
        with pytest.raises(InvalidDepthError):
            deproject((100, 100), depth, INTR)

    def test_round_trip_oracle(self, rng):
        # project(deproject(p, d)) must return (p, d) within 1e-9.
        for _ in range(10_000):
            u = rng.uniform(0, INTR.width - 1e-6)
            v = rng.uniform(0, INTR.height - 1e-6)
            d = rng.uniform(INTR.min_depth, INTR.max_depth)
            u2, v2, d2 = project(deproject((u, v), d, INTR), INTR)
            assert abs(u2 - u) < 1e-9 and abs(v2 - v) < 1e-9 and abs(d2 - d) < 1e-9


class TestPose:
    def test_identity_transform(self):
        assert np.allclose(transform_point(Pose.identity(), [1, 2, 3]), [1, 2, 3])

    def test_pure_translation(self):
        pose = Pose(position=[0, 0, 0.5])
        assert np.allclose(transform_point(pose, [0, 0, 0]), [0, 0, 0.5])

    def test_zero_quaternion_rejected(self):
        with pytest.raises(ValueError):
            Pose(orientation=[0, 0, 0, 0])

    def test_quaternion_renormalized(self):
        pose = Pose(orientation=[2.0, 0, 0, 0])
        assert abs(np.linalg.norm(pose.orientation) - 1.0) < 1e-12

    def test_isometry_oracle(self, rng):
        # Rigid transforms preserve pairwise distances within 1e-9.
        for _ in range(10_000):
            pose = random_pose(rng)
            a = rng.uniform(-1, 1, size=3)
            b = rng.uniform(-1, 1, size=3)
            d0 = np.linalg.norm(a - b)
            d1 = np.linalg.norm(pose.transform(a) - pose.transform(b))
            assert abs(d0 - d1) < 1e-9

    def test_inverse_composes_to_identity(self, rng):
        for _ in range(200):
            pose = random_pose(rng)
            ident = pose.compose(pose.inverse())
            assert np.allclose(ident.position, 0.0, atol=1e-9)
            assert abs(abs(ident.orientation[0]) - 1.0) < 1e-9

    def test_compose_matches_sequential_transform(self, rng):
        for _ in range(200):
            pa, pb = random_pose(rng), random_pose(rng)
            p = rng.uniform(-1, 1, size=3)
            assert np.allclose(pa.compose(pb).transform(p), pa.transform(pb.transform(p)), atol=1e-9)

    def test_rotation_matrix_round_trip(self, rng):
        for _ in range(200):
            pose = random_pose(rng)
            q = quat_from_matrix(pose.rotation_matrix())
            if q[0] * pose.orientation[0] < 0:
                q = -q
            assert np.allclose(q, pose.orientation, atol=1e-9)


class TestYawFrame:
    @given(st.floats(0.0, math.pi - 1e-9), st.integers(0, 5))
    def test_direction_yaw_round_trip(self, yaw, axis_idx):
        axes = [
            [1, 0, 0],
            [0, 1, 0],
            [0, 0, 1],
            [0.6, 0.0, 0.8],
            [0.3, -0.5, 0.81],
            [-0.7, 0.7, 0.14],
        ]
        axis = np.array(axes[axis_idx], dtype=float)
        axis /= np.linalg.norm(axis)
        d = direction_of_yaw(yaw, axis)
        assert abs(float(d @ axis)) < 1e-9
        diff = abs(yaw_of_direction(d, axis) - yaw)
        assert min(diff, math.pi - diff) < 1e-9

    def test_frame_is_orthonormal(self, rng):
        for _ in range(300):
            axis = rng.normal(size=3)
            axis /= np.linalg.norm(axis)
            e1, e2 = perpendicular_frame(axis)
            for va, vb in ((e1, e2), (e1, axis), (e2, axis)):
                assert abs(float(va @ vb)) < 1e-12
            assert abs(np.linalg.norm(e1) - 1) < 1e-12
            assert abs(np.linalg.norm(e2) - 1) < 1e-12

    @given(st.floats(0, math.pi - 1e-9), st.floats(0, math.pi - 1e-9))
    def test_yaw_error_antisymmetric_half_turn(self, a, b):
        err = yaw_error(a, b)
        assert -math.pi / 2 < err <= math.pi / 2
        assert abs((b + err - a) % math.pi) < 1e-9 or abs((b + err - a) % math.pi - math.pi) < 1e-9
