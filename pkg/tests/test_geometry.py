import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from f2vreg.geometry import (
    GimbalLockWarning,
    GridSpec,
    Pose,
    RigidTransform,
    five_point_set,
    pose_to_transform,
    rotation_from_euler,
    slice_points,
    transform_to_pose,
    wrap_degrees,
)

VOL = GridSpec((32, 128, 128), (0.62, 0.62, 0.62), center=(1.5, -2.0, 3.0))
SLICE = GridSpec((128, 128), (0.62, 0.62))

angles = st.floats(-720, 720, allow_nan=False)


def per_axis(rx, ry, rz):
    # independent oracle: explicit single-axis matrices multiplied in order
    def rot(axis, deg):
        a = math.radians(deg)
        c, s = math.cos(a), math.sin(a)
        m = np.eye(3)
        i, j = [(1, 2), (0, 2), (0, 1)][axis]
        m[i, i], m[j, j] = c, c
        m[i, j], m[j, i] = -s, s
        if axis == 1:
            m[i, j], m[j, i] = s, -s
        return m

    return rot(2, rz) @ rot(1, ry) @ rot(0, rx)


def random_poses(n, seed=0):
    rng = np.random.default_rng(seed)
    return [Pose(*rng.uniform(-10, 10, 3), *rng.uniform(-20, 20, 3)) for _ in range(n)]


class TestRotation:
    def test_identity(self):
        assert np.array_equal(rotation_from_euler(0, 0, 0), np.eye(3))

    def test_quarter_turn_z(self):
        np.testing.assert_allclose(rotation_from_euler(0, 0, 90) @ [1, 0, 0], [0, 1, 0], atol=1e-15)

    def test_matches_per_axis_oracle(self):
        diff = np.abs(rotation_from_euler(10, 20, 30) - per_axis(10, 20, 30)).max()
        assert diff < 1e-12

    def test_non_finite(self):
        with pytest.raises(ValueError):
            rotation_from_euler(float("nan"), 0, 0)

    def test_orthonormal_many(self):
        rng = np.random.default_rng(1)
        for a in rng.uniform(-360, 360, (10_000, 3)):
            r = rotation_from_euler(*a)
            assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9
            assert abs(np.linalg.det(r) - 1) < 1e-9

    @given(angles, angles, angles)
    def test_orthonormal_property(self, rx, ry, rz):
        r = rotation_from_euler(rx, ry, rz)
        assert np.abs(r.T @ r - np.eye(3)).max() < 1e-9


class TestPose:
    def test_wrapping(self):
        assert Pose(rz=359).rz == pytest.approx(-1)
        assert Pose(rx=-180).rx == 180
        assert Pose(ry=180).ry == 180

    @given(angles)
    def test_wrap_range(self, a):
        w = wrap_degrees(a)
        assert -180 < w <= 180
        assert math.isclose(math.cos(math.radians(w)), math.cos(math.radians(a)), abs_tol=1e-9)

    def test_non_finite(self):
        with pytest.raises(ValueError):
            Pose(tx=float("inf"))


class TestTransform:
    def test_identity_pose(self):
        t = pose_to_transform(Pose(), VOL)
        assert np.array_equal(t.rotation, np.eye(3))
        assert np.array_equal(t.translation, np.array(VOL.center))

    def test_pure_translation(self):
        t = pose_to_transform(Pose(1, 2, 3), VOL)
        assert np.array_equal(t.rotation, np.eye(3))
        assert np.array_equal(t.translation, np.array(VOL.center) + [1, 2, 3])

    def test_inverse_simple(self):
        assert transform_to_pose(RigidTransform(np.eye(3), np.array(VOL.center)), VOL) == Pose()
        p = transform_to_pose(RigidTransform(rotation_from_euler(0, 0, 90), np.array(VOL.center)), VOL)
        np.testing.assert_allclose(p.as_vector(), [0, 0, 0, 0, 0, 90], atol=1e-12)

    def test_round_trip_1000(self):
        for p in random_poses(1000):
            q = transform_to_pose(pose_to_transform(p, VOL), VOL)
            assert np.abs(q.as_vector() - p.as_vector()).max() < 1e-9

    def test_gimbal_lock(self):
        t = RigidTransform(rotation_from_euler(10, 90, 25), np.zeros(3))
        with pytest.warns(GimbalLockWarning):
            p = transform_to_pose(t, GridSpec((2, 2, 2), (1, 1, 1)))
        assert p.rz == 0
        np.testing.assert_allclose(rotation_from_euler(p.rx, p.ry, p.rz), t.rotation, atol=1e-9)

    def test_rejects_non_rotation(self):
        with pytest.raises(ValueError):
            RigidTransform(np.diag([1.0, 1.0, -1.0]))


class TestSlicePoints:
    def test_center_maps_to_volume_center(self):
        # 128x128: the center is the non-integer pixel (63.5, 63.5)
        pts = five_point_set(Pose(), SLICE, VOL)
        assert np.array_equal(pts[4], np.array(VOL.center))
        grid = slice_points(Pose(), SLICE, VOL)
        np.testing.assert_allclose(grid[63:65, 63:65].reshape(-1, 3).mean(axis=0), VOL.center, atol=1e-12)

    def test_shape(self):
        assert slice_points(Pose(), GridSpec((5, 7), (1, 1)), VOL).shape == (5, 7, 3)

    def test_pure_translation_shift(self):
        a = slice_points(Pose(), SLICE, VOL)
        b = slice_points(Pose(tx=2.5), SLICE, VOL)
        d = b - a
        np.testing.assert_allclose(d[..., 0], 2.5, atol=1e-12)
        assert np.all(d[..., 1:] == 0)

    def test_rz_corner_chord(self):
        # corner displacement of a rotation about the center is the chord 2 r sin(theta/2)
        a = slice_points(Pose(), SLICE, VOL)
        b = slice_points(Pose(rz=10), SLICE, VOL)
        r = 63.5 * 0.62 * math.sqrt(2)
        expected = 2 * r * math.sin(math.radians(5))
        direct = rotation_from_euler(0, 0, 10) @ (a[0, 0] - VOL.center) + VOL.center
        assert np.linalg.norm(b[0, 0] - a[0, 0]) == pytest.approx(expected, abs=1e-9)
        np.testing.assert_allclose(b[0, 0], direct, atol=1e-9)

    def test_five_points_agree_with_grid(self):
        for p in random_poses(20, seed=3):
            grid = slice_points(p, SLICE, VOL)
            five = five_point_set(p, SLICE, VOL)
            corners = [grid[0, 0], grid[0, -1], grid[-1, 0], grid[-1, -1]]
            for c, f in zip(corners, five[:4]):
                assert np.array_equal(c, f)

    def test_five_points_translation(self):
        a = five_point_set(Pose(), SLICE, VOL)
        b = five_point_set(Pose(3, 4, 0), SLICE, VOL)
        np.testing.assert_allclose(np.linalg.norm(b - a, axis=1), 5.0, rtol=0, atol=1e-12)

    @settings(max_examples=50)
    @given(
        st.tuples(*[st.floats(-10, 10)] * 3),
        st.tuples(*[st.floats(-20, 20)] * 3),
        st.tuples(*[st.floats(-5, 5)] * 3),
    )
    def test_translation_equivariance(self, t, r, delta):
        p = Pose(*t, *r)
        q = Pose(*(np.array(t) + delta), *r)
        d = slice_points(q, SLICE, VOL) - slice_points(p, SLICE, VOL)
        np.testing.assert_allclose(d, np.broadcast_to(delta, d.shape), atol=1e-9)

    def test_rigidity(self):
        ref = five_point_set(Pose(), SLICE, VOL)
        dref = np.linalg.norm(ref[:, None] - ref[None], axis=-1)
        for p in random_poses(200, seed=4):
            pts = five_point_set(p, SLICE, VOL)
            d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
            assert np.abs(d - dref).max() < 1e-9


def test_gridspec_validation():
    with pytest.raises(ValueError):
        GridSpec((0, 3), (1, 1))
    with pytest.raises(ValueError):
        GridSpec((3, 3), (1, -1))
