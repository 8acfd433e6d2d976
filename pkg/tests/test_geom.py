"""Camera model, rigid transforms, normals, trajectory error."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from semmap import geom
from semmap.geom import Intrinsics, Pose


def random_pose(seed):
    r = np.random.default_rng(seed)
    return Pose(Rotation.random(random_state=int(seed % 2 ** 31)).as_matrix(),
                r.normal(size=3))


@given(st.integers(0, 2 ** 31 - 1), st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_se3_compose_invert_round_trip(s1, s2):
    a, b = random_pose(s1), random_pose(s2)
    ab = geom.se3_compose(a, b)
    back = geom.se3_compose(geom.se3_invert(a), ab)
    assert np.allclose(back.rotation, b.rotation, atol=1e-10)
    assert np.allclose(back.translation, b.translation, atol=1e-10)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_se3_apply_matches_matrix_form(seed):
    p = random_pose(seed)
    x = np.random.default_rng(seed).normal(size=(11, 3))
    assert np.allclose(geom.se3_apply(p, x), x @ p.rotation.T + p.translation)


@given(st.integers(0, 2 ** 31 - 1))
@settings(max_examples=30, deadline=None)
def test_quaternion_round_trip(seed):
    r = Rotation.random(random_state=int(seed % 2 ** 31)).as_matrix()
    q = geom.quaternion_from_rotation(r)
    assert q[0] >= 0
    assert np.allclose(geom.rotation_from_quaternion(q), r, atol=1e-10)


def test_pose_rejects_non_orthonormal():
    with pytest.raises(ValueError):
        Pose(np.eye(3) * 1.01, np.zeros(3))


def test_rotation_angle_oracle():
    for deg in (0.0, 1.0, 17.3, 90.0, 179.0):
        r = geom.axis_angle_to_rotation(np.radians(deg) * np.array([0, 0, 1.0]))
        assert abs(geom.rotation_angle_deg(r) - deg) < 1e-9


def test_axis_angle_matches_scipy():
    w = np.array([0.3, -0.2, 0.9])
    assert np.allclose(geom.axis_angle_to_rotation(w),
                       Rotation.from_rotvec(w).as_matrix(), atol=1e-12)


def test_backproject_project_round_trip(rng):
    intr = Intrinsics(fx=60, fy=60, cx=32, cy=32, width=64, height=64)
    depth = rng.uniform(0.5, 3.0, size=(64, 64))
    pts, idx = geom.backproject(depth, intr)
    assert pts.shape[0] == 64 * 64 == idx.size
    uvz, inside = geom.project(pts, intr, Pose())
    u = np.rint(uvz[:, 0]).astype(int)
    v = np.rint(uvz[:, 1]).astype(int)
    # border pixels may fall out of frame by one ulp; the interior may not
    interior = (u > 0) & (u < 63) & (v > 0) & (v < 63)
    assert inside[interior].all()
    assert np.array_equal(v * 64 + u, idx)
    assert np.allclose(uvz[:, 2], depth.reshape(-1))


def test_integer_pixel_convention():
    """Pixel (u, v) back-projects through (u - cx) / fx exactly (no half-pixel shift)."""
    intr = Intrinsics(fx=50, fy=50, cx=8, cy=8, width=16, height=16)
    depth = np.full((16, 16), 2.0)
    pts, _ = geom.backproject(depth, intr)
    p = pts.reshape(16, 16, 3)[3, 5]   # v=3, u=5
    assert np.allclose(p, [2.0 * (5 - 8) / 50, 2.0 * (3 - 8) / 50, 2.0])


def test_depth_zero_means_missing():
    intr = Intrinsics(fx=50, fy=50, cx=4, cy=4, width=8, height=8)
    depth = np.zeros((8, 8))
    depth[2, 2] = 1.5
    pts, idx = geom.backproject(depth, intr)
    assert np.count_nonzero(pts[:, 2] > 0) == 1


def test_compute_normals_on_plane():
    """A fronto-parallel plane has normal (0, 0, -1) (toward the camera)."""
    intr = Intrinsics(fx=60, fy=60, cx=16, cy=16, width=32, height=32)
    depth = np.full((32, 32), 1.7)
    n = geom.compute_normals(depth, intr)
    interior = n[2:-2, 2:-2]
    assert np.allclose(interior, [0, 0, -1], atol=1e-6)


def test_compute_normals_tilted_plane():
    """Depth z = a + b*x gives an analytic plane normal."""
    intr = Intrinsics(fx=100, fy=100, cx=24, cy=24, width=48, height=48)
    u = np.arange(48)[None, :].repeat(48, axis=0)
    # plane x = (z - 1.5) / 0.4  =>  z*(1 - 0.4*(u-cx)/fx) = 1.5
    depth = 1.5 / (1.0 - 0.4 * (u - 24) / 100.0)
    n = geom.compute_normals(depth, intr)
    want = np.array([0.4, 0.0, -1.0])
    want /= np.linalg.norm(want)
    dots = n[4:-4, 4:-4] @ want
    assert np.all(dots > 0.9999)


def test_normals_to_image_range():
    intr = Intrinsics(fx=60, fy=60, cx=8, cy=8, width=16, height=16)
    img = geom.normals_to_image(geom.compute_normals(np.full((16, 16), 1.0), intr))
    assert img.dtype == np.uint8


def test_ate_invariant_to_rigid_motion(rng):
    gt = rng.normal(size=(40, 3))
    r = Rotation.random(random_state=3).as_matrix()
    est = gt @ r.T + np.array([5.0, -2.0, 1.0])
    assert geom.ate_rms(est, gt) < 1e-12
    est[0] += [0.3, 0, 0]
    assert geom.ate_rms(est, gt) > 0.01
