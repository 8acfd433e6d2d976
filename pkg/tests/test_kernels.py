"""Parity between the compiled kernels and the pure-numpy fallbacks."""

import numpy as np
import pytest

from semmap import kernels, synth
from semmap.geom import se3_invert

pytestmark = pytest.mark.skipif(
    not kernels.USE_NUMBA,
    reason="compiled path disabled (SEMMAP_NO_NUMBA); nothing to compare")


@pytest.fixture(scope="module")
def scene_frame():
    scene = synth.generate_scene(11)
    pose = synth.sample_trajectory(scene, 4)[0]
    intr = synth.default_intrinsics(48)
    frame = synth.render_frame(scene, pose, intr)
    return frame, pose, intr


def _fresh_grids():
    dims = (60, 60, 50)
    origin = np.array([-0.6, -0.6, -0.05])
    vs = 0.02
    return (np.ones(dims), np.zeros(dims), origin, vs)


def test_integrate_parity(scene_frame):
    frame, pose, intr = scene_frame
    inv = se3_invert(pose)
    t1, w1, origin, vs = _fresh_grids()
    t2, w2 = t1.copy(), w1.copy()
    trunc = 4 * vs
    obs = np.random.default_rng(1).random(frame.depth.shape)
    kernels._integrate_numba(t1, w1, origin, vs, frame.depth.astype(np.float64),
                             obs, *intr.as_array(), inv.rotation, inv.translation,
                             trunc, 64.0)
    kernels._integrate_numpy(t2, w2, origin, vs, frame.depth.astype(np.float64),
                             obs, *intr.as_array(), inv.rotation, inv.translation,
                             trunc, 64.0)
    assert np.allclose(t1, t2, atol=1e-12)
    assert np.allclose(w1, w2, atol=1e-12)
    assert (w1 > 0).any()


def _integrated(scene_frame):
    frame, pose, intr = scene_frame
    inv = se3_invert(pose)
    t, w, origin, vs = _fresh_grids()
    kernels.integrate_tsdf(t, w, origin, vs, frame.depth.astype(np.float64),
                           intr.as_array(), inv.rotation, inv.translation,
                           4 * vs, 64.0)
    return t, w, origin, vs


def test_fuse_probs_parity(scene_frame):
    frame, pose, intr = scene_frame
    t, w, origin, vs = _integrated(scene_frame)
    inv = se3_invert(pose)
    rng = np.random.default_rng(0)
    pm = rng.random((48, 48, 5))
    pm /= pm.sum(axis=2, keepdims=True)
    p1 = np.full(t.shape + (5,), 0.2)
    s1 = np.zeros(t.shape)
    p2, s2 = p1.copy(), s1.copy()
    args = (origin, vs, frame.depth.astype(np.float64), *intr.as_array(),
            inv.rotation, inv.translation, 4 * vs, 64.0, pm)
    kernels._fuse_probs_numba(t, w, p1, s1, *args)
    kernels._fuse_probs_numpy(t, w, p2, s2, *args)
    assert np.allclose(p1, p2, atol=1e-12)
    assert np.allclose(s1, s2, atol=1e-12)
    assert (s1 > 0).any()


def test_raycast_parity(scene_frame):
    frame, pose, intr = scene_frame
    t, w, origin, vs = _integrated(scene_frame)
    args = (t, w, origin, vs, pose.rotation, pose.translation,
            *intr.as_array(), intr.height, intr.width, 4 * vs, 2 * vs, 5.0)
    d1, v1, n1 = kernels._raycast_numba(*args)
    d2, v2, n2 = kernels._raycast_numpy(*args)
    hit = (d1 > 0) & (d2 > 0)
    assert hit.mean() > 0.3
    assert np.mean((d1 > 0) == (d2 > 0)) > 0.995   # marching order edge cases
    assert np.abs(d1[hit] - d2[hit]).max() < 1e-6
    assert np.abs(v1[hit] - v2[hit]).max() < 1e-6
    assert np.abs(n1[hit] - n2[hit]).max() < 1e-6


def test_icp_build_parity(scene_frame):
    frame, pose, intr = scene_frame
    t, w, origin, vs = _integrated(scene_frame)
    depth, vertex, normal = kernels.raycast_tsdf(
        t, w, origin, vs, pose.rotation, pose.translation,
        intr.as_array(), intr.height, intr.width, 4 * vs, 2 * vs, 5.0)
    from semmap.geom import backproject, compute_normals, se3_invert as inv_
    pts, idx = backproject(frame.depth, intr)
    nrm = compute_normals(frame.depth, intr).reshape(-1, 3)[idx]
    mc = inv_(pose)
    args = (pts, nrm, pose.rotation, pose.translation,
            vertex, normal, (depth > 0), mc.rotation, mc.translation,
            *intr.as_array(), 0.05, float(np.cos(np.radians(30.0))))
    out1 = kernels._icp_build_numba(*args)
    out2 = kernels._icp_build_numpy(*args)
    assert out1[2] == out2[2] > 100          # correspondence counts
    for a, b in zip(out1, out2):
        assert np.allclose(a, b, atol=1e-9)


def test_backend_flag_exposed():
    assert kernels.BACKEND in ("numba", "numpy")
    assert kernels.BACKEND == ("numba" if kernels.USE_NUMBA else "numpy")
