"""Pinhole camera model, rigid transforms and depth-image geometry.

Conventions used throughout the package:
  * camera frame is OpenCV style: +x right, +y down, +z forward;
  * poses are camera-to-world;
  * depth images are float32 meters, 0 marks a missing measurement;
  * integer pixel (u, v) samples the ray through (u, v) directly
    (no half-pixel shift), applied consistently in rendering,
    projection and back-projection.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ORTHONORMAL_TOL = 1e-6


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point outside the image")

    def as_array(self) -> np.ndarray:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)


@dataclass
class Pose:
    """Rigid transform, camera-to-world. rotation is a 3x3 orthonormal matrix."""

    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.rotation.shape != (3, 3) or self.translation.shape != (3,):
            raise ValueError("pose needs a 3x3 rotation and a 3-vector translation")
        err = np.abs(self.rotation.T @ self.rotation - np.eye(3)).max()
        if err > 1e-5 or abs(np.linalg.det(self.rotation) - 1.0) > 1e-5:
            raise ValueError("rotation is not a proper orthonormal matrix")

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    @staticmethod
    def identity() -> "Pose":
        return Pose()


@dataclass
class PointCloud:
    points: np.ndarray                      # (N, 3) meters
    normals: np.ndarray | None = None       # (N, 3) unit vectors
    labels: np.ndarray | None = None        # (N,) int class indices

    def __len__(self):
        return len(self.points)


def se3_compose(a: Pose, b: Pose) -> Pose:
    return Pose(a.rotation @ b.rotation, a.rotation @ b.translation + a.translation)


def se3_invert(p: Pose) -> Pose:
    rt = p.rotation.T
    return Pose(rt, -rt @ p.translation)


def se3_apply(p: Pose, x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return x @ p.rotation.T + p.translation


def backproject(depth: np.ndarray, intr: Intrinsics) -> tuple[np.ndarray, np.ndarray]:
    """Lift a depth image to camera-frame 3D points.

    Returns (points (N,3), pixel_index (N,) flat row-major indices of the
    valid pixels). Pixels with depth == 0 are skipped.
    """
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w]
    z = depth.astype(np.float64)
    valid = z > 0
    zs = z[valid]
    xs = (u[valid] - intr.cx) * zs / intr.fx
    ys = (v[valid] - intr.cy) * zs / intr.fy
    points = np.stack([xs, ys, zs], axis=1)
    index = np.flatnonzero(valid.ravel())
    return points, index


def project(points: np.ndarray, intr: Intrinsics, pose: Pose) -> tuple[np.ndarray, np.ndarray]:
    """Project world-frame points into the camera described by pose.

    Returns (uvz (N,3) with pixel coordinates and camera depth, in_frame
    (N,) bool). Points behind the camera or landing outside the image
    are marked out-of-frame; their uvz entries are still filled.
    """
    cam = se3_apply(se3_invert(pose), points)
    z = cam[:, 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = intr.fx * cam[:, 0] / z + intr.cx
        v = intr.fy * cam[:, 1] / z + intr.cy
    uvz = np.stack([u, v, z], axis=1)
    in_frame = (z > 0) & (u >= 0) & (u <= intr.width - 1) & (v >= 0) & (v <= intr.height - 1)
    uvz[~np.isfinite(uvz)] = 0.0
    return uvz, in_frame


def vertex_map(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Dense (H, W, 3) camera-frame vertex map; rows with missing depth are NaN-free zeros."""
    h, w = depth.shape
    v, u = np.mgrid[0:h, 0:w]
    z = depth.astype(np.float64)
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    return np.stack([x, y, z], axis=2)


def compute_normals(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Per-pixel unit normals from central differences of the vertex map.

    Normals are oriented toward the camera (n . v < 0). Returns (H, W, 3),
    zero where undefined (missing depth in the pixel or a neighbor, or
    image border).
    """
    vm = vertex_map(depth, intr)
    h, w = depth.shape
    normals = np.zeros((h, w, 3))
    du = vm[1:-1, 2:] - vm[1:-1, :-2]
    dv = vm[2:, 1:-1] - vm[:-2, 1:-1]
    n = np.cross(du, dv)
    norm = np.linalg.norm(n, axis=2)
    ok = (
        (depth[1:-1, 1:-1] > 0)
        & (depth[1:-1, 2:] > 0)
        & (depth[1:-1, :-2] > 0)
        & (depth[2:, 1:-1] > 0)
        & (depth[:-2, 1:-1] > 0)
        & (norm > 1e-12)
    )
    n = np.where(ok[..., None], n / np.maximum(norm, 1e-12)[..., None], 0.0)
    # flip so the normal faces the camera
    facing = np.sum(n * vm[1:-1, 1:-1], axis=2)
    n = np.where((facing > 0)[..., None], -n, n)
    normals[1:-1, 1:-1] = n
    return normals


def normals_to_image(normals: np.ndarray) -> np.ndarray:
    """Encode unit normals as a 3-channel uint8 image, mapping [-1, 1] -> [0, 255]."""
    img = np.clip((normals + 1.0) * 0.5 * 255.0, 0, 255)
    return np.round(img).astype(np.uint8)


def rotation_from_quaternion(q: np.ndarray) -> np.ndarray:
    """Quaternion (w, x, y, z) to rotation matrix."""
    from scipy.spatial.transform import Rotation

    w, x, y, z = q
    return Rotation.from_quat([x, y, z, w]).as_matrix()


def quaternion_from_rotation(r: np.ndarray) -> np.ndarray:
    """Rotation matrix to quaternion (w, x, y, z), w >= 0."""
    from scipy.spatial.transform import Rotation

    x, y, z, w = Rotation.from_matrix(r).as_quat()
    q = np.array([w, x, y, z])
    return -q if w < 0 else q


def rotation_angle_deg(r: np.ndarray) -> float:
    """Geodesic rotation angle of a rotation matrix, in degrees."""
    c = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    return float(np.degrees(np.arccos(c)))


def axis_angle_to_rotation(w: np.ndarray) -> np.ndarray:
    """Exponential map so(3) -> SO(3)."""
    theta = np.linalg.norm(w)
    if theta < 1e-12:
        k = np.array([[0, -w[2], w[1]], [w[2], 0, -w[0]], [-w[1], w[0], 0]])
        return np.eye(3) + k
    axis = w / theta
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(theta) * k + (1 - np.cos(theta)) * (k @ k)


def ate_rms(est_positions: np.ndarray, gt_positions: np.ndarray) -> float:
    """Absolute trajectory error: RMS positional error after rigid alignment.

    Both arguments are (N, 3) camera positions in matching frame order;
    alignment is the least-squares rotation + translation (Kabsch).
    """
    est = np.asarray(est_positions, dtype=np.float64)
    gt = np.asarray(gt_positions, dtype=np.float64)
    if est.shape != gt.shape or est.ndim != 2 or est.shape[1] != 3:
        raise ValueError("trajectories must both be (N, 3)")
    ec, gc = est - est.mean(axis=0), gt - gt.mean(axis=0)
    u, _, vt = np.linalg.svd(ec.T @ gc)
    d = np.sign(np.linalg.det(u @ vt))
    r = (u @ np.diag([1.0, 1.0, d]) @ vt).T
    resid = gc - ec @ r.T
    return float(np.sqrt(np.mean(np.sum(resid ** 2, axis=1))))
