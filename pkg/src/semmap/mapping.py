"""KinectFusion-style dense reconstruction on a TSDF voxel grid.

The volume stores, per voxel: a truncated signed distance normalized to
[-1, 1], a geometric fusion weight, and (lazily allocated) a class
probability vector with its own fusion weight. Camera tracking is
frame-to-model point-to-plane ICP against the raycast surface.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import TrackingLostError
from .geom import (Intrinsics, PointCloud, Pose, axis_angle_to_rotation, backproject,
                   compute_normals, se3_compose, se3_invert)

DEFAULT_VOXEL_SIZE = 0.01          # meters
DEFAULT_DIMS = (256, 256, 256)     # desk scale at 1 cm voxels
TRUNCATION_FACTOR = 4              # truncation distance = 4 * voxel_size
FUSION_WEIGHT_CAP = 64.0

ICP_MAX_ITERS = 20
ICP_STOP_NORM = 1e-6
ICP_DIST_THRESH = 0.05             # correspondence rejection: 5 cm
ICP_ANGLE_THRESH_DEG = 30.0
ICP_MIN_CORRESPONDENCES = 100
ICP_DAMPING = 1e-8                 # Tikhonov term; regularizes degenerate geometry


def _incidence_weight(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Squared cosine between each pixel's view ray and its surface normal."""
    h, w = depth.shape
    normals = compute_normals(depth, intr)
    v, u = np.mgrid[0:h, 0:w]
    rays = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy,
                     np.ones((h, w))], axis=2)
    rays /= np.linalg.norm(rays, axis=2, keepdims=True)
    cos = -np.sum(normals * rays, axis=2)   # normals face the camera
    w = np.clip(cos, 0.0, 1.0) ** 2
    # every valid depth pixel keeps a small floor weight so the geometry it
    # observes is never dropped entirely (only down-weighted)
    return np.where(depth > 0, np.maximum(w, 0.05), 0.0)


class TsdfVolume:
    """Dense voxel grid, axis-aligned in the world frame.

    Voxel (i, j, k) is centered at origin + (i, j, k) * voxel_size.
    """

    def __init__(self, origin, voxel_size=DEFAULT_VOXEL_SIZE, dims=DEFAULT_DIMS,
                 num_classes=0, weight_cap=FUSION_WEIGHT_CAP):
        self.origin = np.asarray(origin, dtype=np.float64)
        self.voxel_size = float(voxel_size)
        self.dims = tuple(int(d) for d in dims)
        self.trunc = TRUNCATION_FACTOR * self.voxel_size
        self.weight_cap = float(weight_cap)
        self.num_classes = int(num_classes)
        self.tsdf = np.ones(self.dims)
        self.weight = np.zeros(self.dims)
        self.class_probs = None        # (nx, ny, nz, C), allocated on first fuse
        self.sem_weight = None

    @staticmethod
    def for_bounds(lo, hi, voxel_size=DEFAULT_VOXEL_SIZE, num_classes=0, margin=0.06):
        lo = np.asarray(lo, dtype=np.float64) - margin
        hi = np.asarray(hi, dtype=np.float64) + margin
        dims = np.ceil((hi - lo) / voxel_size).astype(int) + 1
        return TsdfVolume(lo, voxel_size, tuple(dims), num_classes)

    def _ensure_probs(self):
        if self.class_probs is None:
            if self.num_classes < 2:
                raise ValueError("volume was created without a class count")
            self.class_probs = np.full(self.dims + (self.num_classes,),
                                       1.0 / self.num_classes)
            self.sem_weight = np.zeros(self.dims)

    def integrate(self, depth: np.ndarray, pose: Pose, intr: Intrinsics):
        """Fuse one depth frame by weighted running average (pose is camera-to-world).

        Observations are weighted by squared incidence cosine: grazing
        views carry the largest projective-distance distortion, and
        down-weighting them noticeably improves surface normals.
        """
        inv = se3_invert(pose)
        obs = _incidence_weight(depth, intr)
        kernels.integrate_tsdf(self.tsdf, self.weight, self.origin, self.voxel_size,
                               depth, intr.as_array(), inv.rotation, inv.translation,
                               self.trunc, self.weight_cap, obs_weight=obs)

    def raycast(self, pose: Pose, intr: Intrinsics, far: float = 5.0):
        """Predict the model surface seen from pose.

        Returns (depth (H, W), vertex (H, W, 3) world, normal (H, W, 3)
        world); missed rays have depth 0.
        """
        return kernels.raycast_tsdf(self.tsdf, self.weight, self.origin,
                                    self.voxel_size, pose.rotation, pose.translation,
                                    intr.as_array(), intr.height, intr.width,
                                    self.trunc, near=2 * self.voxel_size, far=far)

    def extract_surface(self) -> PointCloud:
        """One point per zero-crossing voxel (interpolated along x, y, z edges).

        Normals come from the TSDF gradient; labels, when class
        probabilities are present, are the argmax of the two crossing
        endpoints' probabilities blended by accumulated label evidence, so
        a barely-observed free-space voxel cannot outvote the surface voxel
        on the other side of the crossing.
        """
        t, w = self.tsdf, self.weight
        pts = []
        obs = w > 0
        for axis in range(3):
            a = t
            b = np.roll(t, -1, axis=axis)
            ok = obs & np.roll(obs, -1, axis=axis)
            ok[tuple(slice(-1, None) if i == axis else slice(None) for i in range(3))] = False
            cross = ok & (a > 0) & (b <= 0) | ok & (a <= 0) & (b > 0)
            idx = np.argwhere(cross)
            if len(idx) == 0:
                continue
            va = a[cross]
            vb = b[cross]
            frac = va / (va - vb)
            p = idx.astype(np.float64)
            p[:, axis] += frac
            nbr = idx.copy()
            nbr[:, axis] += 1
            pts.append((p, idx, nbr))
        if not pts:
            return PointCloud(np.zeros((0, 3)), np.zeros((0, 3)),
                              np.zeros(0, dtype=np.int64))
        coords = np.concatenate([p for p, _, _ in pts])
        anchors = np.concatenate([i for _, i, _ in pts])
        partners = np.concatenate([nb for _, _, nb in pts])
        points = self.origin + coords * self.voxel_size

        grad = np.stack(np.gradient(t), axis=-1)
        gi = grad[anchors[:, 0], anchors[:, 1], anchors[:, 2]]
        nrm = np.linalg.norm(gi, axis=1)
        # tsdf increases toward free space, so +gradient is the outward normal
        normals = gi / np.maximum(nrm, 1e-12)[:, None]

        labels = None
        if self.class_probs is not None:
            ia, ib = anchors.T, partners.T
            wa = self.sem_weight[ia[0], ia[1], ia[2], None]
            wb = self.sem_weight[ib[0], ib[1], ib[2], None]
            blended = (wa * self.class_probs[ia[0], ia[1], ia[2]]
                       + wb * self.class_probs[ib[0], ib[1], ib[2]])
            labels = np.argmax(blended, axis=1)
        return PointCloud(points, normals, labels)

    # -- snapshot I/O ------------------------------------------------------

    def save(self, path):
        """Binary snapshot: header (magic, version, origin, voxel_size, dims,
        num_classes, has_probs) then tsdf, weight and optional probs/sem_weight
        as little-endian float32."""
        with open(path, "wb") as f:
            f.write(b"SMVL")
            has_probs = int(self.class_probs is not None)
            f.write(struct.pack("<I3dd3III", 1, *self.origin, self.voxel_size,
                                *self.dims, self.num_classes, has_probs))
            f.write(self.tsdf.astype("<f4").tobytes())
            f.write(self.weight.astype("<f4").tobytes())
            if has_probs:
                f.write(self.class_probs.astype("<f4").tobytes())
                f.write(self.sem_weight.astype("<f4").tobytes())

    @staticmethod
    def load(path) -> "TsdfVolume":
        with open(path, "rb") as f:
            if f.read(4) != b"SMVL":
                raise IOError(f"{path}: not a volume snapshot")
            header = struct.unpack("<I3dd3III", f.read(struct.calcsize("<I3dd3III")))
            _, ox, oy, oz, vs, nx, ny, nz, nc, has_probs = header
            vol = TsdfVolume((ox, oy, oz), vs, (nx, ny, nz), nc)
            n = nx * ny * nz
            vol.tsdf = np.frombuffer(f.read(4 * n), "<f4").reshape(nx, ny, nz).astype(np.float64)
            vol.weight = np.frombuffer(f.read(4 * n), "<f4").reshape(nx, ny, nz).astype(np.float64)
            if has_probs:
                vol.class_probs = np.frombuffer(f.read(4 * n * nc), "<f4").reshape(
                    nx, ny, nz, nc).astype(np.float64)
                vol.sem_weight = np.frombuffer(f.read(4 * n), "<f4").reshape(
                    nx, ny, nz).astype(np.float64)
        return vol


@dataclass
class ModelView:
    """Raycast surface prediction used as the ICP reference."""
    vertex: np.ndarray        # (H, W, 3) world
    normal: np.ndarray        # (H, W, 3) world
    valid: np.ndarray         # (H, W) bool
    pose: Pose                # camera pose the maps were rendered from


def render_model_view(volume: TsdfVolume, pose: Pose, intr: Intrinsics) -> ModelView:
    depth, vertex, normal = volume.raycast(pose, intr)
    valid = (depth > 0) & (np.linalg.norm(normal, axis=2) > 0.5)
    return ModelView(vertex, normal, valid, pose)


def icp_track(model: ModelView, depth: np.ndarray, intr: Intrinsics,
              init: Pose) -> Pose:
    """Refine the camera-to-world pose of a depth frame against the model.

    Gauss-Newton on the point-to-plane error with projective
    correspondences; raises TrackingLostError when too few
    correspondences survive rejection.
    """
    pts, idx = backproject(depth, intr)
    normals_img = compute_normals(depth, intr)
    nrm = normals_img.reshape(-1, 3)[idx]
    good = np.linalg.norm(nrm, axis=1) > 0.5
    pts, nrm = pts[good], nrm[good]
    if len(pts) < ICP_MIN_CORRESPONDENCES:
        raise TrackingLostError("not enough valid depth points")

    model_inv = se3_invert(model.pose)
    cos_thresh = float(np.cos(np.radians(ICP_ANGLE_THRESH_DEG)))
    r = init.rotation.copy()
    t = init.translation.copy()
    for _ in range(ICP_MAX_ITERS):
        a, b, count, _ = kernels.icp_normal_equations(
            pts, nrm, r, t, model.vertex, model.normal, model.valid,
            model_inv.rotation, model_inv.translation, intr.as_array(),
            ICP_DIST_THRESH, cos_thresh)
        if count < ICP_MIN_CORRESPONDENCES:
            raise TrackingLostError(f"only {count} ICP correspondences")
        a = a + ICP_DAMPING * np.trace(a) / 6.0 * np.eye(6)
        delta = np.linalg.solve(a, -b)
        r = axis_angle_to_rotation(delta[:3]) @ r
        t = axis_angle_to_rotation(delta[:3]) @ t + delta[3:]
        if np.linalg.norm(delta) < ICP_STOP_NORM:
            break
    # re-orthonormalize against drift from repeated exponential-map updates
    u, _, vt = np.linalg.svd(r)
    r = u @ vt
    return Pose(r, t)


def export_ply(cloud: PointCloud, path):
    """ASCII PLY with x y z nx ny nz label per vertex."""
    n = len(cloud)
    normals = cloud.normals if cloud.normals is not None else np.zeros((n, 3))
    labels = cloud.labels if cloud.labels is not None else np.zeros(n, dtype=int)
    with open(path, "w") as f:
        f.write("ply\nformat ascii 1.0\n")
        f.write(f"element vertex {n}\n")
        for prop in ("x", "y", "z", "nx", "ny", "nz"):
            f.write(f"property float {prop}\n")
        f.write("property int label\nend_header\n")
        for p, nv, lb in zip(cloud.points, normals, labels):
            f.write(f"{p[0]:.6f} {p[1]:.6f} {p[2]:.6f} "
                    f"{nv[0]:.6f} {nv[1]:.6f} {nv[2]:.6f} {int(lb)}\n")


def read_ply(path) -> PointCloud:
    with open(path) as f:
        line = f.readline().strip()
        if line != "ply":
            raise IOError(f"{path}: not a PLY file")
        n = 0
        while True:
            line = f.readline()
            if not line:
                raise IOError(f"{path}: truncated header")
            if line.startswith("element vertex"):
                n = int(line.split()[2])
            if line.strip() == "end_header":
                break
        data = np.loadtxt(f, max_rows=n).reshape(n, 7)
    return PointCloud(data[:, :3], data[:, 3:6], data[:, 6].astype(int))
