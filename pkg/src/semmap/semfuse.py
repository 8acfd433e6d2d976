"""Fusing per-frame label probability maps into the TSDF volume, and
labeling 3D points from accumulated frame evidence."""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import ShapeError
from .geom import Intrinsics, Pose, se3_invert
from .mapping import TsdfVolume

VISIBILITY_DEPTH_TOL = 0.03   # meters, matches the association threshold

NO_LABEL = -1


def fuse_labels(vol: TsdfVolume, probs: np.ndarray, depth: np.ndarray,
                pose: Pose, intr: Intrinsics):
    """Running-average update of class probabilities for near-surface voxels.

    probs is (C, H, W), normalized per pixel; tsdf integration for this
    frame must already have happened. Only voxels within the truncation
    band of the current depth are updated.
    """
    c = probs.shape[0]
    if probs.shape[1:] != depth.shape:
        raise ShapeError("probability map and depth image sizes differ")
    sums = probs.sum(axis=0)
    if np.any(np.abs(sums - 1.0) > 1e-4) or probs.min() < 0:
        raise ValueError("probability map is not normalized per pixel")
    vol.num_classes = vol.num_classes or c
    if vol.num_classes != c:
        raise ShapeError(f"volume expects {vol.num_classes} classes, got {c}")
    vol._ensure_probs()
    inv = se3_invert(pose)
    kernels.fuse_class_probs(vol.tsdf, vol.weight, vol.class_probs, vol.sem_weight,
                             vol.origin, vol.voxel_size, depth, intr.as_array(),
                             inv.rotation, inv.translation, vol.trunc,
                             vol.weight_cap, probs.transpose(1, 2, 0))


def voxel_label(vol: TsdfVolume, index) -> int:
    """Argmax class of one voxel; ties go to the lowest class index.

    Returns NO_LABEL for voxels never observed or never semantically fused.
    """
    i, j, k = index
    if vol.weight[i, j, k] <= 0 or vol.sem_weight is None or vol.sem_weight[i, j, k] <= 0:
        return NO_LABEL
    return int(np.argmax(vol.class_probs[i, j, k]))


def label_points(points: np.ndarray, frames, intr: Intrinsics,
                 depth_tol: float = VISIBILITY_DEPTH_TOL) -> np.ndarray:
    """Label world-frame points by majority vote over the frames they are visible in.

    frames is a sequence of (label_image or prob_map, depth, pose); a
    (C, H, W) prob map is reduced to per-pixel argmax first. A point is
    visible in a frame iff its projection lands inside the image and the
    depth value there matches the point's camera depth within depth_tol.
    Points visible nowhere get NO_LABEL.
    """
    n = len(points)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    num_classes = 0
    votes = None
    for label_img, depth, pose in frames:
        label_img = np.asarray(label_img)
        if label_img.ndim == 3:
            label_img = np.argmax(label_img, axis=0)
        if votes is None:
            num_classes = max(int(label_img.max()) + 1, 2)
            votes = np.zeros((n, num_classes), dtype=np.int64)
        elif int(label_img.max()) >= votes.shape[1]:
            extra = int(label_img.max()) + 1 - votes.shape[1]
            votes = np.pad(votes, ((0, 0), (0, extra)))
        inv = se3_invert(pose)
        cam = points @ inv.rotation.T + inv.translation
        z = cam[:, 2]
        ok = z > 1e-6
        with np.errstate(divide="ignore", invalid="ignore"):
            u = np.rint(intr.fx * cam[:, 0] / z + intr.cx).astype(np.int64)
            v = np.rint(intr.fy * cam[:, 1] / z + intr.cy).astype(np.int64)
        h, w = depth.shape
        ok &= (u >= 0) & (u < w) & (v >= 0) & (v < h)
        uc, vc = np.clip(u, 0, w - 1), np.clip(v, 0, h - 1)
        d = depth[vc, uc]
        ok &= (d > 0) & (np.abs(z - d) < depth_tol)
        if ok.any():
            np.add.at(votes, (np.flatnonzero(ok), label_img[vc[ok], uc[ok]]), 1)
    labels = np.argmax(votes, axis=1)
    labels[votes.sum(axis=1) == 0] = NO_LABEL
    return labels
