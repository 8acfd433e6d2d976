"""Per-pixel data association between consecutive frames.

Each pixel of frame t+1 is back-projected with its depth and camera pose,
then projected into frame t; if the landing pixel is in-frame, has valid
depth, and agrees with the projected depth (occlusion check), the pixel
is associated with it. The map is a flat row-major int32 index into
frame t's pixels, -1 for no association.
"""

from __future__ import annotations

import numpy as np

from .geom import Intrinsics, Pose, se3_apply, se3_compose, se3_invert

DEPTH_CONSISTENCY = 0.03   # meters; rejects association through occlusions


def compute_association(depth_t1: np.ndarray, pose_t: Pose, pose_t1: Pose,
                        intr: Intrinsics, depth_t: np.ndarray,
                        delta: float = DEPTH_CONSISTENCY) -> np.ndarray:
    """AssociationMap from frame t+1 pixels to frame t pixels.

    Both poses must be camera-to-world in the same world frame. Pixels
    with missing depth in either frame get -1.
    """
    h, w = depth_t1.shape
    rel = se3_compose(se3_invert(pose_t), pose_t1)   # t+1 camera -> t camera
    v, u = np.mgrid[0:h, 0:w]
    z = depth_t1.astype(np.float64)
    x = (u - intr.cx) * z / intr.fx
    y = (v - intr.cy) * z / intr.fy
    pts = se3_apply(rel, np.stack([x, y, z], axis=-1).reshape(-1, 3))
    zp = pts[:, 2]
    front = zp > 1e-6
    with np.errstate(divide="ignore", invalid="ignore"):
        up = np.rint(intr.fx * pts[:, 0] / zp + intr.cx).astype(np.int64)
        vp = np.rint(intr.fy * pts[:, 1] / zp + intr.cy).astype(np.int64)
    ok = (z.reshape(-1) > 0) & front & (up >= 0) & (up < w) & (vp >= 0) & (vp < h)
    upc = np.clip(up, 0, w - 1)
    vpc = np.clip(vp, 0, h - 1)
    d_prev = depth_t[vpc, upc].astype(np.float64)
    ok &= (d_prev > 0) & (np.abs(zp - d_prev) < delta)
    assoc = np.where(ok, vpc * w + upc, -1).astype(np.int32)
    return assoc.reshape(h, w)


def association_stats(assoc: np.ndarray) -> tuple[float, float]:
    """(fraction associated, fraction none)."""
    frac = float(np.mean(assoc >= 0))
    return frac, 1.0 - frac


def identity_association(height: int, width: int) -> np.ndarray:
    return np.arange(height * width, dtype=np.int32).reshape(height, width)


def no_association(height: int, width: int) -> np.ndarray:
    return np.full((height, width), -1, dtype=np.int32)


def dump_association(assoc: np.ndarray, path):
    """Debug dump as text: first line 'H W', then one row of flat indices
    (-1 for none) per image row."""
    assoc = np.asarray(assoc)
    with open(path, "w") as f:
        f.write(f"{assoc.shape[0]} {assoc.shape[1]}\n")
        for row in assoc:
            f.write(" ".join(str(int(x)) for x in row) + "\n")
