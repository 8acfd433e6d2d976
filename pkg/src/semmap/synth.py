"""Procedural synthetic RGB-D video generation with exact ground truth.

Scenes are a ground plane, one table (a box) and a handful of table-top
primitives (boxes, spheres, cylinders). Frames are rendered by analytic
ray-primitive intersection, so depth, labels and poses are exact; the
label image is the class of the nearest-hit primitive, with class 0 for
the ground / no hit.

World frame: z up, ground plane z = 0, table centered at the origin.
Class indices: 0 background, 1 table, then one class per object kind.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import GenerationError
from .geom import Intrinsics, Pose, quaternion_from_rotation, rotation_from_quaternion

CLASS_NAMES = ("background", "table", "box", "sphere", "cylinder")
CLASS_BY_KIND = {"box": 2, "sphere": 3, "cylinder": 4}

# fixed depth normalization range (meters) for network inputs
DEPTH_INPUT_MAX = 2.5

# sensor-style maximum range; farther hits are reported as missing depth
MAX_SENSOR_DEPTH = 5.0

_LIGHT = np.array([0.35, -0.45, -0.82])
_LIGHT = _LIGHT / np.linalg.norm(_LIGHT)


@dataclass
class Primitive:
    kind: str                 # 'plane', 'box', 'sphere', 'cylinder'
    center: np.ndarray        # (3,) meters
    yaw: float                # rotation about world z, radians
    size: np.ndarray          # box: half extents (3,); sphere: (r,); cylinder: (r, half_h)
    class_id: int
    albedo: np.ndarray        # (3,) in [0, 1]


@dataclass
class SceneDescription:
    primitives: list[Primitive]
    seed: int
    num_classes: int = len(CLASS_NAMES)
    class_names: tuple[str, ...] = CLASS_NAMES


@dataclass
class Frame:
    color: np.ndarray         # (H, W, 3) uint8
    depth: np.ndarray         # (H, W) float32 meters, 0 = missing
    labels: np.ndarray        # (H, W) uint8 class indices
    pose: Pose                # ground truth, camera-to-world
    intrinsics: Intrinsics


@dataclass
class SynthConfig:
    num_objects: int = 5
    object_kinds: tuple[str, ...] = ("box", "sphere", "cylinder")
    table_half_range: tuple[float, float] = (0.28, 0.38)
    table_height_range: tuple[float, float] = (0.35, 0.45)
    object_size_range: tuple[float, float] = (0.035, 0.07)
    max_retries: int = 200
    noise_sigma: float = 2.0          # color noise, 8-bit counts
    depth_dropout: float = 0.0        # fraction of pixels with missing depth


def default_intrinsics(size: int = 64) -> Intrinsics:
    return Intrinsics(fx=size, fy=size, cx=size // 2, cy=size // 2,
                      width=size, height=size)


def generate_scene(seed: int, config: SynthConfig | None = None) -> SceneDescription:
    """Deterministic scene from a seed: table on the ground plus table-top objects."""
    cfg = config or SynthConfig()
    rng = np.random.default_rng(seed)
    prims = [Primitive("plane", np.zeros(3), 0.0, np.zeros(1), 0,
                       np.array([0.45, 0.42, 0.38]))]
    hx = rng.uniform(*cfg.table_half_range)
    hy = rng.uniform(*cfg.table_half_range)
    table_h = rng.uniform(*cfg.table_height_range)
    prims.append(Primitive("box", np.array([0.0, 0.0, table_h / 2]), 0.0,
                           np.array([hx, hy, table_h / 2]), 1,
                           np.array([0.55, 0.40, 0.25])))
    placed: list[tuple[np.ndarray, float]] = []   # (xy, footprint radius)
    for _ in range(cfg.num_objects):
        for attempt in range(cfg.max_retries):
            kind = cfg.object_kinds[rng.integers(len(cfg.object_kinds))]
            s = rng.uniform(*cfg.object_size_range)
            yaw = rng.uniform(0, 2 * np.pi)
            if kind == "box":
                half = np.array([s, s * rng.uniform(0.7, 1.3), s * rng.uniform(0.8, 1.6)])
                footprint = float(np.hypot(half[0], half[1]))
                z = table_h + half[2]
                size = half
            elif kind == "sphere":
                size = np.array([s])
                footprint = s
                z = table_h + s
            else:
                half_h = s * rng.uniform(1.0, 1.8)
                size = np.array([s, half_h])
                footprint = s
                z = table_h + half_h
            margin = 0.01
            if footprint + margin >= min(hx, hy):   # cannot fit on the table at all
                continue
            x = rng.uniform(-hx + footprint + margin, hx - footprint - margin)
            y = rng.uniform(-hy + footprint + margin, hy - footprint - margin)
            xy = np.array([x, y])
            if all(np.linalg.norm(xy - p) > footprint + r + margin for p, r in placed):
                albedo = rng.uniform(0.25, 0.95, size=3)
                prims.append(Primitive(kind, np.array([x, y, z]), yaw, size,
                                       CLASS_BY_KIND[kind], albedo))
                placed.append((xy, footprint))
                break
        else:
            raise GenerationError(
                f"could not place object {len(placed) + 1} after {cfg.max_retries} tries")
    return SceneDescription(prims, seed)


def look_at(position: np.ndarray, target: np.ndarray) -> Pose:
    """Camera-to-world pose looking from position at target, z forward, y down."""
    z = target - position
    z = z / np.linalg.norm(z)
    up = np.array([0.0, 0.0, 1.0])
    x = np.cross(z, up)
    n = np.linalg.norm(x)
    if n < 1e-9:                       # looking straight down: pick any x
        x = np.array([1.0, 0.0, 0.0])
    else:
        x = x / n
    y = np.cross(z, x)
    r = np.stack([x, y, z], axis=1)
    return Pose(r, position.astype(np.float64))


def sample_trajectory(scene: SceneDescription, n_frames: int, radius: float = 0.9,
                      height: float = 0.75, jitter: float = 0.0,
                      max_step_deg: float = 2.5, seed: int | None = None) -> list[Pose]:
    """Smooth orbit around the table center, bounded inter-frame motion.

    The per-step azimuth is capped at max_step_deg so ICP tracking stays
    in its convergence basin; with enough frames the orbit closes.
    """
    if n_frames < 2:
        raise ValueError("need at least 2 frames")
    table_h = next(p for p in scene.primitives if p.class_id == 1).size[2] * 2
    target = np.array([0.0, 0.0, table_h])
    step = min(np.radians(max_step_deg), 2 * np.pi / n_frames)
    rng = np.random.default_rng(scene.seed if seed is None else seed)
    poses = []
    for k in range(n_frames):
        theta = k * step
        jr = jitter * rng.uniform(-1, 1) if jitter else 0.0
        jh = jitter * rng.uniform(-1, 1) if jitter else 0.0
        pos = np.array([(radius + jr) * np.cos(theta),
                        (radius + jr) * np.sin(theta),
                        height + jh])
        poses.append(look_at(pos, target))
    return poses


# ---------------------------------------------------------------------------
# rendering

def _rot_z(yaw: float) -> np.ndarray:
    c, s = np.cos(yaw), np.sin(yaw)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _intersect(prim: Primitive, o: np.ndarray, dirs: np.ndarray, tmin: float):
    """Ray-primitive intersection, rays o + t * dirs (world frame).

    Returns (t, normal) with t = inf where missed; normals are world-frame
    unit vectors at the hit point (valid only where t is finite).
    """
    n_rays = len(dirs)
    t = np.full(n_rays, np.inf)
    normal = np.zeros((n_rays, 3))
    if prim.kind == "plane":
        dz = dirs[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            th = (prim.center[2] - o[2]) / dz
        ok = (np.abs(dz) > 1e-12) & (th > tmin)
        t[ok] = th[ok]
        normal[ok] = [0.0, 0.0, 1.0]
        return t, normal

    rot = _rot_z(-prim.yaw)
    ol = rot @ (o - prim.center)
    dl = dirs @ rot.T

    if prim.kind == "sphere":
        r = prim.size[0]
        a = np.sum(dl * dl, axis=1)
        b = 2 * dl @ ol
        c = ol @ ol - r * r
        disc = b * b - 4 * a * c
        ok = disc >= 0
        sq = np.sqrt(np.where(ok, disc, 0.0))
        t1 = (-b - sq) / (2 * a)
        t2 = (-b + sq) / (2 * a)
        th = np.where(t1 > tmin, t1, t2)
        ok &= th > tmin
        t[ok] = th[ok]
        pl = ol + th[ok, None] * dl[ok]
        normal[ok] = (pl / r) @ _rot_z(prim.yaw).T
        return t, normal

    if prim.kind == "box":
        half = prim.size
        with np.errstate(divide="ignore", invalid="ignore"):
            inv = 1.0 / dl
        t1 = (-half - ol) * inv
        t2 = (half - ol) * inv
        tn = np.nanmax(np.minimum(t1, t2), axis=1)
        tf = np.nanmin(np.maximum(t1, t2), axis=1)
        ok = (tn <= tf) & (tn > tmin)
        t[ok] = tn[ok]
        pl = ol + tn[ok, None] * dl[ok]
        rel = pl / half
        axis = np.argmax(np.abs(rel), axis=1)
        nl = np.zeros_like(pl)
        nl[np.arange(len(pl)), axis] = np.sign(rel[np.arange(len(pl)), axis])
        normal[ok] = nl @ _rot_z(prim.yaw).T
        return t, normal

    if prim.kind == "cylinder":
        r, half_h = prim.size
        a = dl[:, 0] ** 2 + dl[:, 1] ** 2
        b = 2 * (ol[0] * dl[:, 0] + ol[1] * dl[:, 1])
        c = ol[0] ** 2 + ol[1] ** 2 - r * r
        disc = b * b - 4 * a * c
        okl = (disc >= 0) & (a > 1e-14)
        sq = np.sqrt(np.where(okl, disc, 0.0))
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (-b - sq) / (2 * a)
            t2 = (-b + sq) / (2 * a)
        t_side = np.full(n_rays, np.inf)
        for cand in (t1, t2):
            z = ol[2] + cand * dl[:, 2]
            good = okl & (cand > tmin) & (np.abs(z) <= half_h) & (cand < t_side)
            t_side[good] = cand[good]
        t_cap = np.full(n_rays, np.inf)
        cap_sign = np.zeros(n_rays)
        for zcap in (half_h, -half_h):
            with np.errstate(divide="ignore", invalid="ignore"):
                tc = (zcap - ol[2]) / dl[:, 2]
            xy2 = (ol[0] + tc * dl[:, 0]) ** 2 + (ol[1] + tc * dl[:, 1]) ** 2
            good = (np.abs(dl[:, 2]) > 1e-12) & (tc > tmin) & (xy2 <= r * r) & (tc < t_cap)
            t_cap[good] = tc[good]
            cap_sign[good] = np.sign(zcap)
        use_side = t_side <= t_cap
        th = np.where(use_side, t_side, t_cap)
        ok = np.isfinite(th)
        t[ok] = th[ok]
        pl = ol + th[ok, None] * dl[ok]
        nl = np.zeros_like(pl)
        side_sel = use_side[ok]
        nl[side_sel, 0] = pl[side_sel, 0] / r
        nl[side_sel, 1] = pl[side_sel, 1] / r
        nl[~side_sel, 2] = cap_sign[ok][~side_sel]
        normal[ok] = nl @ _rot_z(prim.yaw).T
        return t, normal

    raise ValueError(f"unknown primitive kind {prim.kind!r}")


def render_frame(scene: SceneDescription, pose: Pose, intr: Intrinsics,
                 noise_sigma: float = 0.0, depth_dropout: float = 0.0,
                 rng: np.random.Generator | None = None) -> Frame:
    """Render one frame by nearest-hit ray casting against all primitives."""
    h, w = intr.height, intr.width
    v, u = np.mgrid[0:h, 0:w]
    dirs_cam = np.stack([(u - intr.cx) / intr.fx, (v - intr.cy) / intr.fy,
                         np.ones((h, w))], axis=-1).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T          # t along these rays == camera z
    o = pose.translation

    best_t = np.full(h * w, np.inf)
    best_prim = np.full(h * w, -1)
    best_normal = np.zeros((h * w, 3))
    for k, prim in enumerate(scene.primitives):
        t, normal = _intersect(prim, o, dirs, tmin=1e-4)
        closer = t < best_t
        best_t[closer] = t[closer]
        best_prim[closer] = k
        best_normal[closer] = normal[closer]

    hit = np.isfinite(best_t) & (best_t <= MAX_SENSOR_DEPTH)
    best_prim[~hit] = -1
    depth = np.where(hit, best_t, 0.0).astype(np.float32).reshape(h, w)
    labels = np.zeros(h * w, dtype=np.uint8)
    albedo = np.zeros((h * w, 3))
    for k, prim in enumerate(scene.primitives):
        sel = best_prim == k
        labels[sel] = prim.class_id
        albedo[sel] = prim.albedo
    lambert = np.clip(-best_normal @ _LIGHT, 0.0, 1.0)
    shade = np.where(hit, 0.30 + 0.70 * lambert, 0.0)
    color = albedo * shade[:, None] * 255.0

    if rng is not None and noise_sigma > 0:
        color = color + rng.normal(0.0, noise_sigma, size=color.shape)
    color = np.clip(np.round(color), 0, 255).astype(np.uint8).reshape(h, w, 3)
    labels = labels.reshape(h, w)

    if rng is not None and depth_dropout > 0:
        drop = rng.random((h, w)) < depth_dropout
        depth[drop] = 0.0
    labels[depth == 0] = 0                     # missing depth is never labeled
    return Frame(color, depth, labels, pose, intr)


def render_video(scene: SceneDescription, poses: list[Pose], intr: Intrinsics,
                 config: SynthConfig | None = None) -> list[Frame]:
    cfg = config or SynthConfig()
    frames = []
    for k, pose in enumerate(poses):
        rng = np.random.default_rng([scene.seed, k])
        frames.append(render_frame(scene, pose, intr, cfg.noise_sigma,
                                   cfg.depth_dropout, rng))
    return frames


# ---------------------------------------------------------------------------
# normalization of network inputs

def color_to_input(color: np.ndarray) -> np.ndarray:
    """(H, W, 3) uint8 -> (3, H, W) float32 in [0, 1]."""
    return (color.astype(np.float32) / 255.0).transpose(2, 0, 1)


def depth_to_input(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Depth image -> 3 geometric channels in [0, 1].

    Channel 0 is depth scaled by DEPTH_INPUT_MAX; channels 1 and 2 are the
    x and z components of the camera-frame surface normals computed from
    the depth map, remapped from [-1, 1]. The normal channels carry the
    local shape cues (flat vs. singly vs. doubly curved) that raw depth
    values alone express only weakly.
    """
    from .geom import compute_normals

    d = np.clip(depth.astype(np.float32) / DEPTH_INPUT_MAX, 0.0, 1.0)
    n = compute_normals(depth, intr)
    nx = ((n[..., 0] + 1.0) * 0.5).astype(np.float32)
    nz = ((n[..., 2] + 1.0) * 0.5).astype(np.float32)
    return np.stack([d, nx, nz])


def normal_to_input(depth: np.ndarray, intr: Intrinsics) -> np.ndarray:
    """Surface normals from depth as a 3-channel input in [0, 1]."""
    from .geom import compute_normals

    n = compute_normals(depth, intr)
    return ((n.transpose(2, 0, 1) + 1.0) * 0.5).astype(np.float32)


# ---------------------------------------------------------------------------
# dataset directory I/O

def _write_png(path, arr, mode=None):
    Image.fromarray(arr, mode=mode).save(path)


def write_dataset(video: list[Frame], directory, seed: int = 0,
                  class_names: tuple[str, ...] = CLASS_NAMES):
    """Write a video to a scene directory.

    Layout: color_XXXX.png (8-bit RGB), depth_XXXX.png (16-bit, millimeters),
    label_XXXX.png (8-bit), poses.txt (index, quaternion wxyz, translation),
    camera.txt (fx fy cx cy width height), meta.txt (seed, class names).
    Depth is quantized to 1 mm.
    """
    os.makedirs(directory, exist_ok=True)
    intr = video[0].intrinsics
    with open(os.path.join(directory, "camera.txt"), "w") as f:
        f.write(f"{intr.fx:.10g} {intr.fy:.10g} {intr.cx:.10g} {intr.cy:.10g} "
                f"{intr.width} {intr.height}\n")
    with open(os.path.join(directory, "meta.txt"), "w") as f:
        f.write(f"seed {seed}\n")
        f.write("classes " + " ".join(class_names) + "\n")
    with open(os.path.join(directory, "poses.txt"), "w") as f:
        for k, fr in enumerate(video):
            q = quaternion_from_rotation(fr.pose.rotation)
            t = fr.pose.translation
            vals = " ".join(f"{x:.17g}" for x in (*q, *t))
            f.write(f"{k} {vals}\n")
    for k, fr in enumerate(video):
        _write_png(os.path.join(directory, f"color_{k:04d}.png"), fr.color)
        mm = np.round(fr.depth * 1000.0).astype(np.uint16)
        Image.fromarray(mm).save(os.path.join(directory, f"depth_{k:04d}.png"))
        _write_png(os.path.join(directory, f"label_{k:04d}.png"), fr.labels, mode="L")


def read_dataset(directory) -> list[Frame]:
    cam_path = os.path.join(directory, "camera.txt")
    pose_path = os.path.join(directory, "poses.txt")
    for p in (cam_path, pose_path):
        if not os.path.exists(p):
            raise IOError(f"missing dataset file: {p}")
    with open(cam_path) as f:
        fx, fy, cx, cy, w, h = f.read().split()
    intr = Intrinsics(float(fx), float(fy), float(cx), float(cy), int(w), int(h))
    frames = []
    with open(pose_path) as f:
        for line in f:
            parts = line.split()
            k = int(parts[0])
            q = np.array([float(x) for x in parts[1:5]])
            t = np.array([float(x) for x in parts[5:8]])
            pose = Pose(rotation_from_quaternion(q), t)
            color = np.asarray(Image.open(os.path.join(directory, f"color_{k:04d}.png")))
            mm = np.asarray(Image.open(os.path.join(directory, f"depth_{k:04d}.png")))
            labels = np.asarray(Image.open(os.path.join(directory, f"label_{k:04d}.png")))
            depth = (mm.astype(np.float32) / 1000.0)
            frames.append(Frame(color.copy(), depth, labels.copy(), pose, intr))
    return frames


def read_meta(directory) -> dict:
    meta = {}
    with open(os.path.join(directory, "meta.txt")) as f:
        for line in f:
            key, *rest = line.split()
            meta[key] = rest if len(rest) > 1 else rest[0]
    meta["seed"] = int(meta["seed"])
    return meta
