"""Training, inference, the per-frame semantic-mapping loop, and metrics."""

from __future__ import annotations

import glob
import os
import time
from dataclasses import dataclass, field

import numpy as np

from . import assoc as A
from . import mapping as M
from . import semfuse
from . import synth
from . import tensor as T
from .errors import ConfigError, TrackingLostError
from .geom import Intrinsics, PointCloud, Pose
from .net import NetConfig, Network, network_input
from .recurrent import RecurrentState, state_from_graph


# ---------------------------------------------------------------------------
# dataset handling

def scene_dirs(root) -> list[str]:
    dirs = sorted(glob.glob(os.path.join(root, "scene_*")))
    if not dirs:
        raise IOError(f"no scene_* directories under {root}")
    return dirs


def load_videos(root) -> list[list[synth.Frame]]:
    return [synth.read_dataset(d) for d in scene_dirs(root)]


def generate_dataset(out_dir, seeds, n_frames=60, size=64,
                     config: synth.SynthConfig | None = None,
                     trajectory_kwargs: dict | None = None):
    """Render one scene directory per seed under out_dir."""
    cfg = config or synth.SynthConfig()
    intr = synth.default_intrinsics(size)
    for i, seed in enumerate(seeds):
        scene = synth.generate_scene(seed, cfg)
        poses = synth.sample_trajectory(scene, n_frames, **(trajectory_kwargs or {}))
        video = synth.render_video(scene, poses, intr, cfg)
        synth.write_dataset(video, os.path.join(out_dir, f"scene_{i:04d}"),
                            seed=seed, class_names=scene.class_names)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainConfig:
    lr: float = 1e-3
    momentum: float = 0.9
    epochs: int = 30
    seed: int = 0
    bptt: int = 3            # recurrent mini-batch: consecutive frames per window
    class_balance: bool = True   # median-frequency class weighting in the loss
    log_every: int = 50


class SgdMomentum:
    def __init__(self, params: dict[str, T.Tensor], lr: float, momentum: float):
        self.params = params
        self.lr = lr
        self.momentum = momentum
        self.velocity = {k: np.zeros_like(p.data) for k, p in params.items()}

    def step(self):
        for k, p in self.params.items():
            if p.grad is None:
                continue
            v = self.velocity[k]
            v *= self.momentum
            v -= self.lr * p.grad
            p.data += v
            p.zero_grad()


def _frame_loss(net: Network, frame: synth.Frame, prev=None, assoc_map=None,
                class_weights=None):
    x = network_input(frame, net.config.input_kind)
    logits, state = net.forward(x, prev, assoc_map)
    mask = (frame.depth == 0)[None]
    loss = T.softmax_cross_entropy(logits, frame.labels[None].astype(np.int64),
                                   mask, class_weights)
    return loss, state


def median_frequency_weights(videos, num_classes: int) -> np.ndarray:
    """Per-class loss weights: median class frequency over each class's own.

    Rare classes get weights above 1 and dominant classes below 1, so the
    per-pixel loss is not swamped by the large background and table regions.
    Classes absent from the data get weight 0.
    """
    counts = np.zeros(num_classes, dtype=np.int64)
    for video in videos:
        for frame in video:
            valid = frame.depth > 0
            counts += np.bincount(frame.labels[valid].ravel(),
                                  minlength=num_classes)[:num_classes]
    freq = counts / max(counts.sum(), 1)
    present = freq > 0
    weights = np.zeros(num_classes)
    weights[present] = np.median(freq[present]) / freq[present]
    return weights


def train(videos: list[list[synth.Frame]], net_config: NetConfig,
          train_config: TrainConfig | None = None,
          rng: np.random.Generator | None = None):
    """SGD-with-momentum training; returns (network, per-iteration loss list).

    Non-recurrent nets train on single frames chosen uniformly at random;
    recurrent nets on windows of consecutive frames unrolled through the
    association maps computed from the stored ground-truth poses, with
    carried state starting from zero at each window.

    An epoch is one optimizer update per frame in the dataset regardless of
    windowing, so recurrent and single-frame runs with the same epoch count
    take the same number of gradient steps (recurrent epochs cost more
    compute because each update unrolls a whole window).
    """
    tc = train_config or TrainConfig()
    rng = rng or np.random.default_rng(tc.seed)
    net = Network(net_config, rng)
    for video in videos:
        lbl_max = max(int(f.labels.max()) for f in video)
        if lbl_max >= net_config.num_classes:
            raise ConfigError(
                f"dataset has label {lbl_max} but the network has "
                f"{net_config.num_classes} classes")
    opt = SgdMomentum(net.params, tc.lr, tc.momentum)
    cw = median_frequency_weights(videos, net_config.num_classes) \
        if tc.class_balance else None
    recurrent = net_config.recurrent != "none"
    flat = [(vi, fi) for vi, v in enumerate(videos) for fi in range(len(v))]
    window = tc.bptt if recurrent else 1
    iters_per_epoch = max(1, len(flat))
    log = []
    for _epoch in range(tc.epochs):
        for _it in range(iters_per_epoch):
            if not recurrent:
                vi, fi = flat[rng.integers(len(flat))]
                loss, _ = _frame_loss(net, videos[vi][fi], class_weights=cw)
                T.backward(loss)
                loss_val = float(loss.data)
            else:
                vi = int(rng.integers(len(videos)))
                video = videos[vi]
                fi = int(rng.integers(len(video) - window + 1))
                state = None
                total = None
                for k in range(window):
                    frame = video[fi + k]
                    amap = None
                    if k > 0:
                        prev_frame = video[fi + k - 1]
                        amap = A.compute_association(
                            frame.depth, prev_frame.pose, frame.pose,
                            frame.intrinsics, prev_frame.depth)
                    loss, state = _frame_loss(net, frame, state, amap, cw)
                    total = loss if total is None else T.add(total, loss)
                loss_scaled = T.scale(total, 1.0 / window)
                T.backward(loss_scaled)
                loss_val = float(loss_scaled.data)
            if not np.isfinite(loss_val):
                raise RuntimeError(
                    f"training diverged: loss={loss_val} at epoch {_epoch} iter {_it}")
            opt.step()
            log.append(loss_val)
    return net, log


# ---------------------------------------------------------------------------
# inference

def infer_video(net: Network, video: list[synth.Frame], pose_source: str = "ground-truth",
                map_config: "MapConfig | None" = None):
    """Sequential per-frame probability maps, carrying recurrent state.

    pose_source 'ground-truth' uses the stored poses for association;
    'icp' tracks the camera against a TSDF volume built online, and falls
    back to an all-none association for frames where tracking is lost.
    Returns (list of (C, H, W) prob maps, list of poses used).
    """
    if pose_source not in ("ground-truth", "icp"):
        raise ConfigError(f"unknown pose source {pose_source!r}")
    recurrent = net.config.recurrent != "none"
    intr = video[0].intrinsics
    probs_out: list[np.ndarray] = []
    poses: list[Pose] = []
    state: RecurrentState | None = None
    vol = None
    if pose_source == "icp":
        mc = map_config or MapConfig(num_classes=net.config.num_classes)
        vol = M.TsdfVolume.for_bounds(mc.bounds_lo, mc.bounds_hi, mc.voxel_size)
    for k, frame in enumerate(video):
        lost = False
        if pose_source == "ground-truth":
            pose = frame.pose
        else:
            if k == 0:
                pose = frame.pose
            else:
                try:
                    model = M.render_model_view(vol, poses[-1], intr)
                    pose = M.icp_track(model, frame.depth, intr, init=poses[-1])
                except TrackingLostError:
                    pose = poses[-1]
                    lost = True
            vol.integrate(frame.depth, pose, intr)
        amap = None
        if recurrent and k > 0 and not lost:
            amap = A.compute_association(frame.depth, poses[-1], pose, intr,
                                         video[k - 1].depth)
        probs, state = net.predict(network_input(frame, net.config.input_kind),
                                   state if recurrent else None, amap)
        probs_out.append(probs)
        poses.append(pose)
    return probs_out, poses


# ---------------------------------------------------------------------------
# the full per-frame mapping loop

@dataclass
class MapConfig:
    voxel_size: float = 0.0125
    bounds_lo: tuple[float, float, float] = (-0.75, -0.75, -0.04)
    bounds_hi: tuple[float, float, float] = (0.75, 0.75, 0.85)
    pose_source: str = "icp"          # 'icp' or 'ground-truth'
    num_classes: int = len(synth.CLASS_NAMES)


@dataclass
class MappingResult:
    volume: M.TsdfVolume
    cloud: PointCloud
    trajectory: list[Pose]
    lost_frames: list[int]
    fps: float


def run_semantic_mapping(predict_fn, video: list[synth.Frame],
                         config: MapConfig | None = None) -> MappingResult:
    """Per frame: track -> integrate depth -> associate -> predict -> fuse labels.

    predict_fn(frame, prev_state, assoc_map) -> ((C, H, W) prob map, new state);
    use network_predictor(net) for a trained network, or inject an oracle.
    Tracking losses keep the previous pose and flag the frame.
    """
    cfg = config or MapConfig()
    if not video:
        vol = M.TsdfVolume.for_bounds(cfg.bounds_lo, cfg.bounds_hi, cfg.voxel_size,
                                      num_classes=cfg.num_classes)
        return MappingResult(vol, PointCloud(np.zeros((0, 3))), [], [], 0.0)
    intr = video[0].intrinsics
    vol = M.TsdfVolume.for_bounds(cfg.bounds_lo, cfg.bounds_hi, cfg.voxel_size,
                                  num_classes=cfg.num_classes)
    trajectory: list[Pose] = []
    lost_frames: list[int] = []
    state = None
    t0 = time.time()
    for k, frame in enumerate(video):
        lost = False
        if cfg.pose_source == "ground-truth" or k == 0:
            pose = frame.pose
        else:
            try:
                model = M.render_model_view(vol, trajectory[-1], intr)
                pose = M.icp_track(model, frame.depth, intr, init=trajectory[-1])
            except TrackingLostError:
                pose = trajectory[-1]
                lost = True
                lost_frames.append(k)
        vol.integrate(frame.depth, pose, intr)
        amap = None
        if k > 0 and not lost:
            amap = A.compute_association(frame.depth, trajectory[-1], pose, intr,
                                         video[k - 1].depth)
        probs, state = predict_fn(frame, state, amap)
        semfuse.fuse_labels(vol, probs, frame.depth, pose, intr)
        trajectory.append(pose)
    fps = len(video) / max(time.time() - t0, 1e-9)
    cloud = vol.extract_surface()
    return MappingResult(vol, cloud, trajectory, lost_frames, fps)


def network_predictor(net: Network):
    recurrent = net.config.recurrent != "none"

    def predict(frame, state, amap):
        return net.predict(network_input(frame, net.config.input_kind),
                           state if recurrent else None, amap)

    return predict


def oracle_predictor(num_classes: int):
    """Ground-truth one-hot predictions, for isolating mapping/fusion quality."""

    def predict(frame, state, amap):
        h, w = frame.labels.shape
        probs = np.zeros((num_classes, h, w))
        probs[frame.labels, np.arange(h)[:, None], np.arange(w)] = 1.0
        return probs, None

    return predict


# ---------------------------------------------------------------------------
# metrics

def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int,
                     ignore_mask: np.ndarray | None = None) -> np.ndarray:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = np.ones(gt.shape, dtype=bool) if ignore_mask is None \
        else ~np.asarray(ignore_mask).ravel()
    keep &= pred >= 0      # NO_LABEL predictions are counted separately (point_pr)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (gt[keep], pred[keep]), 1)
    return cm


def pixel_iou(pred, gt, num_classes: int, ignore_mask=None):
    """Per-class IoU (percent; NaN for classes absent from both) and their mean."""
    cm = confusion_matrix(pred, gt, num_classes, ignore_mask)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(num_classes, np.nan)
    present = union > 0
    iou[present] = 100.0 * tp[present] / union[present]
    mean = float(np.nanmean(iou)) if present.any() else float("nan")
    return iou, mean


def point_pr(pred_labels: np.ndarray, gt_labels: np.ndarray, num_classes: int):
    """Per-class precision/recall (percent) on 3D point labels.

    Unlabeled predictions (NO_LABEL) count as false negatives for the
    ground-truth class; undefined precisions are reported as 0.
    """
    pred = np.asarray(pred_labels)
    gt = np.asarray(gt_labels)
    precision = np.zeros(num_classes)
    recall = np.zeros(num_classes)
    present = np.zeros(num_classes, dtype=bool)
    for c in range(num_classes):
        tp = np.sum((pred == c) & (gt == c))
        fp = np.sum((pred == c) & (gt != c))
        fn = np.sum((pred != c) & (gt == c))
        present[c] = (tp + fn + fp) > 0
        precision[c] = 100.0 * tp / (tp + fp) if (tp + fp) > 0 else 0.0
        recall[c] = 100.0 * tp / (tp + fn) if (tp + fn) > 0 else 0.0
    mp = float(precision[present].mean()) if present.any() else 0.0
    mr = float(recall[present].mean()) if present.any() else 0.0
    return precision, recall, mp, mr


def pixel_accuracy(pred, gt, ignore_mask=None) -> float:
    pred = np.asarray(pred).ravel()
    gt = np.asarray(gt).ravel()
    keep = np.ones(gt.shape, dtype=bool) if ignore_mask is None \
        else ~np.asarray(ignore_mask).ravel()
    return 100.0 * float(np.mean(pred[keep] == gt[keep]))


def metrics_csv(path, class_names, iou, precision=None, recall=None):
    with open(path, "w") as f:
        f.write("class,iou,precision,recall\n")
        for c, name in enumerate(class_names):
            p = "" if precision is None else f"{precision[c]:.2f}"
            r = "" if recall is None else f"{recall[c]:.2f}"
            i = "" if np.isnan(iou[c]) else f"{iou[c]:.2f}"
            f.write(f"{name},{i},{p},{r}\n")
