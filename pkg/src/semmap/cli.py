"""Command-line interface: generate / train / infer / map / eval / export."""

from __future__ import annotations

import glob
import os
import sys

import click
import numpy as np

from . import assoc as A
from . import mapping as M
from . import pipeline as P
from . import synth
from .net import NetConfig, Network, TINY_WIDTHS


def _net_config(config_path, num_classes, input_kind, recurrent) -> NetConfig:
    if config_path:
        cfg = NetConfig.load(config_path)
        if input_kind:
            cfg.input_kind = input_kind
        if recurrent:
            cfg.recurrent = recurrent
        return cfg
    return NetConfig(num_classes=num_classes, input_kind=input_kind or "rgb",
                     recurrent=recurrent or "none", widths=TINY_WIDTHS,
                     embed_dim=32)


@click.group()
def main():
    """Recurrent semantic mapping for RGB-D video: synthetic data generation,
    segmentation-network training, sequential inference, TSDF mapping with
    label fusion, evaluation, and point-cloud export."""


@main.command()
@click.option("--out", required=True, type=click.Path(), help="output dataset root")
@click.option("--seed", default=0, show_default=True, type=int)
@click.option("--videos", default=1, show_default=True, type=int)
@click.option("--frames", default=60, show_default=True, type=int)
@click.option("--size", default=64, show_default=True, type=int,
              help="square image resolution")
def generate(out, seed, videos, frames, size):
    """Render synthetic RGB-D videos with exact ground truth."""
    seeds = [seed + i for i in range(videos)]
    P.generate_dataset(out, seeds, n_frames=frames, size=size)
    click.echo(f"wrote {videos} video(s) of {frames} frames to {out}")


@main.command()
@click.option("--data", required=True, type=click.Path(exists=True),
              help="dataset root containing scene_* directories")
@click.option("--out", required=True, type=click.Path(), help="checkpoint path")
@click.option("--config", "config_path", type=click.Path(exists=True),
              help="network config file (key value lines)")
@click.option("--num-classes", default=len(synth.CLASS_NAMES), show_default=True)
@click.option("--input-kind", type=click.Choice(["rgb", "depth", "normal", "rgbd"]),
              default=None)
@click.option("--recurrent", type=click.Choice(["none", "wavg", "gru"]), default=None)
@click.option("--epochs", default=30, show_default=True, type=int)
@click.option("--lr", default=1e-3, show_default=True, type=float)
@click.option("--momentum", default=0.9, show_default=True, type=float)
@click.option("--seed", default=0, show_default=True, type=int)
def train(data, out, config_path, num_classes, input_kind, recurrent,
          epochs, lr, momentum, seed):
    """Train a segmentation network with SGD + momentum."""
    cfg = _net_config(config_path, num_classes, input_kind, recurrent)
    videos = P.load_videos(data)
    tc = P.TrainConfig(lr=lr, momentum=momentum, epochs=epochs, seed=seed)
    net, log = P.train(videos, cfg, tc)
    net.save_checkpoint(out)
    cfg.save(out + ".netcfg")
    click.echo(f"trained {epochs} epochs, final loss {log[-1]:.4f}; "
               f"checkpoint at {out}")


def _load_net(checkpoint, config_path):
    cfg_path = config_path or checkpoint + ".netcfg"
    if not os.path.exists(cfg_path):
        raise IOError(f"network config not found at {cfg_path}; pass --config")
    return Network.from_checkpoint(NetConfig.load(cfg_path), checkpoint)


@main.command()
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--scene", required=True, type=click.Path(exists=True),
              help="a single scene directory")
@click.option("--out", required=True, type=click.Path(), help="output directory")
@click.option("--pose-source", type=click.Choice(["ground-truth", "icp"]),
              default="ground-truth", show_default=True)
@click.option("--dump-assoc", is_flag=True,
              help="also write per-frame pixel-association index maps")
def infer(checkpoint, config_path, scene, out, pose_source, dump_assoc):
    """Sequential per-frame label prediction over one video."""
    net = _load_net(checkpoint, config_path)
    video = synth.read_dataset(scene)
    probs, poses = P.infer_video(net, video, pose_source)
    os.makedirs(out, exist_ok=True)
    from PIL import Image
    for k, pm in enumerate(probs):
        pred = np.argmax(pm, axis=0).astype(np.uint8)
        Image.fromarray(pred).save(os.path.join(out, f"label_{k:04d}.png"))
        if dump_assoc and k > 0:
            amap = A.compute_association(video[k].depth, poses[k - 1], poses[k],
                                         video[k].intrinsics, video[k - 1].depth)
            A.dump_association(amap, os.path.join(out, f"assoc_{k:04d}.txt"))
    click.echo(f"wrote {len(probs)} label image(s) to {out}")


@main.command("map")
@click.option("--checkpoint", required=True, type=click.Path(exists=True))
@click.option("--config", "config_path", type=click.Path(exists=True))
@click.option("--scene", required=True, type=click.Path(exists=True))
@click.option("--out", required=True, type=click.Path(),
              help="output prefix: writes <out>.vol, <out>.ply, <out>_poses.txt")
@click.option("--pose-source", type=click.Choice(["ground-truth", "icp"]),
              default="icp", show_default=True)
@click.option("--voxel-size", default=0.0125, show_default=True, type=float)
def map_cmd(checkpoint, config_path, scene, out, pose_source, voxel_size):
    """Build a labeled TSDF map from one video (tracking + fusion)."""
    net = _load_net(checkpoint, config_path)
    video = synth.read_dataset(scene)
    cfg = P.MapConfig(voxel_size=voxel_size, pose_source=pose_source,
                      num_classes=net.config.num_classes)
    res = P.run_semantic_mapping(P.network_predictor(net), video, cfg)
    res.volume.save(out + ".vol")
    M.export_ply(res.cloud, out + ".ply")
    from .geom import quaternion_from_rotation
    with open(out + "_poses.txt", "w") as f:
        for pose in res.trajectory:
            q = quaternion_from_rotation(pose.rotation)
            t = pose.translation
            f.write(" ".join(f"{v:.17g}" for v in (*q, *t)) + "\n")
    msg = f"mapped {len(video)} frames at {res.fps:.1f} fps; " \
          f"{res.cloud.points.shape[0]} surface points -> {out}.ply"
    if res.lost_frames:
        msg += f" (tracking lost on {len(res.lost_frames)} frame(s))"
    click.echo(msg)


@main.command("eval")
@click.option("--pred", required=True, type=click.Path(exists=True),
              help="directory of predicted label_*.png")
@click.option("--gt", required=True, type=click.Path(exists=True),
              help="ground-truth scene directory (label_*.png, optional depth_*.png)")
@click.option("--num-classes", default=len(synth.CLASS_NAMES), show_default=True)
@click.option("--csv", "csv_path", type=click.Path(), help="also write metrics as CSV")
def eval_cmd(pred, gt, num_classes, csv_path):
    """Pixel-level IoU of predicted label images against ground truth."""
    from PIL import Image
    pred_files = sorted(glob.glob(os.path.join(pred, "label_*.png")))
    if not pred_files:
        raise IOError(f"no label_*.png under {pred}")
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    for pf in pred_files:
        name = os.path.basename(pf)
        gf = os.path.join(gt, name)
        if not os.path.exists(gf):
            raise IOError(f"missing ground-truth image {gf}")
        p = np.asarray(Image.open(pf))
        g = np.asarray(Image.open(gf))
        df = os.path.join(gt, name.replace("label", "depth"))
        ignore = None
        if os.path.exists(df):
            ignore = np.asarray(Image.open(df)) == 0
        cm += P.confusion_matrix(p, g, num_classes, ignore)
    tp = np.diag(cm).astype(np.float64)
    union = cm.sum(axis=0) + cm.sum(axis=1) - tp
    iou = np.full(num_classes, np.nan)
    iou[union > 0] = 100.0 * tp[union > 0] / union[union > 0]
    names = synth.CLASS_NAMES if num_classes == len(synth.CLASS_NAMES) \
        else tuple(f"class{c}" for c in range(num_classes))
    for c, name in enumerate(names):
        val = "absent" if np.isnan(iou[c]) else f"{iou[c]:6.2f}"
        click.echo(f"{name:12s} IoU {val}")
    click.echo(f"{'mean':12s} IoU {np.nanmean(iou):6.2f}")
    if csv_path:
        P.metrics_csv(csv_path, names, iou)


@main.command()
@click.option("--volume", required=True, type=click.Path(exists=True),
              help="volume snapshot written by the map command")
@click.option("--ply", "ply_path", required=True, type=click.Path())
def export(volume, ply_path):
    """Extract the labeled surface of a saved volume as an ASCII PLY cloud."""
    vol = M.TsdfVolume.load(volume)
    cloud = vol.extract_surface()
    M.export_ply(cloud, ply_path)
    click.echo(f"wrote {cloud.points.shape[0]} points to {ply_path}")


def run():
    try:
        main(standalone_mode=False)
    except click.ClickException as exc:
        exc.show()
        sys.exit(exc.exit_code)
    except click.Abort:
        sys.exit(1)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(1)


if __name__ == "__main__":
    run()
