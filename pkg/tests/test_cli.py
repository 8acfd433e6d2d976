"""The semmap command-line interface, exercised through click's test runner."""

import numpy as np
import pytest
from click.testing import CliRunner

from semmap import mapping as M
from semmap import synth
from semmap.cli import main


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """Dataset + trained checkpoint shared by the CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    runner = CliRunner()
    r = runner.invoke(main, ["generate", "--out", str(root / "data"),
                             "--seed", "3", "--videos", "2",
                             "--frames", "5", "--size", "48"])
    assert r.exit_code == 0, r.output
    r = runner.invoke(main, ["train", "--data", str(root / "data"),
                             "--out", str(root / "ckpt.bin"),
                             "--epochs", "1", "--input-kind", "depth"])
    assert r.exit_code == 0, r.output
    return root


def test_generate_layout(workspace):
    scene = workspace / "data" / "scene_0000"
    for name in ("camera.txt", "poses.txt", "meta.txt",
                 "color_0000.png", "depth_0000.png", "label_0004.png"):
        assert (scene / name).exists()
    assert len(synth.read_dataset(scene)) == 5


def test_generate_deterministic(tmp_path):
    runner = CliRunner()
    for d in ("a", "b"):
        r = runner.invoke(main, ["generate", "--out", str(tmp_path / d),
                                 "--seed", "5", "--frames", "3", "--size", "32"])
        assert r.exit_code == 0, r.output
    d1, d2 = tmp_path / "a" / "scene_0000", tmp_path / "b" / "scene_0000"
    for f in sorted(p.name for p in d1.iterdir()):
        assert (d1 / f).read_bytes() == (d2 / f).read_bytes()


def test_train_writes_checkpoint_and_config(workspace):
    assert (workspace / "ckpt.bin").exists()
    assert (workspace / "ckpt.bin.netcfg").exists()
    assert (workspace / "ckpt.bin").read_bytes()[:4] == b"SMCK"


def test_infer_and_eval(workspace):
    runner = CliRunner()
    preds = workspace / "preds"
    r = runner.invoke(main, ["infer", "--checkpoint", str(workspace / "ckpt.bin"),
                             "--scene", str(workspace / "data" / "scene_0000"),
                             "--out", str(preds), "--dump-assoc"])
    assert r.exit_code == 0, r.output
    assert (preds / "label_0000.png").exists()
    assert (preds / "assoc_0001.txt").exists()
    r = runner.invoke(main, ["eval", "--pred", str(preds),
                             "--gt", str(workspace / "data" / "scene_0000"),
                             "--csv", str(workspace / "m.csv")])
    assert r.exit_code == 0, r.output
    assert "mean" in r.output
    assert (workspace / "m.csv").read_text().startswith("class,iou")


def test_map_and_export(workspace):
    runner = CliRunner()
    out = workspace / "mapped"
    r = runner.invoke(main, ["map", "--checkpoint", str(workspace / "ckpt.bin"),
                             "--scene", str(workspace / "data" / "scene_0000"),
                             "--out", str(out), "--voxel-size", "0.02",
                             "--pose-source", "ground-truth"])
    assert r.exit_code == 0, r.output
    for suffix in (".vol", ".ply", "_poses.txt"):
        assert (workspace / ("mapped" + suffix)).exists()
    cloud = M.read_ply(str(out) + ".ply")
    assert cloud.points.shape[0] > 100
    r = runner.invoke(main, ["export", "--volume", str(out) + ".vol",
                             "--ply", str(workspace / "again.ply")])
    assert r.exit_code == 0, r.output
    back = M.read_ply(workspace / "again.ply")
    assert np.allclose(back.points, cloud.points, atol=1e-5)


def test_poses_file_matches_ground_truth(workspace):
    """Ground-truth pose source writes the dataset trajectory back out."""
    lines = (workspace / "mapped_poses.txt").read_text().strip().splitlines()
    video = synth.read_dataset(workspace / "data" / "scene_0000")
    assert len(lines) == len(video)
    vals = np.array([float(x) for x in lines[0].split()])
    from semmap.geom import quaternion_from_rotation
    q = quaternion_from_rotation(video[0].pose.rotation)
    assert np.allclose(vals[:4], q, atol=1e-12)
    assert np.allclose(vals[4:], video[0].pose.translation, atol=1e-12)


def test_missing_inputs_give_nonzero_exit(tmp_path):
    runner = CliRunner()
    r = runner.invoke(main, ["train", "--data", str(tmp_path / "nope"),
                             "--out", str(tmp_path / "c.bin")])
    assert r.exit_code != 0
    r = runner.invoke(main, ["export", "--volume", str(tmp_path / "x.vol"),
                             "--ply", str(tmp_path / "y.ply")])
    assert r.exit_code != 0


def test_infer_without_config_fails_cleanly(tmp_path, workspace):
    import shutil
    orphan = tmp_path / "orphan.bin"
    shutil.copy(workspace / "ckpt.bin", orphan)
    runner = CliRunner()
    r = runner.invoke(main, ["infer", "--checkpoint", str(orphan),
                             "--scene", str(workspace / "data" / "scene_0000"),
                             "--out", str(tmp_path / "o")])
    assert r.exit_code != 0
