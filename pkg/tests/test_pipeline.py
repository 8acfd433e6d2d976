"""Training loop, sequential inference, mapping driver, metrics."""

import numpy as np
import pytest

from semmap import pipeline as P
from semmap import synth
from semmap.errors import ConfigError
from semmap.net import NetConfig
from tests.conftest import TINY

SMALL = (4, 4, 4, 4, 6, 6, 6, 8, 8, 8, 8, 8, 8)


def _cfg(recurrent="none"):
    return NetConfig(num_classes=5, input_kind="depth", recurrent=recurrent,
                     widths=SMALL, embed_dim=8)


@pytest.fixture(scope="module")
def two_videos():
    videos = []
    intr = synth.default_intrinsics(48)
    for seed in (31, 32):
        scene = synth.generate_scene(seed)
        poses = synth.sample_trajectory(scene, 6)
        videos.append(synth.render_video(scene, poses, intr))
    return videos


def test_training_is_deterministic(two_videos):
    tc = P.TrainConfig(epochs=1, seed=9)
    n1, l1 = P.train(two_videos, _cfg(), tc)
    n2, l2 = P.train(two_videos, _cfg(), tc)
    assert l1 == l2
    for k in n1.params:
        assert np.array_equal(n1.params[k].data, n2.params[k].data)


def test_training_reduces_loss(two_videos):
    _, log = P.train(two_videos, _cfg(), P.TrainConfig(epochs=6, lr=1e-2))
    assert all(np.isfinite(log))
    assert np.mean(log[-6:]) < np.mean(log[:6]) - 0.2


def test_zero_learning_rate_keeps_params(two_videos):
    tc = P.TrainConfig(epochs=1, lr=0.0, seed=3)
    trained, _ = P.train(two_videos, _cfg(), tc)
    from semmap.net import Network
    init = Network(_cfg(), np.random.default_rng(3))
    for k in trained.params:
        assert np.array_equal(trained.params[k].data, init.params[k].data)


def test_train_rejects_label_overflow(two_videos):
    bad = NetConfig(num_classes=2, input_kind="depth", widths=SMALL, embed_dim=8)
    with pytest.raises(ConfigError):
        P.train(two_videos, bad, P.TrainConfig(epochs=1))


def test_recurrent_training_runs(two_videos):
    net, log = P.train(two_videos, _cfg("wavg"), P.TrainConfig(epochs=1))
    assert all(np.isfinite(log))
    probs, poses = P.infer_video(net, two_videos[0], "ground-truth")
    assert len(probs) == 6
    for pm in probs:
        assert np.allclose(pm.sum(axis=0), 1.0, atol=1e-4)


def test_infer_rejects_unknown_pose_source(two_videos):
    net, _ = P.train(two_videos, _cfg(), P.TrainConfig(epochs=0))
    with pytest.raises(ConfigError):
        P.infer_video(net, two_videos[0], "magic")


def test_train_zero_epochs_returns_initial(two_videos):
    net, log = P.train(two_videos, _cfg(), P.TrainConfig(epochs=0))
    assert log == []


def test_mapping_with_oracle_runs(two_videos):
    res = P.run_semantic_mapping(P.oracle_predictor(5), two_videos[0],
                                 P.MapConfig(voxel_size=0.02, pose_source="icp"))
    assert len(res.trajectory) == 6
    assert res.cloud.points.shape[0] > 500
    assert res.cloud.labels is not None
    assert res.fps > 0


def test_mapping_empty_video():
    res = P.run_semantic_mapping(P.oracle_predictor(5), [], P.MapConfig())
    assert res.trajectory == [] and res.cloud.points.shape[0] == 0


# ---------------------------------------------------------------------------
# metrics

def brute_iou(pred, gt, c, ignore):
    out = np.full(c, np.nan)
    for k in range(c):
        inter = union = 0
        for p, g, m in zip(pred.ravel(), gt.ravel(), ignore.ravel()):
            if m:
                continue
            if p == k and g == k:
                inter += 1
            if p == k or g == k:
                union += 1
        if union:
            out[k] = 100.0 * inter / union
    return out


def test_pixel_iou_matches_brute_force(rng):
    for _ in range(10):
        pred = rng.integers(0, 4, size=(9, 9))
        gt = rng.integers(0, 4, size=(9, 9))
        ignore = rng.random((9, 9)) < 0.2
        iou, mean = P.pixel_iou(pred, gt, 5, ignore)
        want = brute_iou(pred, gt, 5, ignore)
        assert np.allclose(np.nan_to_num(iou, nan=-1), np.nan_to_num(want, nan=-1))
        assert np.isnan(iou[4]) and np.isnan(want[4])
        assert abs(mean - np.nanmean(want)) < 1e-9


def test_pixel_iou_perfect_prediction(rng):
    gt = rng.integers(0, 3, size=(8, 8))
    iou, mean = P.pixel_iou(gt, gt, 5)
    assert np.allclose(iou[:3], 100.0)
    assert np.isnan(iou[3]) and np.isnan(iou[4])
    assert mean == 100.0


def test_point_pr_oracle():
    gt = np.array([0, 0, 1, 1, 1, 2, 2])
    pred = np.array([0, 1, 1, 1, -1, 2, 0])
    prec, rec, mp, mr = P.point_pr(pred, gt, 3)
    # class 0: tp=1 fp=1 fn=1; class 1: tp=2 fp=1 fn=1; class 2: tp=1 fp=0 fn=1
    assert np.allclose(prec, [50.0, 200.0 / 3.0, 100.0])
    assert np.allclose(rec, [50.0, 200.0 / 3.0, 50.0])
    assert abs(mp - np.mean(prec)) < 1e-9


def test_point_pr_undefined_precision_is_zero():
    gt = np.array([1, 1])
    pred = np.array([-1, -1])
    prec, rec, mp, mr = P.point_pr(pred, gt, 2)
    assert prec[1] == 0.0 and rec[1] == 0.0


def test_pixel_accuracy():
    gt = np.array([[0, 1], [2, 2]])
    pred = np.array([[0, 1], [0, 2]])
    assert P.pixel_accuracy(pred, gt) == 75.0
    assert P.pixel_accuracy(pred, gt, ignore_mask=(gt == 2)) == 100.0


def test_metrics_csv(tmp_path):
    path = tmp_path / "m.csv"
    P.metrics_csv(path, ("a", "b"), np.array([50.0, np.nan]),
                  precision=np.array([10.0, 20.0]), recall=np.array([30.0, 40.0]))
    lines = path.read_text().strip().splitlines()
    assert lines[0] == "class,iou,precision,recall"
    assert lines[1] == "a,50.00,10.00,30.00"
    assert lines[2] == "b,,20.00,40.00"
