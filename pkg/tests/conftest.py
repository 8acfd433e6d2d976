import numpy as np
import pytest

from semmap import synth
from semmap.net import NetConfig

TINY = (8, 8, 8, 8, 12, 12, 12, 16, 16, 16, 16, 16, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return NetConfig(num_classes=5, input_kind="depth", recurrent="none",
                     widths=TINY, embed_dim=12)


@pytest.fixture(scope="session")
def small_video():
    """One deterministic 8-frame 48x48 video shared across tests."""
    cfg = synth.SynthConfig()
    scene = synth.generate_scene(7, cfg)
    poses = synth.sample_trajectory(scene, 8)
    intr = synth.default_intrinsics(48)
    return synth.render_video(scene, poses, intr, cfg)
