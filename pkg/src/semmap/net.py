"""Fully convolutional segmentation networks.

Single stream: 13 feature-extraction convolutions in five blocks
(2-2-3-3-3) with four 2x2 max pools between them, then an embedding
phase: a 3x3 convolution to the embedding width, x2 deconvolution, a
skip link from the features before the 4th pool (1/8 resolution)
through its own embedding convolution, an addition, another x2
deconvolution, a second skip link from before the 3rd pool (1/4
resolution), an addition, and a final x4 deconvolution back to input
resolution, followed by a 3x3 classification convolution. The second,
finer skip matters at small image sizes, where objects can be only a
few pixels across at 1/8 resolution.

Double stream (rgbd): two feature towers with separate parameters whose
features are channel-concatenated ("late fusion") at both the main and
skip paths before the shared embedding phase.

An optional recurrent layer sits between the second deconvolution and
the classifier, operating on the full-resolution embedded features.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import recurrent as R
from . import tensor as T
from .errors import ConfigError

BLOCKS = (2, 2, 3, 3, 3)          # convolutions per block; pools after blocks 1-4
DEFAULT_WIDTHS = (64, 64, 128, 128, 256, 256, 256, 512, 512, 512, 512, 512, 512)
TINY_WIDTHS = (16, 16, 24, 24, 32, 32, 32, 48, 48, 48, 48, 48, 48)

INPUT_KINDS = ("rgb", "depth", "normal", "rgbd")
RECURRENT_KINDS = ("none", "wavg", "gru")


@dataclass
class NetConfig:
    num_classes: int
    input_kind: str = "rgb"
    recurrent: str = "none"
    widths: tuple[int, ...] = DEFAULT_WIDTHS
    embed_dim: int = 64

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        if self.num_classes < 2:
            raise ConfigError("need at least 2 classes")
        if self.embed_dim <= 0:
            raise ConfigError("embed_dim must be positive")
        if self.input_kind not in INPUT_KINDS:
            raise ConfigError(f"unknown input kind {self.input_kind!r}")
        if self.recurrent not in RECURRENT_KINDS:
            raise ConfigError(f"unknown recurrent kind {self.recurrent!r}")
        if len(self.widths) != sum(BLOCKS):
            raise ConfigError(f"width schedule needs {sum(BLOCKS)} entries")

    @property
    def feature_dim(self) -> int:
        return self.widths[-1]

    @property
    def double_stream(self) -> bool:
        return self.input_kind == "rgbd"

    def save(self, path):
        with open(path, "w") as f:
            f.write(f"num_classes {self.num_classes}\n")
            f.write(f"input_kind {self.input_kind}\n")
            f.write(f"recurrent {self.recurrent}\n")
            f.write("widths " + ",".join(str(w) for w in self.widths) + "\n")
            f.write(f"embed_dim {self.embed_dim}\n")

    @staticmethod
    def load(path) -> "NetConfig":
        kv = {}
        with open(path) as f:
            for line in f:
                if line.strip():
                    key, value = line.split(None, 1)
                    kv[key] = value.strip()
        return NetConfig(
            num_classes=int(kv["num_classes"]),
            input_kind=kv.get("input_kind", "rgb"),
            recurrent=kv.get("recurrent", "none"),
            widths=tuple(int(x) for x in kv["widths"].split(",")) if "widths" in kv
            else DEFAULT_WIDTHS,
            embed_dim=int(kv.get("embed_dim", 64)),
        )


def _he_conv(rng, cout, cin, k, dtype=np.float32):
    std = np.sqrt(2.0 / (cin * k * k))
    return rng.normal(0.0, std, size=(cout, cin, k, k)).astype(dtype)


class Network:
    """Segmentation network; parameters live in a flat name -> Tensor dict."""

    def __init__(self, config: NetConfig, rng: np.random.Generator | None = None,
                 params: dict[str, np.ndarray] | None = None):
        self.config = config
        self.params: dict[str, T.Tensor] = {}
        rng = rng or np.random.default_rng(0)
        self._streams = ("rgb", "depth") if config.double_stream else ("main",)
        self._build_params(rng)
        if params is not None:
            self.load_params(params)

    # -- parameters ---------------------------------------------------------

    def _add(self, name, arr):
        self.params[name] = T.parameter(arr, name=name)

    def _build_params(self, rng):
        cfg = self.config
        for s in self._streams:
            cin = 3
            for i, width in enumerate(cfg.widths):
                self._add(f"{s}.conv{i}.w", _he_conv(rng, width, cin, 3))
                self._add(f"{s}.conv{i}.b", np.zeros(width, dtype=np.float32))
                cin = width
        n_streams = len(self._streams)
        skip8_ch = cfg.widths[sum(BLOCKS[:4]) - 1] * n_streams
        skip4_ch = cfg.widths[sum(BLOCKS[:3]) - 1] * n_streams
        feat_ch = cfg.feature_dim * n_streams
        self._add("embed.main.w", _he_conv(rng, cfg.embed_dim, feat_ch, 3))
        self._add("embed.main.b", np.zeros(cfg.embed_dim, dtype=np.float32))
        self._add("embed.skip.w", _he_conv(rng, cfg.embed_dim, skip8_ch, 3))
        self._add("embed.skip.b", np.zeros(cfg.embed_dim, dtype=np.float32))
        self._add("embed.skip4.w", _he_conv(rng, cfg.embed_dim, skip4_ch, 3))
        self._add("embed.skip4.b", np.zeros(cfg.embed_dim, dtype=np.float32))
        self._add("deconv2.w", T.bilinear_kernel(cfg.embed_dim, cfg.embed_dim, 2))
        self._add("deconv2b.w", T.bilinear_kernel(cfg.embed_dim, cfg.embed_dim, 2))
        self._add("deconv4.w", T.bilinear_kernel(cfg.embed_dim, cfg.embed_dim, 4))
        self._add("classifier.w", _he_conv(rng, cfg.num_classes, cfg.embed_dim, 3))
        self._add("classifier.b", np.zeros(cfg.num_classes, dtype=np.float32))
        if cfg.recurrent == "wavg":
            self.params.update(R.init_cell_params(cfg.embed_dim, rng))
        elif cfg.recurrent == "gru":
            self.params.update(R.init_gru_params(cfg.embed_dim, rng))

    def param_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def load_params(self, arrays: dict[str, np.ndarray]):
        if set(arrays) != set(self.params):
            missing = set(self.params) ^ set(arrays)
            raise ConfigError(f"checkpoint does not match network: {sorted(missing)}")
        for k, v in arrays.items():
            if self.params[k].data.shape != v.shape:
                raise ConfigError(f"parameter {k} shape mismatch")
            self.params[k].data = v.astype(self.params[k].data.dtype)

    def num_params(self) -> int:
        return sum(p.data.size for p in self.params.values())

    # -- forward ------------------------------------------------------------

    def _tower(self, s: str, x: T.Tensor):
        """Feature tower; returns (skip at /4, skip at /8, features at /16)."""
        p = self.params
        i = 0
        skip4 = skip8 = None
        for bi, nconv in enumerate(BLOCKS):
            for _ in range(nconv):
                x = T.relu(T.conv2d(x, p[f"{s}.conv{i}.w"], p[f"{s}.conv{i}.b"],
                                    stride=1, padding=1))
                i += 1
            if bi == 2:
                skip4 = x                   # before the 3rd pool, at 1/4 resolution
            if bi == 3:
                skip8 = x                   # before the 4th pool, at 1/8 resolution
            if bi < 4:
                x, _ = T.maxpool2x2(x)
        return skip4, skip8, x

    def forward(self, inputs, prev=None, assoc: np.ndarray | None = None):
        """One frame forward pass.

        inputs: (3, H, W) array, or a (rgb, depth) pair of such arrays for
        the double-stream network. prev/assoc feed the recurrent layer
        (see recurrent.recurrent_layer). Returns (logits Tensor
        (1, C, H, W), state pair or None).
        """
        cfg = self.config
        p = self.params
        if cfg.double_stream:
            rgb, depth = inputs
            s4_rgb, s8_rgb, f_rgb = self._tower("rgb", T.Tensor(np.asarray(rgb)[None]))
            s4_dep, s8_dep, f_dep = self._tower("depth", T.Tensor(np.asarray(depth)[None]))
            skip4 = T.concat_channels(s4_rgb, s4_dep)
            skip8 = T.concat_channels(s8_rgb, s8_dep)
            feat = T.concat_channels(f_rgb, f_dep)
        else:
            skip4, skip8, feat = self._tower("main", T.Tensor(np.asarray(inputs)[None]))

        x = T.relu(T.conv2d(feat, p["embed.main.w"], p["embed.main.b"], 1, 1))
        x = T.deconv2d(x, p["deconv2.w"], 2)
        sk = T.relu(T.conv2d(skip8, p["embed.skip.w"], p["embed.skip.b"], 1, 1))
        x = T.add(x, sk)
        x = T.deconv2d(x, p["deconv2b.w"], 2)
        sk4 = T.relu(T.conv2d(skip4, p["embed.skip4.w"], p["embed.skip4.b"], 1, 1))
        x = T.add(x, sk4)
        x = T.deconv2d(x, p["deconv4.w"], 4)

        state = None
        if cfg.recurrent != "none":
            x, state = R.recurrent_layer(cfg.recurrent, x, prev, assoc, p)
        logits = T.conv2d(x, p["classifier.w"], p["classifier.b"], 1, 1)
        return logits, state

    def predict(self, inputs, prev: R.RecurrentState | None = None,
                assoc: np.ndarray | None = None):
        """Probability map (C, H, W) plus the updated carried state."""
        logits, state = self.forward(inputs, prev, assoc)
        probs = T.softmax_probs(logits.data)[0]
        new_state = None
        if state is not None:
            frame_index = (prev.frame_index + 1) if prev is not None else 0
            new_state = R.state_from_graph(state[0], state[1], frame_index)
        return probs, new_state

    # -- persistence --------------------------------------------------------

    def save_checkpoint(self, path):
        T.save_checkpoint(path, self.param_arrays())

    @staticmethod
    def from_checkpoint(config: NetConfig, path) -> "Network":
        net = Network(config)
        net.load_params(T.load_checkpoint(path))
        return net


def network_input(frame, kind: str):
    """Normalized network input(s) for a rendered/loaded frame."""
    from . import synth

    if kind == "rgb":
        return synth.color_to_input(frame.color)
    if kind == "depth":
        return synth.depth_to_input(frame.depth, frame.intrinsics)
    if kind == "normal":
        return synth.normal_to_input(frame.depth, frame.intrinsics)
    if kind == "rgbd":
        return (synth.color_to_input(frame.color),
                synth.depth_to_input(frame.depth, frame.intrinsics))
    raise ConfigError(f"unknown input kind {kind!r}")


def build_single_stream(config: NetConfig, rng=None) -> Network:
    if config.input_kind not in ("rgb", "depth", "normal"):
        raise ConfigError("single stream expects rgb, depth or normal input")
    if config.recurrent != "none":
        raise ConfigError("use build_recurrent for recurrent networks")
    return Network(config, rng)


def build_double_stream(config: NetConfig, rng=None) -> Network:
    if config.input_kind != "rgbd":
        raise ConfigError("double stream expects rgbd input")
    if config.recurrent != "none":
        raise ConfigError("use build_recurrent for recurrent networks")
    return Network(config, rng)


def build_recurrent(config: NetConfig, rng=None) -> Network:
    if config.recurrent == "none":
        raise ConfigError("recurrent network requires recurrent in {'wavg', 'gru'}")
    return Network(config, rng)
