"""Per-pixel recurrent layer with inter-frame data association.

The main cell keeps, for every pixel, a hidden vector h and an
accumulated weight vector w. Carried state arrives from the associated
pixel of the previous frame (zeros if no association, and for every
pixel of the first frame). The update is a weighted running average:

    w_hat = sigmoid(W [h_carried, x] + b)          gate on the new input
    w     = w_carried + w_hat                      accumulated weights
    h     = relu((w_carried/w) * h_carried + (w_hat/w) * x)

with the hidden state itself as the output. w_hat is strictly inside
(0, 1), so w > 0 after the first step and the division is always
defined. A GRU cell (update/reset gates, tanh candidate) is provided as
the baseline, plugged into the same associated unrolling.

The d x 2d matrix W is stored as a 1x1 convolution over the channel
concatenation of carried state and input, shared by all pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ShapeError


@dataclass
class RecurrentState:
    """Per-pixel carried state for one video stream."""
    hidden: np.ndarray            # (d, H, W), nonnegative
    weight: np.ndarray | None     # (d, H, W) accumulated gate weights; None for GRU
    frame_index: int = 0


def init_cell_params(d: int, rng: np.random.Generator, dtype=np.float32,
                     prefix: str = "recur") -> dict[str, T.Tensor]:
    """Weighted-average cell parameters: W ~ U(+-1/sqrt(2d)), b = 0."""
    bound = 1.0 / np.sqrt(2 * d)
    w = rng.uniform(-bound, bound, size=(d, 2 * d, 1, 1)).astype(dtype)
    return {
        f"{prefix}.W": T.parameter(w, name=f"{prefix}.W"),
        f"{prefix}.b": T.parameter(np.zeros(d, dtype=dtype), name=f"{prefix}.b"),
    }


def init_gru_params(d: int, rng: np.random.Generator, dtype=np.float32,
                    prefix: str = "gru") -> dict[str, T.Tensor]:
    bound = 1.0 / np.sqrt(2 * d)
    params = {}
    for gate in ("z", "r", "c"):
        w = rng.uniform(-bound, bound, size=(d, 2 * d, 1, 1)).astype(dtype)
        params[f"{prefix}.W{gate}"] = T.parameter(w, name=f"{prefix}.W{gate}")
        params[f"{prefix}.b{gate}"] = T.parameter(np.zeros(d, dtype=dtype),
                                                  name=f"{prefix}.b{gate}")
    return params


def associate_state(prev: RecurrentState | None, assoc: np.ndarray,
                    d: int, shape: tuple[int, int],
                    dtype=np.float32) -> tuple[np.ndarray, np.ndarray]:
    """Carried (hidden, weight) arrays for the next frame, as plain numpy.

    Entries with no association (or a missing previous state) are zeros.
    Used at inference; during BPTT the gather runs through the graph via
    tensor.gather_pixels instead.
    """
    h, w = shape
    if prev is None:
        z = np.zeros((d, h, w), dtype=dtype)
        return z, z.copy()
    from .errors import AssociationError

    if assoc.max(initial=-1) >= prev.hidden.shape[1] * prev.hidden.shape[2]:
        raise AssociationError("association index outside the previous frame")
    flat_h = prev.hidden.reshape(d, -1)
    idx = assoc.reshape(-1)
    valid = idx >= 0
    out_h = np.zeros((d, h * w), dtype=dtype)
    out_h[:, valid] = flat_h[:, idx[valid]]
    out_w = np.zeros((d, h * w), dtype=dtype)
    if prev.weight is not None:
        out_w[:, valid] = prev.weight.reshape(d, -1)[:, idx[valid]]
    return out_h.reshape(d, h, w), out_w.reshape(d, h, w)


def cell_step(h_carried: T.Tensor, w_carried: T.Tensor, x: T.Tensor,
              params: dict[str, T.Tensor], prefix: str = "recur"
              ) -> tuple[T.Tensor, T.Tensor, T.Tensor]:
    """One weighted-average update on (1, d, H, W) tensors.

    Returns (h, w, output); the output is the hidden state itself.
    """
    if h_carried.shape != x.shape or w_carried.shape != x.shape:
        raise ShapeError("carried state and input must share shape")
    hx = T.concat_channels(h_carried, x)
    w_hat = T.sigmoid(T.conv2d(hx, params[f"{prefix}.W"], params[f"{prefix}.b"]))
    w_new = T.add(w_carried, w_hat)
    assert np.all(w_new.data > 0)
    h_new = T.relu(T.add(T.mul(T.div(w_carried, w_new), h_carried),
                         T.mul(T.div(w_hat, w_new), x)))
    return h_new, w_new, h_new


def gru_step(h_carried: T.Tensor, x: T.Tensor, params: dict[str, T.Tensor],
             prefix: str = "gru") -> T.Tensor:
    """Standard GRU update on (1, d, H, W) tensors."""
    if h_carried.shape != x.shape:
        raise ShapeError("carried state and input must share shape")
    hx = T.concat_channels(h_carried, x)
    z = T.sigmoid(T.conv2d(hx, params[f"{prefix}.Wz"], params[f"{prefix}.bz"]))
    r = T.sigmoid(T.conv2d(hx, params[f"{prefix}.Wr"], params[f"{prefix}.br"]))
    rhx = T.concat_channels(T.mul(r, h_carried), x)
    cand = T.tanh(T.conv2d(rhx, params[f"{prefix}.Wc"], params[f"{prefix}.bc"]))
    one_minus_z = T.scale(z, -1.0, 1.0)
    return T.add(T.mul(one_minus_z, h_carried), T.mul(z, cand))


def recurrent_layer(kind: str, features: T.Tensor, prev, assoc: np.ndarray | None,
                    params: dict[str, T.Tensor]):
    """Apply the recurrent layer over a full feature map.

    features is (1, d, H, W). prev is None (first frame / no carry), a
    RecurrentState of plain arrays (carry without gradient flow), or a
    pair of graph Tensors from the previous step of a BPTT window. assoc
    is the association map into the previous frame, or None for
    no-association everywhere.

    Returns (output Tensor, (hidden Tensor, weight Tensor or None)).
    """
    _, d, h, w = features.shape
    dtype = features.dtype

    if prev is None or assoc is None:
        zeros = T.Tensor(np.zeros((1, d, h, w), dtype=dtype))
        h_car, w_car = zeros, T.Tensor(np.zeros((1, d, h, w), dtype=dtype))
    elif isinstance(prev, RecurrentState):
        hc, wc = associate_state(prev, assoc, d, (h, w), dtype=dtype)
        h_car = T.Tensor(hc[None])
        w_car = T.Tensor(wc[None])
    else:
        prev_h, prev_w = prev
        h_car = T.gather_pixels(prev_h, assoc)
        w_car = (T.gather_pixels(prev_w, assoc) if prev_w is not None
                 else T.Tensor(np.zeros((1, d, h, w), dtype=dtype)))

    if kind == "wavg":
        h_new, w_new, out = cell_step(h_car, w_car, features, params)
        return out, (h_new, w_new)
    if kind == "gru":
        h_new = gru_step(h_car, features, params)
        return h_new, (h_new, None)
    raise ValueError(f"unknown recurrent kind {kind!r}")


def state_from_graph(hidden: T.Tensor, weight: T.Tensor | None,
                     frame_index: int) -> RecurrentState:
    """Detach graph tensors into a plain carried state (BPTT truncation)."""
    return RecurrentState(hidden.data[0].copy(),
                          weight.data[0].copy() if weight is not None else None,
                          frame_index)
