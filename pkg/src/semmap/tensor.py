"""Minimal reverse-mode autodiff over numpy arrays.

Exactly the operations the segmentation networks need: 2D convolution,
2x2 max pooling, transposed convolution (x2 / x8 upsampling), pointwise
nonlinearities and arithmetic, channel concatenation, pixel gather for
inter-frame state association, and a masked softmax cross-entropy loss.

Layout is NCHW, row-major. Training runs in float32; gradient checking
uses float64 inputs (the ops preserve the input dtype).
"""

from __future__ import annotations

import struct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import GraphStateError, LabelError, ShapeError


class Tensor:
    """Array node in the computation graph.

    Parameters (requires_grad=True leaves) accumulate gradients in .grad
    after backward(). Intermediate nodes carry a closure that routes the
    output gradient to their parents.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, parents=(), backward=None, name=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._backward = backward
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype)
        else:
            self.grad += g

    def __repr__(self):
        tag = self.name or "tensor"
        return f"Tensor({tag}, shape={self.data.shape}, dtype={self.data.dtype})"


def parameter(data, name=None) -> Tensor:
    return Tensor(np.asarray(data), requires_grad=True, name=name)


def backward(loss: Tensor):
    """Reverse pass from a scalar loss through the whole graph."""
    if loss.data.size != 1:
        raise ShapeError("backward expects a scalar loss")
    if loss._backward is None and not loss._parents:
        raise GraphStateError("loss has no recorded graph; run a forward pass first")
    order = []
    seen = set()
    stack = [(loss, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    loss.grad = np.ones_like(loss.data)
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)


# ---------------------------------------------------------------------------
# convolution primitives (shared by conv2d and deconv2d)

def _im2col(x, kh, kw, stride, padding):
    n, c, h, w = x.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    xp = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    # (N, C, Ho, Wo, kh, kw) -> (N, Ho*Wo, C*kh*kw)
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n, ho * wo, c * kh * kw)
    return np.ascontiguousarray(cols), ho, wo


def _col2im(gcols, x_shape, kh, kw, stride, padding, ho, wo):
    n, c, h, w = x_shape
    g = gcols.reshape(n, ho, wo, c, kh, kw)
    gxp = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=gcols.dtype)
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += \
                g[:, :, :, :, i, j].transpose(0, 3, 1, 2)
    if padding:
        return gxp[:, :, padding:-padding, padding:-padding]
    return gxp


def _conv_fwd(x, w, stride, padding):
    cout, cin, kh, kw = w.shape
    cols, ho, wo = _im2col(x, kh, kw, stride, padding)
    out = cols @ w.reshape(cout, -1).T
    return out.transpose(0, 2, 1).reshape(x.shape[0], cout, ho, wo), cols


def _conv_bwd_weight(cols, gout, w_shape):
    cout = w_shape[0]
    g = gout.reshape(gout.shape[0], cout, -1)            # (N, Cout, Ho*Wo)
    gw = np.einsum("ncp,npk->ck", g, cols)
    return gw.reshape(w_shape)


def _conv_bwd_data(gout, w, x_shape, stride, padding):
    cout, cin, kh, kw = w.shape
    n = gout.shape[0]
    ho, wo = gout.shape[2], gout.shape[3]
    g = gout.reshape(n, cout, ho * wo).transpose(0, 2, 1)  # (N, Ho*Wo, Cout)
    gcols = g @ w.reshape(cout, -1)
    return _col2im(gcols, x_shape, kh, kw, stride, padding, ho, wo)


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None, stride: int = 1,
           padding: int = 0) -> Tensor:
    """2D convolution; weight is (Cout, Cin, Kh, Kw), bias (Cout,) or None."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise ShapeError("conv2d expects NCHW input and 4D weight")
    if x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"input channels {x.shape[1]} != weight input channels {weight.shape[1]}")
    out, cols = _conv_fwd(x.data, weight.data, stride, padding)
    if bias is not None:
        out = out + bias.data.reshape(1, -1, 1, 1)
    parents = (x, weight) + ((bias,) if bias is not None else ())
    result = Tensor(out, parents=parents)

    def _bwd(g):
        if weight.requires_grad:
            weight._accumulate(_conv_bwd_weight(cols, g, weight.shape))
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if x.requires_grad:
            x._accumulate(_conv_bwd_data(g, weight.data, x.shape, stride, padding))

    result._backward = _bwd
    return result


def deconv2d(x: Tensor, weight: Tensor, factor: int) -> Tensor:
    """Transposed convolution upsampling by factor (2, 4, or 8).

    Kernel size is 2*factor, stride factor, so the output is exactly
    factor times the input resolution. weight layout is (Cin, Cout, K, K).
    """
    from .errors import ConfigError

    if factor not in (2, 4, 8):
        raise ConfigError(f"unsupported upsampling factor {factor}")
    k = 2 * factor
    pad = factor // 2
    if weight.shape[2] != k or weight.shape[3] != k:
        raise ShapeError(f"deconv weight must be {k}x{k} for factor {factor}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError("input channels do not match deconv weight")
    n, cin, h, w = x.shape
    cout = weight.shape[1]
    out_shape = (n, cout, factor * h, factor * w)
    # transposed conv forward == data-gradient of the corresponding conv
    out = _conv_bwd_data(x.data, weight.data, out_shape, factor, pad)
    result = Tensor(out, parents=(x, weight))

    def _bwd(g):
        if x.requires_grad:
            gx, _ = _conv_fwd(g, weight.data, factor, pad)
            x._accumulate(gx)
        if weight.requires_grad:
            cols, _, _ = _im2col(g, k, k, factor, pad)
            weight._accumulate(_conv_bwd_weight(cols, x.data, weight.shape))

    result._backward = _bwd
    return result


def bilinear_kernel(cin: int, cout: int, factor: int, dtype=np.float32) -> np.ndarray:
    """Bilinear-interpolation initialization for deconv2d weights."""
    k = 2 * factor
    center = factor - 0.5
    og = np.arange(k)
    f1d = 1.0 - np.abs(og - center) / factor
    f2d = np.outer(f1d, f1d)
    w = np.zeros((cin, cout, k, k), dtype=dtype)
    for c in range(min(cin, cout)):
        w[c, c] = f2d
    return w


def maxpool2x2(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """2x2 / stride-2 max pooling; ties go to the first element in row-major order.

    Returns (pooled, arg_indices) where arg_indices (N, C, H/2, W/2) holds
    the row-major within-window position of each winner, so the gradient
    is routed to exactly one element per window.
    """
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2x2 needs even spatial dims, got {h}x{w}")
    win = x.data.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5)
    flat = win.reshape(n, c, h // 2, w // 2, 4)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
    result = Tensor(out, parents=(x,))

    def _bwd(g):
        if x.requires_grad:
            gflat = np.zeros_like(flat)
            np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
            gx = gflat.reshape(n, c, h // 2, w // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5)
            x._accumulate(gx.reshape(n, c, h, w))

    result._backward = _bwd
    return result, arg


# ---------------------------------------------------------------------------
# pointwise ops

def relu(x: Tensor) -> Tensor:
    out = np.maximum(x.data, 0)
    result = Tensor(out, parents=(x,))

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(g * (x.data > 0))   # subgradient 0 at 0

    result._backward = _bwd
    return result


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d)))).astype(d.dtype)
    result = Tensor(out, parents=(x,))

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(g * out * (1.0 - out))

    result._backward = _bwd
    return result


def tanh(x: Tensor) -> Tensor:
    out = np.tanh(x.data)
    result = Tensor(out, parents=(x,))

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(g * (1.0 - out * out))

    result._backward = _bwd
    return result


def _check_same_shape(a, b, op):
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    result = Tensor(a.data + b.data, parents=(a, b))

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g)
        if b.requires_grad:
            b._accumulate(g)

    result._backward = _bwd
    return result


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    result = Tensor(a.data * b.data, parents=(a, b))

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g * b.data)
        if b.requires_grad:
            b._accumulate(g * a.data)

    result._backward = _bwd
    return result


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "div")
    if np.any(b.data == 0):
        raise ZeroDivisionError("div: denominator contains zero elements")
    out = a.data / b.data
    result = Tensor(out, parents=(a, b))

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g / b.data)
        if b.requires_grad:
            b._accumulate(-g * out / b.data)

    result._backward = _bwd
    return result


def scale(x: Tensor, a: float, b: float = 0.0) -> Tensor:
    """Affine pointwise map a*x + b with scalar constants."""
    result = Tensor(a * x.data + b, parents=(x,))

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(a * g)

    result._backward = _bwd
    return result


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError("concat_channels expects NCHW tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ShapeError(f"concat_channels: incompatible shapes {a.shape} vs {b.shape}")
    ca = a.shape[1]
    result = Tensor(np.concatenate([a.data, b.data], axis=1), parents=(a, b))

    def _bwd(g):
        if a.requires_grad:
            a._accumulate(g[:, :ca])
        if b.requires_grad:
            b._accumulate(g[:, ca:])

    result._backward = _bwd
    return result


def gather_pixels(x: Tensor, index: np.ndarray) -> Tensor:
    """Reorder pixels of x (1, C, H, W) by a flat index map (H, W).

    index[v, u] is a row-major pixel index into x's own H*W grid, or -1,
    which yields zeros. Used to carry recurrent state along inter-frame
    pixel associations; the backward pass scatter-adds.
    """
    from .errors import AssociationError

    n, c, h, w = x.shape
    if n != 1:
        raise ShapeError("gather_pixels supports batch size 1")
    idx = np.asarray(index)
    if idx.max(initial=-1) >= h * w:
        raise AssociationError("association index outside the previous frame")
    flat = x.data.reshape(c, h * w)
    idx_flat = idx.reshape(-1)
    valid = idx_flat >= 0
    out = np.zeros((c, idx.size), dtype=x.dtype)
    out[:, valid] = flat[:, idx_flat[valid]]
    result = Tensor(out.reshape(1, c, *idx.shape), parents=(x,))

    def _bwd(g):
        if x.requires_grad:
            gx = np.zeros_like(flat)
            gf = g.reshape(c, idx.size)
            np.add.at(gx.T, idx_flat[valid], gf[:, valid].T)
            x._accumulate(gx.reshape(x.shape))

    result._backward = _bwd
    return result


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          ignore_mask: np.ndarray | None = None,
                          class_weights: np.ndarray | None = None) -> Tensor:
    """Mean -log softmax(logits)[label] over unmasked pixels.

    labels is (N, H, W) int; ignore_mask (N, H, W) bool marks pixels to
    exclude (e.g. missing depth). class_weights, when given, is a (C,)
    array of per-class pixel weights; the loss becomes a weighted mean,
    which counters class imbalance in the label frequencies. Returns a
    scalar Tensor.
    """
    n, c, h, w = logits.shape
    labels = np.asarray(labels)
    if labels.shape != (n, h, w):
        raise ShapeError(f"labels shape {labels.shape} != {(n, h, w)}")
    if labels.min() < 0 or labels.max() >= c:
        raise LabelError(f"labels must lie in [0, {c})")
    keep = np.ones((n, h, w), dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask)
    if class_weights is None:
        pix_w = keep.astype(np.float64)
    else:
        class_weights = np.asarray(class_weights, dtype=np.float64)
        if class_weights.shape != (c,):
            raise ShapeError(f"class_weights shape {class_weights.shape} != {(c,)}")
        pix_w = class_weights[labels] * keep
    count = pix_w.sum()
    if count == 0:
        raise ShapeError("all pixels are masked out")
    z = logits.data
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - zmax - np.log(sez)
    picked = np.take_along_axis(logp, labels[:, None], axis=1)[:, 0]
    loss = -(picked * pix_w).sum() / count
    result = Tensor(np.asarray(loss, dtype=z.dtype), parents=(logits,))

    def _bwd(g):
        if logits.requires_grad:
            softmax = ez / sez
            onehot = np.zeros_like(z)
            np.put_along_axis(onehot, labels[:, None], 1.0, axis=1)
            grad = (softmax - onehot) * pix_w[:, None] / count
            logits._accumulate(g * grad)

    result._backward = _bwd
    return result


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Plain softmax over the channel axis of an NCHW array (no graph)."""
    zmax = logits.max(axis=1, keepdims=True)
    ez = np.exp(logits - zmax)
    return ez / ez.sum(axis=1, keepdims=True)


def tensor_sum(x: Tensor) -> Tensor:
    result = Tensor(np.asarray(x.data.sum(), dtype=x.dtype), parents=(x,))

    def _bwd(g):
        if x.requires_grad:
            x._accumulate(np.full(x.shape, g, dtype=x.dtype))

    result._backward = _bwd
    return result


# ---------------------------------------------------------------------------
# gradient checking

def grad_check(build_loss, params, eps=1e-5, n_samples=50, rng=None) -> float:
    """Max relative error between analytic and central-difference gradients.

    build_loss() must rebuild the graph from the current contents of each
    parameter in params and return the scalar loss Tensor. Parameters
    should be float64 for meaningful results.
    """
    rng = rng or np.random.default_rng(0)
    for p in params:
        p.zero_grad()
    loss = build_loss()
    backward(loss)
    analytic = [p.grad.copy() if p.grad is not None else np.zeros_like(p.data)
                for p in params]
    worst = 0.0
    for p, an in zip(params, analytic):
        flat = p.data.reshape(-1)
        k = min(n_samples, flat.size)
        coords = rng.choice(flat.size, size=k, replace=False)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + eps
            lp = float(build_loss().data)
            flat[i] = orig - eps
            lm = float(build_loss().data)
            flat[i] = orig
            num = (lp - lm) / (2 * eps)
            a = an.reshape(-1)[i]
            rel = abs(a - num) / max(1e-8, abs(a) + abs(num))
            worst = max(worst, rel)
    return worst


# ---------------------------------------------------------------------------
# checkpoint serialization

_MAGIC = b"SMCK"
_VERSION = 1


def save_checkpoint(path, params: dict[str, np.ndarray]):
    """Write a parameter checkpoint.

    Layout (all little-endian): magic b"SMCK", uint32 version,
    uint32 entry count; then per entry: uint16 name length, utf-8 name,
    uint8 ndim, ndim x uint32 dims, float32 row-major payload.
    """
    with open(path, "wb") as f:
        f.write(_MAGIC)
        f.write(struct.pack("<II", _VERSION, len(params)))
        for name in sorted(params):
            arr = np.ascontiguousarray(params[name], dtype="<f4")
            nb = name.encode("utf-8")
            f.write(struct.pack("<H", len(nb)))
            f.write(nb)
            f.write(struct.pack("<B", arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            f.write(arr.tobytes())


def load_checkpoint(path) -> dict[str, np.ndarray]:
    with open(path, "rb") as f:
        if f.read(4) != _MAGIC:
            raise IOError(f"{path}: not a checkpoint file")
        version, count = struct.unpack("<II", f.read(8))
        if version != _VERSION:
            raise IOError(f"{path}: unsupported checkpoint version {version}")
        out = {}
        for _ in range(count):
            (nlen,) = struct.unpack("<H", f.read(2))
            name = f.read(nlen).decode("utf-8")
            (ndim,) = struct.unpack("<B", f.read(1))
            dims = struct.unpack(f"<{ndim}I", f.read(4 * ndim))
            n_elem = int(np.prod(dims)) if ndim else 1
            buf = f.read(4 * n_elem)
            out[name] = np.frombuffer(buf, dtype="<f4").reshape(dims).copy()
    return out
