"""Dense float64 layer math with hand-written backward passes.

All 4-D activations use the (batch, height, width, channels) layout.  Each
layer comes as a ``*_forward`` / ``*_backward`` pair working on plain numpy
arrays plus a thin :class:`Layer` wrapper that owns parameters and gradient
buffers for use inside a network.
"""
from __future__ import annotations

import copy
import struct
from typing import BinaryIO

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

DTYPE = np.float64

BN_EPS = 1e-5
BN_MOMENTUM = 0.9

CHECKPOINT_MAGIC = b"FPW1"


class ShapeError(ValueError):
    """Raised when tensor shapes are incompatible with a layer."""


def as_tensor(x) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=DTYPE)


# ---------------------------------------------------------------------------
# convolution


def same_padding(size: int, kernel: int, stride: int) -> tuple[int, int]:
    """Zero padding (before, after) that gives ``ceil(size / stride)`` outputs.

    Odd totals put the extra element after (bottom/right).
    """
    out = -(-size // stride)
    total = max((out - 1) * stride + kernel - size, 0)
    return total // 2, total - total // 2


def conv2d_forward(x, w, b, stride=1, padding="same"):
    """2-D cross-correlation.

    Args:
        x: input of shape (N, H, W, C_in)
        w: kernel of shape (kh, kw, C_in, C_out)
        b: bias of shape (C_out,)
        stride: step between windows along both spatial axes
        padding: "same" or "valid"

    Returns:
        (out, cache) with out of shape (N, H_out, W_out, C_out)
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d expects a 4-D input, got shape {x.shape}")
    n, h, wd, c = x.shape
    kh, kw, ci, co = w.shape
    if ci != c:
        raise ShapeError(
            f"conv2d kernel expects {ci} input channels but input has {c}")
    if b.shape != (co,):
        raise ShapeError(f"conv2d bias shape {b.shape} != ({co},)")
    if padding == "same":
        pt, pb = same_padding(h, kh, stride)
        pl, pr = same_padding(wd, kw, stride)
    elif padding == "valid":
        pt = pb = pl = pr = 0
    else:
        raise ValueError(f"unknown padding {padding!r}")
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr), (0, 0)))
    hp, wp = xp.shape[1:3]
    if hp < kh or wp < kw:
        raise ShapeError(f"kernel {kh}x{kw} larger than padded input {hp}x{wp}")
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))[:, ::stride, ::stride]
    win = win[:, :ho, :wo]
    # (N, Ho, Wo, C, kh, kw) -> rows ordered (kh, kw, C) to match the kernel
    cols = win.transpose(0, 1, 2, 4, 5, 3).reshape(n * ho * wo, kh * kw * c)
    out = cols @ w.reshape(kh * kw * ci, co) + b
    cache = (x.shape, xp.shape, (pt, pl), stride, cols, w)
    return out.reshape(n, ho, wo, co), cache


def conv2d_backward(dout, cache):
    """Returns (dx, dw, db) for :func:`conv2d_forward`."""
    x_shape, xp_shape, (pt, pl), stride, cols, w = cache
    n, h, wd, c = x_shape
    kh, kw, ci, co = w.shape
    ho, wo = dout.shape[1:3]
    d2 = dout.reshape(-1, co)
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(axis=0)
    dcols = (d2 @ w.reshape(-1, co).T).reshape(n, ho, wo, kh, kw, c)
    dxp = np.zeros(xp_shape, dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            dxp[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += dcols[:, :, :, i, j, :]
    dx = dxp[:, pt:pt + h, pl:pl + wd, :]
    return dx, dw, db


def conv2d_transpose_forward(x, w, b, stride=2):
    """Transposed convolution (the adjoint of a "valid" strided conv2d).

    Output extent is ``(H - 1) * stride + kh``, so a 2x2 kernel with stride 2
    exactly doubles H and W.

    Args:
        x: input of shape (N, H, W, C_in)
        w: kernel of shape (kh, kw, C_in, C_out)
        b: bias of shape (C_out,)
    """
    if x.ndim != 4:
        raise ShapeError(f"conv2d_transpose expects a 4-D input, got shape {x.shape}")
    n, h, wd, c = x.shape
    kh, kw, ci, co = w.shape
    if ci != c:
        raise ShapeError(
            f"conv2d_transpose kernel expects {ci} input channels but input has {c}")
    if b.shape != (co,):
        raise ShapeError(f"conv2d_transpose bias shape {b.shape} != ({co},)")
    ho = (h - 1) * stride + kh
    wo = (wd - 1) * stride + kw
    x2 = x.reshape(-1, c)
    contrib = (x2 @ w.transpose(2, 0, 1, 3).reshape(ci, kh * kw * co))
    contrib = contrib.reshape(n, h, wd, kh, kw, co)
    out = np.zeros((n, ho, wo, co), dtype=DTYPE)
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * h:stride, j:j + stride * wd:stride, :] += contrib[:, :, :, i, j, :]
    out += b
    return out, (x, w, stride)


def conv2d_transpose_backward(dout, cache):
    x, w, stride = cache
    n, h, wd, c = x.shape
    kh, kw, ci, co = w.shape
    x2 = x.reshape(-1, c)
    dx = np.zeros((n * h * wd, c), dtype=DTYPE)
    dw = np.empty_like(w)
    for i in range(kh):
        for j in range(kw):
            d = dout[:, i:i + stride * h:stride, j:j + stride * wd:stride, :].reshape(-1, co)
            dx += d @ w[i, j].T
            dw[i, j] = x2.T @ d
    db = dout.reshape(-1, co).sum(axis=0)
    return dx.reshape(x.shape), dw, db


# ---------------------------------------------------------------------------
# pooling and pointwise


def maxpool2_forward(x):
    """2x2 max pooling with stride 2; ties go to the first window element
    in row-major order."""
    n, h, w, c = x.shape
    if h % 2 or w % 2:
        raise ShapeError(f"maxpool2 needs even height and width, got {h}x{w}")
    win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
    win = win.reshape(n, h // 2, w // 2, c, 4)
    arg = win.argmax(axis=-1)
    out = np.take_along_axis(win, arg[..., None], axis=-1)[..., 0]
    return out, (x.shape, arg)


def maxpool2_backward(dout, cache):
    shape, arg = cache
    n, h, w, c = shape
    onehot = (arg[..., None] == np.arange(4)) * dout[..., None]
    dx = onehot.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
    return dx.reshape(shape)


def relu_forward(x):
    return np.maximum(x, 0.0), x


def relu_backward(dout, x):
    return dout * (x > 0)


def sigmoid(x):
    out = np.empty_like(x, dtype=DTYPE)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_forward(x):
    out = sigmoid(x)
    return out, out


def sigmoid_backward(dout, out):
    return dout * out * (1.0 - out)


def batchnorm_forward(x, gamma, beta, running_mean, running_var, training,
                      momentum=BN_MOMENTUM, eps=BN_EPS):
    """Per-channel batch normalization over every axis but the last.

    In training mode the running statistics are updated in place.
    """
    axes = tuple(range(x.ndim - 1))
    if training:
        mu = x.mean(axis=axes)
        var = x.var(axis=axes)
        running_mean *= momentum
        running_mean += (1.0 - momentum) * mu
        running_var *= momentum
        running_var += (1.0 - momentum) * var
    else:
        mu, var = running_mean, running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x - mu) * inv_std
    out = gamma * xhat + beta
    return out, (xhat, inv_std, gamma, training)


def batchnorm_backward(dout, cache):
    xhat, inv_std, gamma, training = cache
    axes = tuple(range(dout.ndim - 1))
    dgamma = (dout * xhat).sum(axis=axes)
    dbeta = dout.sum(axis=axes)
    dxhat = dout * gamma
    if not training:
        return dxhat * inv_std, dgamma, dbeta
    m = dout.size // dout.shape[-1]
    dx = (inv_std / m) * (m * dxhat - dxhat.sum(axis=axes)
                          - xhat * (dxhat * xhat).sum(axis=axes))
    return dx, dgamma, dbeta


def dropout_forward(x, p, seed, training):
    """Inverted dropout: survivors are scaled by 1/(1-p); identity at inference."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    if not training or p == 0.0:
        return x.copy(), None
    rng = np.random.default_rng(seed)
    keep = (rng.random(x.shape) >= p) / (1.0 - p)
    return x * keep, keep


def dropout_backward(dout, keep):
    return dout.copy() if keep is None else dout * keep


def dense_forward(x, w, b):
    if x.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense expects (N, {w.shape[0]}) input, got {x.shape}")
    return x @ w + b, (x, w)


def dense_backward(dout, cache):
    x, w = cache
    return dout @ w.T, x.T @ dout, dout.sum(axis=0)


def flatten(x):
    return x.reshape(x.shape[0], -1)


def concat_channels(a, b):
    if a.shape[:-1] != b.shape[:-1]:
        raise ShapeError(f"cannot concat {a.shape} with {b.shape} on channels")
    return np.concatenate([a, b], axis=-1)


# ---------------------------------------------------------------------------
# layer objects


class Layer:
    """Base layer.  ``params`` and ``grads`` share keys and shapes.

    ``state`` holds non-trainable buffers (batchnorm running statistics).
    """

    n_inputs = 1

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self.state: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, *inputs, training=False):
        raise NotImplementedError

    def backward(self, dout):
        """Returns a tuple with one gradient per input and fills ``grads``."""
        raise NotImplementedError

    def kinks(self, *inputs, tol=1e-4):
        """Boolean masks over the inputs flagging non-differentiable points."""
        return None

    def zero_grads(self):
        for k, v in self.params.items():
            self.grads[k] = np.zeros_like(v)


class Conv2D(Layer):
    def __init__(self, kernel, bias, stride=1, padding="same"):
        super().__init__()
        self.params = {"kernel": as_tensor(kernel), "bias": as_tensor(bias)}
        self.stride = stride
        self.padding = padding
        self.zero_grads()

    def forward(self, x, training=False):
        out, self._cache = conv2d_forward(x, self.params["kernel"], self.params["bias"],
                                          self.stride, self.padding)
        return out

    def backward(self, dout):
        dx, self.grads["kernel"], self.grads["bias"] = conv2d_backward(dout, self._cache)
        return (dx,)


class Conv2DTranspose(Layer):
    def __init__(self, kernel, bias, stride=2):
        super().__init__()
        self.params = {"kernel": as_tensor(kernel), "bias": as_tensor(bias)}
        self.stride = stride
        self.zero_grads()

    def forward(self, x, training=False):
        out, self._cache = conv2d_transpose_forward(
            x, self.params["kernel"], self.params["bias"], self.stride)
        return out

    def backward(self, dout):
        dx, self.grads["kernel"], self.grads["bias"] = conv2d_transpose_backward(dout, self._cache)
        return (dx,)


class MaxPool2(Layer):
    def forward(self, x, training=False):
        out, self._cache = maxpool2_forward(x)
        return out

    def backward(self, dout):
        return (maxpool2_backward(dout, self._cache),)

    def kinks(self, x, tol=1e-4):
        # a window whose top two values are within tol has no stable argmax
        n, h, w, c = x.shape
        win = x.reshape(n, h // 2, 2, w // 2, 2, c).transpose(0, 1, 3, 5, 2, 4)
        win = np.sort(win.reshape(n, h // 2, w // 2, c, 4), axis=-1)
        tied = (win[..., 3] - win[..., 2]) < tol
        mask = np.broadcast_to(tied[..., None], tied.shape + (4,))
        mask = mask.reshape(n, h // 2, w // 2, c, 2, 2).transpose(0, 1, 4, 2, 5, 3)
        return [mask.reshape(x.shape)]


class ReLU(Layer):
    def forward(self, x, training=False):
        out, self._cache = relu_forward(x)
        return out

    def backward(self, dout):
        return (relu_backward(dout, self._cache),)

    def kinks(self, x, tol=1e-4):
        return [np.abs(x) < tol]


class Sigmoid(Layer):
    def forward(self, x, training=False):
        out, self._cache = sigmoid_forward(x)
        return out

    def backward(self, dout):
        return (sigmoid_backward(dout, self._cache),)


class BatchNorm(Layer):
    def __init__(self, channels, momentum=BN_MOMENTUM, eps=BN_EPS):
        super().__init__()
        if eps <= 0:
            raise ValueError("batchnorm epsilon must be positive")
        self.params = {"gamma": np.ones(channels, DTYPE), "beta": np.zeros(channels, DTYPE)}
        self.state = {"running_mean": np.zeros(channels, DTYPE),
                      "running_var": np.ones(channels, DTYPE)}
        self.momentum = momentum
        self.eps = eps
        self.zero_grads()

    def forward(self, x, training=False):
        out, self._cache = batchnorm_forward(
            x, self.params["gamma"], self.params["beta"],
            self.state["running_mean"], self.state["running_var"],
            training, self.momentum, self.eps)
        return out

    def backward(self, dout):
        dx, self.grads["gamma"], self.grads["beta"] = batchnorm_backward(dout, self._cache)
        return (dx,)


class Dropout(Layer):
    """Dropout whose mask for the k-th training call is drawn from
    ``default_rng([seed, k])``, so runs replay exactly."""

    def __init__(self, p, seed=0):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout probability must be in [0, 1), got {p}")
        self.p = p
        self.seed = seed
        self.calls = 0

    def forward(self, x, training=False):
        seed = [*np.atleast_1d(self.seed).tolist(), self.calls]
        if training:
            self.calls += 1
        out, self._cache = dropout_forward(x, self.p, seed, training)
        return out

    def backward(self, dout):
        return (dropout_backward(dout, self._cache),)


class Dense(Layer):
    def __init__(self, weights, bias):
        super().__init__()
        self.params = {"kernel": as_tensor(weights), "bias": as_tensor(bias)}
        self.zero_grads()

    def forward(self, x, training=False):
        out, self._cache = dense_forward(x, self.params["kernel"], self.params["bias"])
        return out

    def backward(self, dout):
        dx, self.grads["kernel"], self.grads["bias"] = dense_backward(dout, self._cache)
        return (dx,)


class Flatten(Layer):
    def forward(self, x, training=False):
        self._cache = x.shape
        return flatten(x)

    def backward(self, dout):
        return (dout.reshape(self._cache),)


class Concat(Layer):
    n_inputs = 2

    def forward(self, a, b, training=False):
        self._cache = a.shape[-1]
        return concat_channels(a, b)

    def backward(self, dout):
        c = self._cache
        return dout[..., :c], dout[..., c:]


# ---------------------------------------------------------------------------
# finite-difference verification


def _rel_error(analytic, numeric, skip=None):
    a = np.asarray(analytic, dtype=DTYPE)
    n = np.asarray(numeric, dtype=DTYPE)
    if skip is not None:
        a = np.where(skip, 0.0, a)
        n = np.where(skip, 0.0, n)
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0.0:
        return 0.0
    return float(np.abs(a - n).max() / scale)


def grad_check(layer: Layer, inputs, epsilon=1e-6, seed=0, training=True):
    """Compare a layer's backward pass against central differences.

    The scalar probe is ``sum(g * layer(inputs))`` for a fixed random ``g``.
    Every evaluation runs on a fresh copy of the layer so dropout masks and
    batchnorm running statistics are the same for all probes.  Input entries
    flagged by ``layer.kinks`` (relu at 0, tied max-pool windows) are left
    out of the comparison.

    Returns the worst relative error, measured per tensor as
    ``max|analytic - numeric| / max(|analytic|, |numeric|)``.
    """
    if isinstance(inputs, np.ndarray):
        inputs = (inputs,)
    inputs = [as_tensor(x) for x in inputs]
    rng = np.random.default_rng(seed)
    pristine = copy.deepcopy(layer)

    def run(layer_copy, xs):
        return layer_copy.forward(*xs, training=training)

    probe_layer = copy.deepcopy(pristine)
    g = rng.standard_normal(run(probe_layer, inputs).shape)

    def objective(xs, params=None):
        lc = copy.deepcopy(pristine)
        if params is not None:
            lc.params = params
        return float(np.sum(g * run(lc, xs)))

    work = copy.deepcopy(pristine)
    run(work, inputs)
    dxs = work.backward(g)
    kinks = pristine.kinks(*inputs) or [None] * len(inputs)

    worst = 0.0
    for idx, x in enumerate(inputs):
        num = np.zeros_like(x)
        skip = kinks[idx]
        for pos in np.ndindex(x.shape):
            if skip is not None and skip[pos]:
                continue
            xs_p = [v.copy() for v in inputs]
            xs_m = [v.copy() for v in inputs]
            xs_p[idx][pos] += epsilon
            xs_m[idx][pos] -= epsilon
            num[pos] = (objective(xs_p) - objective(xs_m)) / (2 * epsilon)
        worst = max(worst, _rel_error(dxs[idx], num, skip))

    for name, p in pristine.params.items():
        num = np.zeros_like(p)
        for pos in np.ndindex(p.shape):
            plus = {k: v.copy() for k, v in pristine.params.items()}
            minus = {k: v.copy() for k, v in pristine.params.items()}
            plus[name][pos] += epsilon
            minus[name][pos] -= epsilon
            num[pos] = (objective(inputs, plus) - objective(inputs, minus)) / (2 * epsilon)
        worst = max(worst, _rel_error(work.grads[name], num))
    return worst


# ---------------------------------------------------------------------------
# checkpoint files


def write_checkpoint(params: dict[str, np.ndarray], f: BinaryIO) -> None:
    """Write named float64 tensors: name (u8 length + ASCII), u8 rank,
    u32 extents, little-endian float64 payload."""
    f.write(CHECKPOINT_MAGIC)
    for name, value in params.items():
        raw = name.encode("ascii")
        if len(raw) > 255:
            raise ValueError(f"parameter name too long: {name!r}")
        arr = np.ascontiguousarray(value, dtype="<f8")
        f.write(struct.pack("<B", len(raw)) + raw)
        f.write(struct.pack("<B", arr.ndim))
        f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        f.write(arr.tobytes())


def read_checkpoint(f: BinaryIO) -> dict[str, np.ndarray]:
    if f.read(4) != CHECKPOINT_MAGIC:
        raise ValueError("bad checkpoint magic")
    out: dict[str, np.ndarray] = {}

    def take(n):
        buf = f.read(n)
        if len(buf) != n:
            raise ValueError(f"truncated checkpoint: wanted {n} bytes, got {len(buf)}")
        return buf

    while True:
        head = f.read(1)
        if not head:
            return out
        name = take(head[0]).decode("ascii")
        rank = take(1)[0]
        shape = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        out[name] = arr.astype(DTYPE)
