"""Dense float64 tensors plus the forward/backward kernels networks are built from.

Every kernel runs in float64 and is bitwise deterministic for identical
inputs. Backward kernels accumulate (+=) into the ``grad`` buffers of the
tensors they touch -- callers zero those buffers between optimization steps --
and also return the freshly computed input gradient so each kernel can be
tested in isolation.
"""

from __future__ import annotations

import numpy as np

from .errors import DimensionError, GeometryError, LabelError, NumericsError


class Tensor:
    """A dense float64 array paired with a same-shape gradient buffer.

    The gradient buffer is materialized (as zeros) on first access, so
    forward-only evaluation never pays for it.
    """

    __slots__ = ("data", "_grad")

    def __init__(self, data):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self._grad = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.data)
        return self._grad

    @grad.setter
    def grad(self, value):
        self._grad = value

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def zero_grad(self):
        self._grad = None

    def __repr__(self):
        return f"Tensor(shape={tuple(self.data.shape)})"


class LayerParams:
    """Weight and bias tensors with matching momentum velocity buffers."""

    __slots__ = ("weights", "bias", "w_vel", "b_vel")

    def __init__(self, weights, bias):
        self.weights = weights if isinstance(weights, Tensor) else Tensor(weights)
        self.bias = bias if isinstance(bias, Tensor) else Tensor(bias)
        self.w_vel = np.zeros_like(self.weights.data)
        self.b_vel = np.zeros_like(self.bias.data)

    @classmethod
    def gaussian(cls, w_shape, b_shape, std, rng):
        """Zero-mean Gaussian weights with the given std; zero biases."""
        return cls(rng.standard_normal(w_shape) * std, np.zeros(b_shape))

    def num_params(self) -> int:
        return self.weights.size + self.bias.size

    def zero_grad(self):
        self.weights.zero_grad()
        self.bias.zero_grad()

    def copy(self) -> "LayerParams":
        dup = LayerParams(self.weights.data.copy(), self.bias.data.copy())
        dup.w_vel = self.w_vel.copy()
        dup.b_vel = self.b_vel.copy()
        return dup


def _ensure_finite(name, *arrays):
    # a NaN/Inf anywhere makes the sum non-finite; one reduction per array is
    # far cheaper than an elementwise isfinite scan on the training hot path
    for a in arrays:
        if not np.isfinite(np.sum(a)):
            raise NumericsError(f"{name} produced non-finite values")


# ---------------------------------------------------------------------------
# convolution (cross-correlation, no kernel flip)


class ConvCtx:
    __slots__ = ("x", "params", "stride", "pad", "cols", "out_hw")

    def __init__(self, x, params, stride, pad, cols, out_hw):
        self.x = x
        self.params = params
        self.stride = stride
        self.pad = pad
        self.cols = cols
        self.out_hw = out_hw


def _im2col(xp, kh, kw, stride):
    """Patch tensor (N, C*kh*kw, Ho*Wo); the conv is then one batched matmul.

    Both the slice copies here and the scatter-adds in _col2im move contiguous
    (Ho, Wo) blocks, which keeps the plumbing around the BLAS calls cheap.
    """
    n, c, hp, wp = xp.shape
    ho = (hp - kh) // stride + 1
    wo = (wp - kw) // stride + 1
    cols = np.empty((n, c, kh, kw, ho, wo), dtype=np.float64)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _col2im(dcols, x_shape, kh, kw, stride, pad, out_hw):
    """Scatter-add patch gradients (N, C*kh*kw, Ho*Wo) onto the input grid."""
    n, c, h, w = x_shape
    ho, wo = out_hw
    hp, wp = h + 2 * pad, w + 2 * pad
    dxp = np.zeros((n, c, hp, wp), dtype=np.float64)
    dc = dcols.reshape(n, c, kh, kw, ho, wo)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += dc[:, :, i, j]
    if pad:
        return dxp[:, :, pad : pad + h, pad : pad + w]
    return dxp


def conv2d_forward(x: Tensor, params: LayerParams, stride: int = 1, pad: int = 0):
    """2D cross-correlation with bias over an NCHW batch.

    Returns (output tensor, context for the backward pass).
    """
    if x.data.ndim != 4:
        raise DimensionError(f"conv2d expects NCHW input, got shape {x.shape}")
    w = params.weights.data
    if w.ndim != 4:
        raise DimensionError(f"conv2d weights must be (K, C, kh, kw), got {w.shape}")
    n, c, h, wd = x.data.shape
    k, cw, kh, kw = w.shape
    if c != cw:
        raise DimensionError(f"input has {c} channels, weights expect {cw}")
    if params.bias.data.shape != (k,):
        raise DimensionError(f"bias shape {params.bias.shape} does not match {k} filters")
    if (h + 2 * pad - kh) % stride or (wd + 2 * pad - kw) % stride:
        raise GeometryError(
            f"non-integer conv output for input {h}x{wd}, kernel {kh}x{kw}, "
            f"pad {pad}, stride {stride}"
        )
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    if ho <= 0 or wo <= 0:
        raise GeometryError(f"conv output {ho}x{wo} is not positive")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    cols = _im2col(xp, kh, kw, stride)
    out = np.matmul(w.reshape(k, -1), cols)  # (N, K, Ho*Wo)
    out += params.bias.data[:, None]
    t = Tensor(out.reshape(n, k, ho, wo))
    _ensure_finite("conv2d_forward", t.data)
    return t, ConvCtx(x, params, stride, pad, cols, (ho, wo))


def conv2d_backward(ctx: ConvCtx, grad_out: np.ndarray) -> np.ndarray:
    """Accumulate conv gradients into input/weight/bias buffers; return d(input)."""
    w = ctx.params.weights.data
    k = w.shape[0]
    n = ctx.x.data.shape[0]
    ho, wo = ctx.out_hw
    if grad_out.shape != (n, k, ho, wo):
        raise DimensionError(f"grad_out shape {grad_out.shape} != forward output {(n, k, ho, wo)}")
    g3 = np.ascontiguousarray(grad_out, dtype=np.float64).reshape(n, k, ho * wo)
    dw = np.matmul(g3, ctx.cols.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    db = g3.sum(axis=(0, 2))
    dcols = np.matmul(w.reshape(k, -1).T, g3)  # (N, C*kh*kw, Ho*Wo)
    dx = _col2im(dcols, ctx.x.data.shape, w.shape[2], w.shape[3], ctx.stride, ctx.pad, ctx.out_hw)
    _ensure_finite("conv2d_backward", dx, dw, db)
    ctx.params.weights.grad += dw
    ctx.params.bias.grad += db
    ctx.x.grad += dx
    return dx


# ---------------------------------------------------------------------------
# ReLU


class ReluCtx:
    __slots__ = ("x",)

    def __init__(self, x):
        self.x = x


def relu_forward(x: Tensor):
    t = Tensor(np.maximum(x.data, 0.0))
    _ensure_finite("relu_forward", t.data)
    return t, ReluCtx(x)


def relu_backward(ctx: ReluCtx, grad_out: np.ndarray) -> np.ndarray:
    """Pass gradient where input > 0; subgradient at exactly 0 is 0."""
    if grad_out.shape != ctx.x.data.shape:
        raise DimensionError(f"grad_out shape {grad_out.shape} != input {ctx.x.data.shape}")
    dx = grad_out * (ctx.x.data > 0.0)
    _ensure_finite("relu_backward", dx)
    ctx.x.grad += dx
    return dx


# ---------------------------------------------------------------------------
# 2x2 max pooling, stride 2


class PoolCtx:
    __slots__ = ("x", "indices")

    def __init__(self, x, indices):
        self.x = x
        self.indices = indices


def maxpool2_forward(x: Tensor):
    """2x2/stride-2 max pool; ties go to the first index in row-major window order."""
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2 expects NCHW input, got shape {x.shape}")
    n, c, h, w = x.data.shape
    if h % 2 or w % 2:
        raise GeometryError(f"maxpool2 needs even spatial dims, got {h}x{w}")
    win = (
        x.data.reshape(n, c, h // 2, 2, w // 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h // 2, w // 2, 4)
    )
    idx = win.argmax(axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]
    t = Tensor(out)
    _ensure_finite("maxpool2_forward", t.data)
    return t, PoolCtx(x, idx)


def maxpool2_backward(ctx: PoolCtx, grad_out: np.ndarray) -> np.ndarray:
    n, c, h, w = ctx.x.data.shape
    if grad_out.shape != (n, c, h // 2, w // 2):
        raise DimensionError(
            f"grad_out shape {grad_out.shape} != pooled output {(n, c, h // 2, w // 2)}"
        )
    scatter = np.zeros((n, c, h // 2, w // 2, 4), dtype=np.float64)
    np.put_along_axis(scatter, ctx.indices[..., None], grad_out[..., None], axis=-1)
    dx = (
        scatter.reshape(n, c, h // 2, w // 2, 2, 2)
        .transpose(0, 1, 2, 4, 3, 5)
        .reshape(n, c, h, w)
    )
    _ensure_finite("maxpool2_backward", dx)
    ctx.x.grad += dx
    return dx


# ---------------------------------------------------------------------------
# fully connected


class FcCtx:
    __slots__ = ("x", "params")

    def __init__(self, x, params):
        self.x = x
        self.params = params


def fc_forward(x: Tensor, params: LayerParams):
    """y = W x + b applied row-wise to a (N, in) batch; W is (out, in)."""
    if x.data.ndim != 2:
        raise DimensionError(f"fc expects a flattened (N, in) batch, got shape {x.shape}")
    w = params.weights.data
    if w.ndim != 2 or x.data.shape[1] != w.shape[1]:
        raise DimensionError(f"fc input width {x.data.shape[1]} does not match weights {w.shape}")
    if params.bias.data.shape != (w.shape[0],):
        raise DimensionError(f"fc bias shape {params.bias.shape} does not match {w.shape[0]} outputs")
    t = Tensor(x.data @ w.T + params.bias.data)
    _ensure_finite("fc_forward", t.data)
    return t, FcCtx(x, params)


def fc_backward(ctx: FcCtx, grad_out: np.ndarray) -> np.ndarray:
    w = ctx.params.weights.data
    n = ctx.x.data.shape[0]
    if grad_out.shape != (n, w.shape[0]):
        raise DimensionError(f"grad_out shape {grad_out.shape} != output {(n, w.shape[0])}")
    dw = grad_out.T @ ctx.x.data
    db = grad_out.sum(axis=0)
    dx = grad_out @ w
    _ensure_finite("fc_backward", dx, dw, db)
    ctx.params.weights.grad += dw
    ctx.params.bias.grad += db
    ctx.x.grad += dx
    return dx


# ---------------------------------------------------------------------------
# softmax log-loss


def softmax_logloss(logits: Tensor, labels):
    """Summed softmax log-loss over a batch of (N, C) logits.

    loss = -sum_i (x[i, c_i] - log sum_j exp(x[i, j])), computed with row-max
    subtraction; grad rows are softmax(x_i) - onehot(c_i). The loss is a batch
    sum, not a mean. Returns (loss, grad array).
    """
    x = logits.data
    if x.ndim != 2 or x.shape[1] < 2:
        raise DimensionError(f"softmax_logloss expects (N, C>=2) logits, got shape {x.shape}")
    n, c = x.shape
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (n,):
        raise DimensionError(f"labels shape {lab.shape} does not match batch of {n}")
    if lab.min(initial=0) < 0 or lab.max(initial=0) >= c:
        raise LabelError(f"labels must lie in [0, {c}), got range [{lab.min()}, {lab.max()}]")
    m = x.max(axis=1, keepdims=True)
    e = np.exp(x - m)
    s = e.sum(axis=1, keepdims=True)
    logsumexp = m[:, 0] + np.log(s[:, 0])
    loss = float(np.sum(logsumexp - x[np.arange(n), lab]))
    grad = e / s
    grad[np.arange(n), lab] -= 1.0
    _ensure_finite("softmax_logloss", grad)
    if not np.isfinite(loss):
        raise NumericsError("softmax_logloss produced non-finite loss")
    return loss, grad


# ---------------------------------------------------------------------------
# finite-difference oracle


def grad_check(fn, arrays, eps: float = 1e-5) -> float:
    """Central-difference check of a scalar-valued function.

    ``fn(arrays) -> (loss, grads)`` must be pure given the array contents and
    return one analytic gradient array per input array. Every element of every
    array is perturbed by +/- eps; the result is the max over elements of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    _, grads = fn(arrays)
    if len(grads) != len(arrays):
        raise DimensionError(f"fn returned {len(grads)} gradients for {len(arrays)} arrays")
    worst = 0.0
    for a, g in zip(arrays, grads):
        flat = a.reshape(-1)
        gflat = np.asarray(g).reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            lp, _ = fn(arrays)
            flat[i] = orig - eps
            lm, _ = fn(arrays)
            flat[i] = orig
            numeric = (lp - lm) / (2.0 * eps)
            analytic = gflat[i]
            denom = max(abs(analytic), abs(numeric), 1e-8)
            err = abs(analytic - numeric) / denom
            if err > worst:
                worst = err
    return worst
