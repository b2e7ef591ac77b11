"""Minimal differentiable kernel for 1D convolutional regression networks.

Tensors are plain C-contiguous float64 numpy arrays. Every layer comes as a
pair of pure functions (forward / backward, single sample, matching the shapes
documented on each function) plus a batch-first layer class used to assemble
networks. Analytic gradients are verifiable against central finite differences
via :func:`grad_check`.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are inconsistent."""


class LengthError(ValueError):
    """A sequence is too short for the requested operation."""


class ParameterError(ValueError):
    """An operation parameter is outside its valid range."""


class NumericError(RuntimeError):
    """A non-finite value appeared where finite numbers are required."""


def tensor(data) -> np.ndarray:
    """Coerce to a C-contiguous float64 array."""
    return np.ascontiguousarray(data, dtype=np.float64)


@dataclass
class LayerGrads:
    """Gradients of one layer: per-parameter plus the input gradient."""

    d_weights: np.ndarray | None
    d_bias: np.ndarray | None
    d_input: np.ndarray


# ---------------------------------------------------------------------------
# conv1d: "same" zero padding, stride 1
# ---------------------------------------------------------------------------

def _conv_patches(x: np.ndarray, k: int) -> np.ndarray:
    """im2col for a batch: (B, C, L) -> (C*k, B*L) patch matrix."""
    b, c, n = x.shape
    p = (k - 1) // 2
    xp = np.zeros((b, c, n + 2 * p), dtype=np.float64)
    xp[:, :, p:p + n] = x
    # windows: (B, C, L, k) view, no copy
    win = np.lib.stride_tricks.sliding_window_view(xp, k, axis=2)
    # -> (C, k, B, L) -> (C*k, B*L)
    return np.ascontiguousarray(win.transpose(1, 3, 0, 2)).reshape(c * k, b * n)


def _check_conv_args(x, weights, bias):
    if weights.ndim != 3:
        raise ShapeError(f"weights must be C_out x C_in x k, got shape {weights.shape}")
    c_out, c_in, k = weights.shape
    if k % 2 == 0:
        raise ParameterError(f"kernel size must be odd, got {k}")
    if x.shape[-2] != c_in:
        raise ShapeError(
            f"input has {x.shape[-2]} channels but weights expect {c_in}")
    if x.shape[-1] < k:
        raise LengthError(f"input length {x.shape[-1]} < kernel size {k}")
    if bias is not None and bias.shape != (c_out,):
        raise ShapeError(f"bias shape {bias.shape} != ({c_out},)")


def conv1d_forward_batch(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """(B, C_in, L) -> (B, C_out, L) cross-correlation with same padding."""
    _check_conv_args(x, weights, bias)
    b, _, n = x.shape
    c_out, c_in, k = weights.shape
    patches = _conv_patches(x, k)
    out = weights.reshape(c_out, c_in * k) @ patches  # (C_out, B*L)
    out += bias[:, None]
    return np.ascontiguousarray(out.reshape(c_out, b, n).transpose(1, 0, 2))


def conv1d_backward_batch(x, weights, upstream):
    """Gradients for :func:`conv1d_forward_batch`; upstream is (B, C_out, L)."""
    b, c_in, n = x.shape
    c_out, _, k = weights.shape
    if upstream.shape != (b, c_out, n):
        raise ShapeError(
            f"upstream shape {upstream.shape} != forward output {(b, c_out, n)}")
    p = (k - 1) // 2
    g = np.ascontiguousarray(upstream.transpose(1, 0, 2)).reshape(c_out, b * n)
    patches = _conv_patches(x, k)
    d_w = (g @ patches.T).reshape(c_out, c_in, k)
    d_b = upstream.sum(axis=(0, 2))
    # scatter W^T g back onto the padded input
    d_patches = (weights.reshape(c_out, c_in * k).T @ g).reshape(c_in, k, b, n)
    d_xp = np.zeros((b, c_in, n + 2 * p), dtype=np.float64)
    for j in range(k):
        d_xp[:, :, j:j + n] += d_patches[:, j].transpose(1, 0, 2)
    return d_w, d_b, np.ascontiguousarray(d_xp[:, :, p:p + n])


def conv1d_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """Single-sample convolution: (C_in, L) -> (C_out, L)."""
    if x.ndim != 2:
        raise ShapeError(f"input must be C x L, got shape {x.shape}")
    return conv1d_forward_batch(x[None], weights, bias)[0]


def conv1d_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray) -> LayerGrads:
    d_w, d_b, d_x = conv1d_backward_batch(x[None], weights, upstream[None])
    return LayerGrads(d_w, d_b, d_x[0])


# ---------------------------------------------------------------------------
# max pooling: non-overlapping windows, trailing remainder dropped
# ---------------------------------------------------------------------------

def maxpool1d_batch(x: np.ndarray, pool: int = 3):
    """(B, C, L) -> ((B, C, L//pool), argmax offsets within each window)."""
    n = x.shape[-1]
    if n < pool:
        raise LengthError(f"input length {n} < pool size {pool}")
    m = n // pool
    windows = x[..., :m * pool].reshape(*x.shape[:-1], m, pool)
    idx = windows.argmax(axis=-1)  # ties -> lowest index
    out = np.take_along_axis(windows, idx[..., None], axis=-1)[..., 0]
    return np.ascontiguousarray(out), idx


def maxpool1d_backward_batch(upstream, argmax, length, pool: int = 3):
    """Scatter each upstream entry to its window's argmax position."""
    m = argmax.shape[-1]
    d_x = np.zeros((*argmax.shape[:-1], length), dtype=np.float64)
    view = d_x[..., :m * pool].reshape(*argmax.shape[:-1], m, pool)
    np.put_along_axis(view, argmax[..., None], upstream[..., None], axis=-1)
    return d_x


def maxpool1d(x: np.ndarray, pool: int = 3):
    """Single-sample max pooling: (C, L) -> ((C, L//pool), argmax indices)."""
    out, idx = maxpool1d_batch(x[None], pool)
    return out[0], idx[0]


def maxpool1d_backward(upstream, argmax, length, pool: int = 3):
    return maxpool1d_backward_batch(upstream[None], argmax[None], length, pool)[0]


# ---------------------------------------------------------------------------
# global average pooling
# ---------------------------------------------------------------------------

def global_avg_pool(x: np.ndarray) -> np.ndarray:
    """Mean over the time axis: (..., C, L) -> (..., C)."""
    if x.shape[-1] < 1:
        raise LengthError("cannot average an empty channel")
    return x.mean(axis=-1)


def global_avg_pool_backward(upstream: np.ndarray, length: int) -> np.ndarray:
    return np.repeat(upstream[..., None] / length, length, axis=-1)


# ---------------------------------------------------------------------------
# dense
# ---------------------------------------------------------------------------

def dense_forward(x: np.ndarray, weights: np.ndarray, bias: np.ndarray) -> np.ndarray:
    """x (n,) or (B, n) -> weights @ x + bias, linear activation."""
    if weights.ndim != 2 or x.shape[-1] != weights.shape[1]:
        raise ShapeError(
            f"dense dims inconsistent: input {x.shape}, weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"bias shape {bias.shape} != ({weights.shape[0]},)")
    return x @ weights.T + bias


def dense_backward(x: np.ndarray, weights: np.ndarray, upstream: np.ndarray) -> LayerGrads:
    if upstream.shape[-1] != weights.shape[0]:
        raise ShapeError(
            f"upstream shape {upstream.shape} != output dim {weights.shape[0]}")
    if x.ndim == 1:
        d_w = np.outer(upstream, x)
        d_b = upstream.copy()
    else:
        d_w = upstream.T @ x
        d_b = upstream.sum(axis=0)
    return LayerGrads(d_w, d_b, upstream @ weights)


# ---------------------------------------------------------------------------
# relu / dropout
# ---------------------------------------------------------------------------

def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def relu_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    # subgradient at 0 is 0
    return np.where(x > 0.0, upstream, 0.0)


def dropout(x: np.ndarray, rate: float, training: bool, rng: np.random.Generator | None = None):
    """Inverted dropout. Returns (output, mask); mask is None in inference mode."""
    if not 0.0 <= rate < 1.0:
        raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x.copy(), None
    if rng is None:
        raise ParameterError("training-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------

def mse_multi(pred: np.ndarray, target: np.ndarray):
    """Mean squared error over the target vector. Returns (loss, d_pred)."""
    if pred.shape != target.shape:
        raise ShapeError(f"pred shape {pred.shape} != target shape {target.shape}")
    diff = pred - target
    n = pred.shape[-1]
    loss = float(np.mean(diff * diff))
    if pred.ndim == 1:
        grad = 2.0 * diff / n
    else:
        # batch mean of per-sample losses
        grad = 2.0 * diff / (n * pred.shape[0])
    return loss, grad


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

@dataclass
class OptimizerState:
    """Bias-corrected adaptive-moment state, keyed like the parameter dict."""

    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: OptimizerState) -> None:
    """One Adam update, in place. Raises NumericError on non-finite gradients."""
    for name, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient in {name}")
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name, p in params.items():
        g = grads[name]
        if p.shape != g.shape:
            raise ShapeError(f"gradient shape {g.shape} != param shape {p.shape} for {name}")
        m = state.m.setdefault(name, np.zeros_like(p))
        v = state.v.setdefault(name, np.zeros_like(p))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p -= state.learning_rate * (m / bc1) / (np.sqrt(v / bc2) + state.eps)


# ---------------------------------------------------------------------------
# layer objects (batch-first), used to assemble networks
# ---------------------------------------------------------------------------

def glorot_uniform(rng: np.random.Generator, shape, fan_in: int, fan_out: int) -> np.ndarray:
    limit = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


class Conv1dLayer:
    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator):
        self.k = k
        self.weights = glorot_uniform(rng, (c_out, c_in, k), c_in * k, c_out * k)
        self.bias = np.zeros(c_out)
        self.grads: dict[str, np.ndarray] = {}
        self._x = None

    @property
    def params(self):
        return {"w": self.weights, "b": self.bias}

    def forward(self, x, training=False):
        self._x = x
        return conv1d_forward_batch(x, self.weights, self.bias)

    def backward(self, upstream):
        d_w, d_b, d_x = conv1d_backward_batch(self._x, self.weights, upstream)
        self.grads = {"w": d_w, "b": d_b}
        return d_x


class DenseLayer:
    def __init__(self, n_in: int, n_out: int, rng: np.random.Generator):
        self.weights = glorot_uniform(rng, (n_out, n_in), n_in, n_out)
        self.bias = np.zeros(n_out)
        self.grads: dict[str, np.ndarray] = {}
        self._x = None

    @property
    def params(self):
        return {"w": self.weights, "b": self.bias}

    def forward(self, x, training=False):
        self._x = x
        return dense_forward(x, self.weights, self.bias)

    def backward(self, upstream):
        g = dense_backward(self._x, self.weights, upstream)
        self.grads = {"w": g.d_weights, "b": g.d_bias}
        return g.d_input


class ReluLayer:
    params: dict = {}
    grads: dict = {}

    def forward(self, x, training=False):
        self._x = x
        return relu(x)

    def backward(self, upstream):
        return relu_backward(self._x, upstream)


class MaxPool1dLayer:
    params: dict = {}
    grads: dict = {}

    def __init__(self, pool: int = 3):
        self.pool = pool

    def forward(self, x, training=False):
        self._length = x.shape[-1]
        out, self._argmax = maxpool1d_batch(x, self.pool)
        return out

    def backward(self, upstream):
        return maxpool1d_backward_batch(upstream, self._argmax, self._length, self.pool)


class GlobalAvgPoolLayer:
    params: dict = {}
    grads: dict = {}

    def forward(self, x, training=False):
        self._length = x.shape[-1]
        return global_avg_pool(x)

    def backward(self, upstream):
        return global_avg_pool_backward(upstream, self._length)


class DropoutLayer:
    params: dict = {}
    grads: dict = {}

    def __init__(self, rate: float, rng: np.random.Generator | None = None):
        if not 0.0 <= rate < 1.0:
            raise ParameterError(f"dropout rate must be in [0, 1), got {rate}")
        self.rate = rate
        self.rng = rng

    def forward(self, x, training=False):
        out, self._mask = dropout(x, self.rate, training, self.rng)
        return out

    def backward(self, upstream):
        if self._mask is None:
            return upstream
        return upstream * self._mask


# ---------------------------------------------------------------------------
# finite-difference gradient checker
# ---------------------------------------------------------------------------

def _relative_error(a: np.ndarray, n: np.ndarray) -> float:
    denom = np.maximum(np.abs(a), np.abs(n)) + 1e-12
    return float(np.max(np.abs(a - n) / denom))


def grad_check(layer, x: np.ndarray, eps: float = 1e-6, seed: int = 0) -> float:
    """Worst relative error between analytic and central-difference gradients.

    The scalar probe is sum(u * layer(x)) for a fixed random projection u, so
    the full Jacobian is exercised. Checks the input gradient and every
    parameter gradient of ``layer``.
    """
    if not 1e-8 <= eps <= 1e-4:
        raise ParameterError(f"eps must be in [1e-8, 1e-4], got {eps}")
    rng = np.random.default_rng(seed)
    y = layer.forward(x, training=False)
    u = rng.standard_normal(y.shape)

    def loss_at(x_probe):
        return float(np.sum(u * layer.forward(x_probe, training=False)))

    d_x = layer.backward(u)
    analytic = dict(layer.grads)
    worst = 0.0

    num = np.zeros_like(x)
    flat = x.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        up = loss_at(x)
        flat[i] = orig - eps
        down = loss_at(x)
        flat[i] = orig
        num.reshape(-1)[i] = (up - down) / (2 * eps)
    worst = max(worst, _relative_error(d_x, num))

    for name, p in layer.params.items():
        num = np.zeros_like(p)
        flat = p.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            up = loss_at(x)
            flat[i] = orig - eps
            down = loss_at(x)
            flat[i] = orig
            num.reshape(-1)[i] = (up - down) / (2 * eps)
        worst = max(worst, _relative_error(analytic[name], num))
    return worst
