"""Minimal dense-array kernels for the fixed detector graphs.

Implements exactly what the teacher MLP and the student CNN need: 2-D
cross-correlation with gradients, dense layers, ReLU/sigmoid, and Adam.
There is no autodiff graph — each layer exposes explicit forward/backward
functions and the training loops wire them together by hand.

Convolution uses the ML convention (cross-correlation, no kernel flip)
with zero padding. Arrays keep the caller's dtype; the pipeline runs
float32, gradient checks run float64.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import ConfigError, NumericError

ACTIVATIONS = ("none", "relu", "sigmoid")


def relu(x):
    return np.maximum(x, 0.0)


def sigmoid(x):
    """Numerically stable logistic function."""
    x = np.asarray(x)
    out = np.empty_like(x, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def ensure_finite(arr, context):
    """Raise NumericError if arr contains NaN/Inf.

    Uses a single float64 reduction: any NaN/Inf poisons the sum, which is
    far cheaper than np.isfinite over large maps on every op.
    """
    total = float(np.sum(arr, dtype=np.float64))
    if not math.isfinite(total):
        raise NumericError(f"non-finite values in {context}")


def _apply_activation(z, activation):
    if activation == "none":
        return z
    if activation == "relu":
        return relu(z)
    return sigmoid(z)


def _activation_grad(z, y, activation):
    """d(activation)/dz, given pre-activation z and output y."""
    if activation == "none":
        return None  # multiply by 1 elided by callers
    if activation == "relu":
        return (z > 0).astype(z.dtype)
    return y * (1.0 - y)


def _check_activation(activation):
    if activation not in ACTIVATIONS:
        raise ConfigError(f"unknown activation {activation!r}")


@dataclass
class Conv2d:
    """One convolutional stage: kernel [outC, inC, kH, kW], bias [outC]."""

    kernel: np.ndarray
    bias: np.ndarray
    stride: tuple[int, int] = (1, 1)
    padding: tuple[int, int] = (0, 0)
    activation: str = "none"

    def __post_init__(self):
        self.kernel = np.asarray(self.kernel)
        self.bias = np.asarray(self.bias)
        if self.kernel.ndim != 4:
            raise ConfigError("conv kernel must be [outC, inC, kH, kW]")
        if self.bias.shape != (self.kernel.shape[0],):
            raise ConfigError("conv bias must have one entry per output channel")
        self.stride = (int(self.stride[0]), int(self.stride[1]))
        self.padding = (int(self.padding[0]), int(self.padding[1]))
        if min(self.stride) < 1 or min(self.padding) < 0:
            raise ConfigError("stride must be >= 1 and padding >= 0")
        _check_activation(self.activation)

    @property
    def out_channels(self):
        return self.kernel.shape[0]

    @property
    def in_channels(self):
        return self.kernel.shape[1]


@dataclass
class Dense:
    """Fully connected stage: weights [out, in], bias [out]."""

    weights: np.ndarray
    bias: np.ndarray
    activation: str = "none"

    def __post_init__(self):
        self.weights = np.asarray(self.weights)
        self.bias = np.asarray(self.bias)
        if self.weights.ndim != 2:
            raise ConfigError("dense weights must be [out, in]")
        if self.bias.shape != (self.weights.shape[0],):
            raise ConfigError("dense bias must have one entry per output")
        _check_activation(self.activation)


def _conv_out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


@dataclass
class ConvCache:
    """Intermediates kept from a batched forward pass for its backward pass."""

    input_shape: tuple
    padded_shape: tuple
    out_shape: tuple  # (n, outC, ho, wo)
    cols: np.ndarray  # [n*ho*wo, inC*kH*kW]
    z: np.ndarray  # pre-activation [n*ho*wo, outC]
    y: np.ndarray  # activated, same shape as z


def conv_forward_batch(x, layer):
    """Run layer over a batch x [N, C, H, W] -> (y [N, outC, H', W'], cache)."""
    x = np.asarray(x)
    if x.ndim != 4:
        raise ConfigError("batched conv input must be [N, C, H, W]")
    n, c, h, w = x.shape
    out_c, in_c, kh, kw = layer.kernel.shape
    if c != in_c:
        raise ConfigError(f"conv input has {c} channels, layer expects {in_c}")
    sh, sw = layer.stride
    ph, pw = layer.padding
    ho = _conv_out_extent(h, kh, sh, ph)
    wo = _conv_out_extent(w, kw, sw, pw)
    if ho < 1 or wo < 1:
        raise ConfigError("conv output extent is not positive")

    if ph or pw:
        xp = np.zeros((n, c, h + 2 * ph, w + 2 * pw), dtype=x.dtype)
        xp[:, :, ph:ph + h, pw:pw + w] = x
    else:
        xp = x
    sn, sc, srow, scol = xp.strides
    patches = as_strided(
        xp,
        shape=(n, c, kh, kw, ho, wo),
        strides=(sn, sc, srow, scol, sh * srow, sw * scol),
    )
    cols = np.ascontiguousarray(patches.transpose(0, 4, 5, 1, 2, 3))
    cols = cols.reshape(n * ho * wo, c * kh * kw)

    wmat = layer.kernel.reshape(out_c, -1)
    z = cols @ wmat.T
    z += layer.bias
    y = _apply_activation(z, layer.activation)
    ensure_finite(y, "conv forward")
    out = y.reshape(n, ho, wo, out_c).transpose(0, 3, 1, 2)
    cache = ConvCache((n, c, h, w), xp.shape, (n, out_c, ho, wo), cols, z, y)
    return out, cache


def conv_backward_batch(layer, cache, grad_out):
    """Gradients for a batched forward. Returns (grad_x, grad_kernel, grad_bias)."""
    grad_out = np.asarray(grad_out)
    if grad_out.shape != cache.out_shape:
        raise ConfigError(
            f"grad_out shape {grad_out.shape} does not match forward output {cache.out_shape}"
        )
    n, out_c, ho, wo = cache.out_shape
    _, c, h, w = cache.input_shape
    kh, kw = layer.kernel.shape[2:]
    sh, sw = layer.stride
    ph, pw = layer.padding

    gy = grad_out.transpose(0, 2, 3, 1).reshape(n * ho * wo, out_c)
    act = _activation_grad(cache.z, cache.y, layer.activation)
    dz = gy if act is None else gy * act

    grad_bias = dz.sum(axis=0)
    grad_kernel = (dz.T @ cache.cols).reshape(layer.kernel.shape)

    wmat = layer.kernel.reshape(out_c, -1)
    dcols = dz @ wmat
    dpatches = dcols.reshape(n, ho, wo, c, kh, kw).transpose(0, 3, 4, 5, 1, 2)
    gxp = np.zeros(cache.padded_shape, dtype=dz.dtype)
    for ki in range(kh):
        for kj in range(kw):
            gxp[:, :, ki:ki + sh * (ho - 1) + 1:sh, kj:kj + sw * (wo - 1) + 1:sw] += dpatches[:, :, ki, kj]
    grad_x = gxp[:, :, ph:ph + h, pw:pw + w]
    if ph or pw:
        grad_x = np.ascontiguousarray(grad_x)
    for g in (grad_x, grad_kernel, grad_bias):
        ensure_finite(g, "conv backward")
    return grad_x, grad_kernel, grad_bias


def conv2d_forward(x, layer):
    """Single-frame convolution: x [C, H, W] -> [outC, H', W']."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ConfigError("conv input must be [C, H, W]")
    out, _ = conv_forward_batch(x[None], layer)
    return out[0]


def conv2d_backward(x, layer, grad_out):
    """Gradients of conv2d_forward w.r.t. input, kernel, and bias."""
    x = np.asarray(x)
    if x.ndim != 3:
        raise ConfigError("conv input must be [C, H, W]")
    _, cache = conv_forward_batch(x[None], layer)
    grad_out = np.asarray(grad_out)
    gx, gk, gb = conv_backward_batch(layer, cache, grad_out[None])
    return gx[0], gk, gb


def dense_forward(x, layer):
    """x [in] or [B, in] -> [out] or [B, out]."""
    x = np.asarray(x)
    if x.shape[-1] != layer.weights.shape[1]:
        raise ConfigError(
            f"dense input width {x.shape[-1]} does not match weights {layer.weights.shape}"
        )
    z = x @ layer.weights.T + layer.bias
    y = _apply_activation(z, layer.activation)
    ensure_finite(y, "dense forward")
    return y


def dense_backward(x, layer, grad_out):
    """Gradients of dense_forward. Returns (grad_x, grad_weights, grad_bias)."""
    x = np.asarray(x)
    grad_out = np.asarray(grad_out)
    z = x @ layer.weights.T + layer.bias
    if grad_out.shape != z.shape:
        raise ConfigError("grad_out shape does not match dense output")
    y = _apply_activation(z, layer.activation)
    act = _activation_grad(z, y, layer.activation)
    dz = grad_out if act is None else grad_out * act
    if x.ndim == 2:
        grad_w = dz.T @ x
        grad_b = dz.sum(axis=0)
    else:
        grad_w = np.outer(dz, x)
        grad_b = dz
    grad_x = dz @ layer.weights
    for g in (grad_x, grad_w, grad_b):
        ensure_finite(g, "dense backward")
    return grad_x, grad_w, grad_b


@dataclass
class AdamState:
    """Adam optimizer state; moment buffers are allocated lazily on first step."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)


def adam_step(params, grads, state):
    """Standard Adam update with bias correction; params updated in place."""
    if len(params) != len(grads):
        raise ConfigError("params and grads length mismatch")
    if not state.m:
        state.m = [np.zeros_like(p) for p in params]
        state.v = [np.zeros_like(p) for p in params]
    if len(state.m) != len(params):
        raise ConfigError("optimizer state does not match parameter list")
    state.step += 1
    c1 = 1.0 - state.beta1 ** state.step
    c2 = 1.0 - state.beta2 ** state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g.shape != p.shape or m.shape != p.shape:
            raise ConfigError("gradient/state shape mismatch in adam_step")
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        p -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.epsilon)
        ensure_finite(p, "adam_step parameter")
    return params
