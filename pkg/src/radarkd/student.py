"""The end-to-end CNN student.

Input is the middle 30 azimuth bins of a frame plus two coordinate
channels (normalized range index, folded azimuth distance from center),
so the translation-invariant kernels can still learn range- and
lane-position-dependent behavior. Five conv stages collapse azimuth
30 -> 15 -> 8 -> 4 -> 1 -> 1 while range stays at 464, ending in a
sigmoid per-range-bin probability vector.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np
from numpy.lib.stride_tricks import as_strided

from . import fileio
from .errors import ConfigError, SchemaError
from .nn import (
    Conv2d,
    _apply_activation,
    _conv_out_extent,
    conv_backward_batch,
    conv_forward_batch,
    ensure_finite,
)

CROP_WIDTH = 30
DEFAULT_CROP_OFFSET = 113  # (256 - 30) // 2: centered window


def crop_azimuth(map_, offset=DEFAULT_CROP_OFFSET):
    """Copy a contiguous CROP_WIDTH-wide azimuth window out of a map."""
    map_ = np.asarray(map_)
    if map_.ndim != 2:
        raise ConfigError("crop_azimuth expects a [range, azimuth] map")
    if offset < 0 or offset + CROP_WIDTH > map_.shape[1]:
        raise ConfigError(
            f"crop offset {offset} does not fit a {CROP_WIDTH}-bin window "
            f"into {map_.shape[1]} azimuth bins"
        )
    return map_[:, offset:offset + CROP_WIDTH].copy()


@lru_cache(maxsize=4)
def coordconv_channels(n_range=464, n_azimuth=CROP_WIDTH):
    """(R, A) float32 channels.

    R[n, :] = n / (n_range - 1): 0 at the closest bin, 1 at the farthest.
    A[:, m] = 2|m - (n_azimuth-1)/2| / (n_azimuth-1): 0 at the window
    center, 1 at both edges.
    """
    r_max = n_range - 1
    a_max = n_azimuth - 1
    r_col = (np.arange(n_range, dtype=np.float64) / r_max).astype(np.float32)
    a_row = (2.0 * np.abs(np.arange(n_azimuth, dtype=np.float64) - a_max / 2.0) / a_max
             ).astype(np.float32)
    r = np.tile(r_col[:, None], (1, n_azimuth))
    a = np.tile(a_row[None, :], (n_range, 1))
    r.flags.writeable = False
    a.flags.writeable = False
    return r, a


@dataclass
class StudentModel:
    layers: list[Conv2d] = field(default_factory=list)
    crop_offset: int = DEFAULT_CROP_OFFSET

    def __post_init__(self):
        if self.crop_offset < 0:
            raise ConfigError("crop offset must be >= 0")


# (out_c, in_c, kH, kW, stride, padding, activation) per stage; collapses
# azimuth 30->15->8->4->1->1 while padding keeps range at 464 throughout
_ARCHITECTURE = (
    (8, 3, 5, 5, (1, 2), (2, 2), "relu"),
    (16, 8, 3, 5, (1, 2), (1, 2), "relu"),
    (16, 16, 3, 4, (1, 2), (1, 1), "relu"),
    (16, 16, 3, 4, (1, 1), (1, 0), "relu"),
    (1, 16, 3, 1, (1, 1), (1, 0), "sigmoid"),
)


def default_architecture(rng_seed=0):
    """The fixed 5-stage network with fan-in uniform init, zero biases."""
    rng = np.random.default_rng(rng_seed)
    layers = []
    for out_c, in_c, kh, kw, stride, padding, activation in _ARCHITECTURE:
        bound = 1.0 / np.sqrt(in_c * kh * kw)
        kernel = rng.uniform(-bound, bound, size=(out_c, in_c, kh, kw)).astype(np.float32)
        bias = np.zeros(out_c, dtype=np.float32)
        layers.append(Conv2d(kernel, bias, stride=stride, padding=padding,
                             activation=activation))
    return StudentModel(layers=layers)


def build_input(map_, crop_offset=DEFAULT_CROP_OFFSET):
    """Stack [cropped map, R, A] into a [3, n_range, 30] float32 tensor."""
    cropped = crop_azimuth(map_, crop_offset)
    return stack_input(cropped)


def stack_input(cropped):
    """Attach coordinate channels to an already-cropped [n_range, 30] map."""
    cropped = np.asarray(cropped)
    if cropped.ndim != 2 or cropped.shape[1] != CROP_WIDTH:
        raise ConfigError(f"cropped map must be [n_range, {CROP_WIDTH}]")
    r, a = coordconv_channels(cropped.shape[0], CROP_WIDTH)
    out = np.empty((3,) + cropped.shape, dtype=np.float32)
    out[0] = cropped
    out[1] = r
    out[2] = a
    return out


def _infer_forward(x, layers):
    """Channels-last inference pass.

    Same arithmetic as chaining conv_forward_batch, but the patch gather
    copies contiguous channel runs and each stage's output already sits in
    the next stage's layout, which roughly halves per-frame latency. Keeps
    no caches, so it cannot feed a backward pass.
    """
    y = np.ascontiguousarray(x.transpose(0, 2, 3, 1))
    for layer in layers:
        n, h, w, c = y.shape
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
            xp = np.zeros((n, h + 2 * ph, w + 2 * pw, c), dtype=y.dtype)
            xp[:, ph:ph + h, pw:pw + w, :] = y
        else:
            xp = y
        sn, srow, scol, sc = xp.strides
        patches = as_strided(
            xp,
            shape=(n, ho, wo, kh, kw, c),
            strides=(sn, sh * srow, sw * scol, srow, scol, sc),
        )
        cols = np.ascontiguousarray(patches).reshape(n * ho * wo, kh * kw * c)
        wmat = np.ascontiguousarray(
            layer.kernel.transpose(2, 3, 1, 0).reshape(kh * kw * c, out_c))
        z = cols @ wmat
        z += layer.bias
        y = _apply_activation(z, layer.activation)
        ensure_finite(y, "conv forward")
        y = y.reshape(n, ho, wo, out_c)
    return y


def student_forward_batch(inputs, model, keep_caches=False):
    """Forward a batch [N, 3, n_range, 30] -> probabilities [N, n_range].

    keep_caches=True runs the training-path convolutions and also returns
    the per-layer caches for student_backward_batch; the default path uses
    the faster cacheless layout.
    """
    x = np.asarray(inputs)
    if x.ndim != 4 or x.shape[1] != 3:
        raise ConfigError("student input batch must be [N, 3, n_range, 30]")
    if keep_caches:
        caches = []
        for layer in model.layers:
            x, cache = conv_forward_batch(x, layer)
            caches.append(cache)
        if x.shape[1] != 1 or x.shape[3] != 1:
            raise ConfigError(f"student network did not collapse to a vector: {x.shape}")
        return x[:, 0, :, 0], caches
    y = _infer_forward(x, model.layers)
    if y.shape[2] != 1 or y.shape[3] != 1:
        raise ConfigError(f"student network did not collapse to a vector: "
                          f"{(y.shape[0], y.shape[3], y.shape[1], y.shape[2])}")
    return y[:, :, 0, 0]


def student_backward_batch(model, caches, grad_probs):
    """Backprop d(loss)/d(probabilities) through all stages.

    Returns gradients aligned with parameter_list(model).
    """
    grad = np.asarray(grad_probs)[:, None, :, None]
    grads = []
    for layer, cache in zip(reversed(model.layers), reversed(caches)):
        grad, gk, gb = conv_backward_batch(layer, cache, grad)
        grads.append(gb)
        grads.append(gk)
    grads.reverse()
    return grads


def student_forward(inp, model, presigmoid=False):
    """Single-frame forward: [3, n_range, 30] -> probability vector [n_range].

    presigmoid=True returns the last stage's linear response instead of
    the sigmoid output (used by analysis/probing, not the pipeline).
    """
    inp = np.asarray(inp)
    if inp.ndim != 3:
        raise ConfigError("student input must be [3, n_range, 30]")
    if not presigmoid:
        return student_forward_batch(inp[None], model)[0]
    x = inp[None]
    for layer in model.layers[:-1]:
        x, _ = conv_forward_batch(x, layer)
    last = model.layers[-1]
    linear = Conv2d(last.kernel, last.bias, last.stride, last.padding, "none")
    x, _ = conv_forward_batch(x, linear)
    return x[0, 0, :, 0]


def parameter_list(model):
    params = []
    for layer in model.layers:
        params.append(layer.kernel)
        params.append(layer.bias)
    return params


def parameter_count(model):
    return sum(p.size for p in parameter_list(model))


def save_student(path, model):
    tensors = []
    for layer in model.layers:
        tensors.append(layer.kernel)
        tensors.append(layer.bias)
    tensors.append(np.array([model.crop_offset], dtype=np.float32))
    fileio.write_weights(path, "student-cnn", tensors)


def load_student(path):
    _, tensors = fileio.read_weights(path, expect_kind="student-cnn")
    if len(tensors) != 2 * len(_ARCHITECTURE) + 1:
        raise SchemaError("student weights file has the wrong tensor count")
    layers = []
    for i, (out_c, in_c, kh, kw, stride, padding, activation) in enumerate(_ARCHITECTURE):
        kernel = tensors[2 * i]
        bias = tensors[2 * i + 1]
        if kernel.shape != (out_c, in_c, kh, kw) or bias.shape != (out_c,):
            raise SchemaError(
                f"student stage {i} has shape {kernel.shape}, "
                f"expected {(out_c, in_c, kh, kw)}"
            )
        layers.append(Conv2d(kernel, bias, stride=stride, padding=padding,
                             activation=activation))
    offset = float(tensors[-1].reshape(-1)[0])
    if offset != int(offset) or int(offset) < 0:
        raise SchemaError("student crop offset out of domain")
    return StudentModel(layers=layers, crop_offset=int(offset))
