"""Block-by-block signal-processing teacher that auto-labels drives.

The teacher runs classic per-range-bin DSP — ego-lane masking, speed-driven
temporal alignment, CA-CFAR, handcrafted features — and a small MLP that
turns the features into per-bin probabilities. Thresholding and run-merging
produce the label vectors the student trains on. The teacher abstains
(returns None) whenever it lacks history or the host moves too slowly for
the alignment step to be meaningful.
"""

import math
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from .errors import BelowCriticalSpeed, ConfigError, SchemaError
from .fileio import read_weights, write_weights
from .metrics import postprocess_scores, r_scores
from .nn import AdamState, Dense, adam_step, dense_backward, dense_forward
from .train import positive_weight, wmse, wmse_gradient

_MLP_WIDTHS = ((16, 5), (16, 16), (1, 16))
_MLP_ACTIVATIONS = ("relu", "relu", "sigmoid")
FEATURE_NAMES = ("peak_in_lane", "mean_in_lane", "cfar_ratio",
                 "temporal_persistence", "azimuth_spread")


@dataclass(frozen=True)
class CfarConfig:
    """Cell-averaging CFAR along range: guard band then training cells."""

    guard_cells: int = 2
    train_cells: int = 8
    offset_db: float = 9.0

    def __post_init__(self):
        if self.guard_cells < 0:
            raise ConfigError("guard_cells must be >= 0")
        if self.train_cells < 1:
            raise ConfigError("train_cells must be >= 1")

    @property
    def factor(self):
        return 10.0 ** (self.offset_db / 20.0)


@dataclass
class TeacherParams:
    geometry: "RadarGeometry"
    accumulation_depth: int = 8
    min_speed: float = 5.0
    cfar: CfarConfig = field(default_factory=CfarConfig)
    mlp: list = field(default_factory=list)
    decision_threshold: float = 0.5
    feat_mean: np.ndarray = None
    feat_std: np.ndarray = None

    def __post_init__(self):
        if self.accumulation_depth < 1:
            raise ConfigError("accumulation depth must be >= 1")
        if self.min_speed < 0:
            raise ConfigError("min_speed must be >= 0")
        if not 0.0 < self.decision_threshold < 1.0:
            raise ConfigError("decision threshold must lie in (0, 1)")
        if self.feat_mean is None:
            self.feat_mean = np.zeros(len(FEATURE_NAMES), dtype=np.float32)
        if self.feat_std is None:
            self.feat_std = np.ones(len(FEATURE_NAMES), dtype=np.float32)


def default_teacher_mlp(rng_seed=0):
    rng = np.random.default_rng(rng_seed)
    layers = []
    for (out_n, in_n), activation in zip(_MLP_WIDTHS, _MLP_ACTIVATIONS):
        bound = 1.0 / math.sqrt(in_n)
        weights = rng.uniform(-bound, bound, size=(out_n, in_n)).astype(np.float32)
        layers.append(Dense(weights, np.zeros(out_n, dtype=np.float32), activation))
    return layers


def default_teacher_params(geometry, rng_seed=0):
    return TeacherParams(geometry=geometry, mlp=default_teacher_mlp(rng_seed))


@lru_cache(maxsize=8)
def lane_mask(geometry):
    """Boolean [n_range, n_azimuth]: cells whose cross-range offset stays
    inside the ego lane."""
    angles = np.linspace(-math.radians(geometry.fov_degrees) / 2,
                         math.radians(geometry.fov_degrees) / 2,
                         geometry.n_azimuth)
    ranges = (np.arange(geometry.n_range) + 0.5) * geometry.range_resolution
    cross = np.abs(ranges[:, None] * np.sin(angles)[None, :])
    mask = cross <= geometry.lane_half_width
    mask.flags.writeable = False
    return mask


@lru_cache(maxsize=8)
def _lane_bounds(geometry):
    """(lo, hi) azimuth column bounds of the in-lane band per range bin;
    the band is contiguous because |sin| grows away from boresight."""
    mask = lane_mask(geometry)
    lo = mask.argmax(axis=1)
    hi = geometry.n_azimuth - mask[:, ::-1].argmax(axis=1)
    return lo, hi


def _shift_range(map_, shift):
    """Shift rows toward index 0 by a (possibly fractional) bin count,
    filling vacated far-range rows with zeros."""
    n_range = map_.shape[0]
    whole = int(math.floor(shift))
    frac = shift - whole
    # snap near-integer shifts so exact-speed alignment stays bit-clean
    if frac < 1e-9:
        frac = 0.0
    elif frac > 1.0 - 1e-9:
        whole += 1
        frac = 0.0
    out = np.zeros_like(map_)
    if whole >= n_range:
        return out
    if frac == 0.0:
        out[:n_range - whole] = map_[whole:]
    else:
        out[:n_range - whole] = (1.0 - frac) * map_[whole:]
        if whole + 1 < n_range:
            out[:n_range - whole - 1] += frac * map_[whole + 1:]
    return out


def _align_history(history, geometry, host_speed, frame_interval, min_speed):
    if not history:
        raise ConfigError("history must hold at least one frame map")
    if host_speed < min_speed:
        raise BelowCriticalSpeed(
            f"host speed {host_speed:.2f} m/s below critical {min_speed:.2f} m/s")
    shape = (geometry.n_range, geometry.n_azimuth)
    aligned = []
    for age, map_ in enumerate(reversed(history)):
        map_ = np.asarray(map_)
        if map_.shape != shape:
            raise ConfigError(f"frame map shape {map_.shape} != {shape}")
        shift = host_speed * age * frame_interval / geometry.range_resolution
        aligned.append(_shift_range(map_, shift) if age else map_.copy())
    aligned.reverse()
    return aligned


def interpolate_accumulate(history, geometry, host_speed, frame_interval,
                           min_speed):
    """Average the last K frame maps after shifting each one down-range by
    the distance the host has covered since it was captured."""
    aligned = _align_history(history, geometry, host_speed, frame_interval,
                             min_speed)
    acc = np.zeros_like(aligned[0])
    for map_ in aligned:
        acc += map_
    acc /= len(aligned)
    return acc


def _cfar_noise(map_, j, column, cfar):
    """Average of the training cells along range at the given column,
    skipping the guard band around the cell under test."""
    n_range = map_.shape[0]
    below_lo = max(0, j - cfar.guard_cells - cfar.train_cells)
    below_hi = max(0, j - cfar.guard_cells)
    above_lo = min(n_range, j + cfar.guard_cells + 1)
    above_hi = min(n_range, j + cfar.guard_cells + 1 + cfar.train_cells)
    below = map_[below_lo:below_hi, column]
    above = map_[above_lo:above_hi, column]
    count = below.size + above.size
    if count == 0:
        return 0.0
    return (float(below.sum()) + float(above.sum())) / count


def cfar_exceedances(map_, geometry, cfar):
    """Per range bin: does the in-lane peak clear the CA-CFAR threshold?"""
    lo, hi = _lane_bounds(geometry)
    factor = cfar.factor
    exceed = np.zeros(geometry.n_range, dtype=bool)
    for j in range(geometry.n_range):
        segment = map_[j, lo[j]:hi[j]]
        k = int(np.argmax(segment))
        peak = float(segment[k])
        noise = _cfar_noise(map_, j, lo[j] + k, cfar)
        if noise > 0.0:
            exceed[j] = peak > noise * factor
        else:
            exceed[j] = peak > 0.0
    return exceed


def extract_features(map_, geometry, cfar, persistence):
    """Per-range-bin feature rows [peak, mean, cfar ratio, persistence,
    azimuth spread], all computed over the in-lane band only."""
    lo, hi = _lane_bounds(geometry)
    features = np.zeros((geometry.n_range, len(FEATURE_NAMES)), dtype=np.float32)
    for j in range(geometry.n_range):
        segment = map_[j, lo[j]:hi[j]]
        width = segment.size
        k = int(np.argmax(segment))
        peak = float(segment[k])
        noise = _cfar_noise(map_, j, lo[j] + k, cfar)
        ratio = peak / noise if noise > 0.0 else 0.0
        spread = float((segment >= 0.5 * peak).sum()) / width if peak > 0.0 else 0.0
        features[j, 0] = peak
        features[j, 1] = float(segment.mean())
        features[j, 2] = ratio
        features[j, 3] = persistence[j]
        features[j, 4] = spread
    return features


def frame_features(history, geometry, host_speed, frame_interval, params):
    """Feature matrix for the newest frame of a K-deep history window.

    Raises BelowCriticalSpeed when the host is too slow to align history.
    """
    aligned = _align_history(history, geometry, host_speed, frame_interval,
                             params.min_speed)
    acc = np.zeros_like(aligned[0])
    for map_ in aligned:
        acc += map_
    acc /= len(aligned)
    hits = np.zeros(geometry.n_range, dtype=np.float64)
    for map_ in aligned:
        hits += cfar_exceedances(map_, geometry, params.cfar)
    persistence = hits / len(aligned)
    return extract_features(acc, geometry, params.cfar, persistence)


def teacher_score(features, params):
    """Per-range-bin probability of an in-lane stationary object."""
    x = (np.asarray(features, dtype=np.float32) - params.feat_mean) / params.feat_std
    for layer in params.mlp:
        x = dense_forward(x, layer)
    return x[:, 0]


def label_from_features(features, params):
    return postprocess_scores(teacher_score(features, params),
                              params.decision_threshold)


def drive_teacher_features(drive, params):
    """(frame index, features) for every frame the teacher can handle;
    warmup and below-critical-speed frames are skipped."""
    rows = []
    history = deque(maxlen=params.accumulation_depth)
    for i, frame in enumerate(drive.frames):
        history.append(frame.map)
        if len(history) < params.accumulation_depth:
            continue
        try:
            features = frame_features(list(history), drive.geometry,
                                      frame.host_speed, drive.frame_interval,
                                      params)
        except BelowCriticalSpeed:
            continue
        rows.append((i, features))
    return rows


def teacher_label(drive, params):
    """Per-frame label vectors; None where the teacher abstains."""
    labels = [None] * len(drive.frames)
    for i, features in drive_teacher_features(drive, params):
        labels[i] = label_from_features(features, params)
    return labels


def _mlp_parameters(mlp):
    params = []
    for layer in mlp:
        params.append(layer.weights)
        params.append(layer.bias)
    return params


def _mlp_forward_trace(x, mlp):
    trace = [x]
    for layer in mlp:
        x = dense_forward(x, layer)
        trace.append(x)
    return trace


def _mlp_gradients(trace, mlp, grad_out):
    grads = []
    grad = grad_out
    for layer, x_in in zip(reversed(mlp), reversed(trace[:-1])):
        grad, gw, gb = dense_backward(x_in, layer, grad)
        grads.append(gb)
        grads.append(gw)
    grads.reverse()
    return grads


def _clone_teacher(params):
    mlp = [Dense(l.weights.copy(), l.bias.copy(), l.activation)
           for l in params.mlp]
    return TeacherParams(geometry=params.geometry,
                         accumulation_depth=params.accumulation_depth,
                         min_speed=params.min_speed, cfar=params.cfar,
                         mlp=mlp, decision_threshold=params.decision_threshold,
                         feat_mean=params.feat_mean.copy(),
                         feat_std=params.feat_std.copy())


def train_teacher_mlp(features, targets, val_features, val_targets, params,
                      config):
    """Fit the scoring MLP on per-bin features against known target vectors.

    The MLP scores each range bin independently, so the sample unit here is
    a single feature row and batchSize counts rows, not frames. Feature
    standardization statistics come from the training set and ride along in
    the returned TeacherParams. Early stopping watches validation recall of
    the thresholded (pre-merge) scores, breaking ties by validation loss so
    a flat recall does not halt a still-improving fit.
    """
    weight = positive_weight(targets)
    stacked = np.stack([np.asarray(f, dtype=np.float32) for f in features])
    rows = stacked.reshape(-1, stacked.shape[-1])
    mean = rows.mean(axis=0)
    std = rows.std(axis=0)
    std = np.where(std < 1e-6, 1.0, std)

    trained = _clone_teacher(params)
    trained.feat_mean = mean.astype(np.float32)
    trained.feat_std = std.astype(np.float32)
    opt_params = _mlp_parameters(trained.mlp)
    optimizer = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                          epsilon=config.epsilon)
    rng = np.random.default_rng(config.rng_seed)

    rows = (rows - trained.feat_mean) / trained.feat_std
    row_targets = np.concatenate([np.asarray(t) for t in targets]).astype(np.float64)
    val_x = (np.stack([np.asarray(f, dtype=np.float32) for f in val_features])
             - trained.feat_mean) / trained.feat_std
    val_t = np.stack(val_targets).astype(np.float64)

    n_rows = rows.shape[0]
    history = []
    best = (-1.0, math.inf)
    best_weights = None
    bad_epochs = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(n_rows)
        loss_sum = 0.0
        for start in range(0, n_rows, config.batch_size):
            idx = order[start:start + config.batch_size]
            xb = rows[idx]
            tb = row_targets[idx][:, None]
            trace = _mlp_forward_trace(xb, trained.mlp)
            probs = trace[-1]
            loss = wmse(probs, tb, weight)
            loss_sum += loss * len(idx)
            grad = wmse_gradient(probs.astype(np.float64), tb, weight)
            grads = _mlp_gradients(trace, trained.mlp, grad.astype(np.float32))
            adam_step(opt_params, grads, optimizer)
        train_loss = loss_sum / n_rows
        if not math.isfinite(train_loss):
            raise ConfigError(f"teacher training diverged at epoch {epoch}")

        val_scores = val_x.reshape(-1, val_x.shape[-1])
        for layer in trained.mlp:
            val_scores = dense_forward(val_scores, layer)
        val_probs = val_scores.reshape(val_t.shape)
        val_loss = wmse(val_probs, val_t, weight)
        r0, r1 = r_scores(val_t, val_probs >= trained.decision_threshold)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "val_r0": r0, "val_r1": r1})

        score = (r0 if r0 is not None else -1.0, -val_loss)
        if score > best:
            best = score
            best_weights = [p.copy() for p in opt_params]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stop_patience:
                break

    for p, saved in zip(opt_params, best_weights):
        p[...] = saved
    return trained, history


def save_teacher(path, params):
    tensors = []
    for layer in params.mlp:
        tensors.append(layer.weights)
        tensors.append(layer.bias)
    tensors.append(params.feat_mean)
    tensors.append(params.feat_std)
    tensors.append(np.array([params.accumulation_depth, params.min_speed,
                             params.cfar.guard_cells, params.cfar.train_cells,
                             params.cfar.offset_db, params.decision_threshold],
                            dtype=np.float32))
    write_weights(path, "teacher-mlp", tensors)


def load_teacher(path, geometry):
    _, tensors = read_weights(path, expect_kind="teacher-mlp")
    if len(tensors) != 9:
        raise SchemaError(f"teacher file holds {len(tensors)} tensors, expected 9")
    mlp = []
    for stage, ((out_n, in_n), activation) in enumerate(
            zip(_MLP_WIDTHS, _MLP_ACTIVATIONS)):
        weights, bias = tensors[2 * stage], tensors[2 * stage + 1]
        if weights.shape != (out_n, in_n) or bias.shape != (out_n,):
            raise SchemaError(
                f"teacher stage {stage} has shape {weights.shape}/{bias.shape}")
        mlp.append(Dense(weights, bias, activation))
    feat_mean, feat_std, scalars = tensors[6], tensors[7], tensors[8]
    n_features = len(FEATURE_NAMES)
    if feat_mean.shape != (n_features,) or feat_std.shape != (n_features,):
        raise SchemaError("teacher feature statistics have the wrong shape")
    if scalars.shape != (6,):
        raise SchemaError("teacher scalar block must hold 6 values")
    depth, min_speed, guard, train, offset_db, threshold = (float(v) for v in scalars)
    if depth != int(depth) or int(depth) < 1:
        raise SchemaError(f"invalid accumulation depth {depth}")
    if guard != int(guard) or train != int(train):
        raise SchemaError("CFAR cell counts must be integers")
    try:
        cfar = CfarConfig(int(guard), int(train), offset_db)
        return TeacherParams(geometry=geometry, accumulation_depth=int(depth),
                             min_speed=min_speed, cfar=cfar, mlp=mlp,
                             decision_threshold=threshold, feat_mean=feat_mean,
                             feat_std=feat_std)
    except ConfigError as exc:
        raise SchemaError(f"teacher parameters out of range: {exc}") from exc
