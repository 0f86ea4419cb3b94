"""Student training: selective sample filtering, weighted MSE, Adam loop.

The student is trained only on frames where the teacher committed to at
least one detection; the loss up-weights positive range bins by the global
negative/positive ratio so that the one-object-in-464-bins imbalance does
not collapse the network onto the all-zero answer.
"""

import csv
import math
from dataclasses import dataclass, field, fields, replace

import numpy as np

from .errors import ConfigError, NumericError, UnusableDataset
from .metrics import postprocess_scores, r_scores
from .nn import AdamState, adam_step
from .student import (
    DEFAULT_CROP_OFFSET,
    StudentModel,
    crop_azimuth,
    parameter_list,
    stack_input,
    student_backward_batch,
    student_forward_batch,
)

HISTORY_COLUMNS = ("epoch", "train_loss", "val_loss", "val_r0", "val_r1")


@dataclass
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    batch_size: int = 16
    max_epochs: int = 60
    early_stop_patience: int = 5
    split_fractions: tuple = (0.7, 0.2, 0.1)
    rng_seed: int = 0
    per_frame_weight: bool = False

    def __post_init__(self):
        if self.lr < 0:
            raise ConfigError("lr must be >= 0")
        if not 0.0 <= self.beta1 < 1.0 or not 0.0 <= self.beta2 < 1.0:
            raise ConfigError("betas must lie in [0, 1)")
        if self.epsilon <= 0:
            raise ConfigError("epsilon must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.max_epochs < 1:
            raise ConfigError("max_epochs must be >= 1")
        if self.early_stop_patience < 1:
            raise ConfigError("early_stop_patience must be >= 1")
        self.split_fractions = tuple(float(f) for f in self.split_fractions)
        if len(self.split_fractions) != 3 or any(f <= 0 for f in self.split_fractions):
            raise ConfigError("split_fractions must be three positive numbers")
        if abs(sum(self.split_fractions) - 1.0) > 1e-6:
            raise ConfigError("split_fractions must sum to 1")

    @classmethod
    def from_dict(cls, data):
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"unknown training config fields: {sorted(unknown)}")
        return cls(**data)


@dataclass
class LabeledSample:
    """One admitted training frame: cropped map window, binary target,
    and the positive-bin weight used by the loss."""

    window: np.ndarray
    target: np.ndarray
    weight_pos: float


def selective_filter(labels):
    """Indices of frames the teacher both labeled and found something in."""
    return [i for i, lab in enumerate(labels)
            if lab is not None and int(np.sum(lab)) >= 1]


def positive_weight(targets):
    """Global negative/positive bin count ratio over the whole target set."""
    total = sum(int(np.asarray(t).size) for t in targets)
    positives = sum(int(np.sum(t)) for t in targets)
    if positives == 0:
        raise UnusableDataset("no positive bins anywhere; loss weight undefined")
    return (total - positives) / positives


def build_samples(maps, labels, crop_offset=DEFAULT_CROP_OFFSET,
                  per_frame_weight=False):
    """Apply the selective filter and crop retained frames into samples."""
    if len(maps) != len(labels):
        raise ConfigError(f"{len(maps)} maps but {len(labels)} labels")
    kept = selective_filter(labels)
    retained = [np.asarray(labels[i], dtype=np.uint8) for i in kept]
    if not per_frame_weight:
        shared = positive_weight(retained) if retained else 0.0
    samples = []
    for i, target in zip(kept, retained):
        weight = positive_weight([target]) if per_frame_weight else shared
        samples.append(LabeledSample(crop_azimuth(maps[i], crop_offset),
                                     target, weight))
    return samples


def _weight_matrix(target, weight_pos):
    weight = np.asarray(weight_pos, dtype=np.float64)
    if weight.ndim == 1:
        weight = weight[:, None]
    elif weight.ndim != 0:
        raise ConfigError("weight must be a scalar or one value per frame")
    return np.where(target != 0, weight, 1.0)


def wmse(predicted, target, weight_pos):
    """Mean over all bins of w * (prediction - target)^2, w = weight_pos on
    positive bins and 1 elsewhere."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ConfigError(
            f"prediction shape {predicted.shape} != target shape {target.shape}")
    w = _weight_matrix(target, weight_pos)
    return float(np.mean(w * (predicted - target) ** 2))


def wmse_gradient(predicted, target, weight_pos):
    """d(wmse)/d(predicted): 2 w (prediction - target) / element count."""
    predicted = np.asarray(predicted, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if predicted.shape != target.shape:
        raise ConfigError(
            f"prediction shape {predicted.shape} != target shape {target.shape}")
    w = _weight_matrix(target, weight_pos)
    return 2.0 * w * (predicted - target) / predicted.size


def split_drives(n_drives, fractions, seed):
    """Assign whole drives to train/val/test so adjacent frames never leak
    across the split."""
    fractions = tuple(float(f) for f in fractions)
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-6:
        raise ConfigError("split fractions must be three numbers summing to 1")
    order = np.random.default_rng(seed).permutation(n_drives)
    n_train = int(round(fractions[0] * n_drives))
    n_val = int(round(fractions[1] * n_drives))
    train = sorted(int(i) for i in order[:n_train])
    val = sorted(int(i) for i in order[n_train:n_train + n_val])
    test = sorted(int(i) for i in order[n_train + n_val:])
    return train, val, test


def _clone_model(model):
    layers = [replace(layer, kernel=layer.kernel.copy(), bias=layer.bias.copy())
              for layer in model.layers]
    return StudentModel(layers=layers, crop_offset=model.crop_offset)


def _forward_in_batches(samples, model, batch_size):
    chunks = []
    for start in range(0, len(samples), batch_size):
        batch = samples[start:start + batch_size]
        x = np.stack([stack_input(s.window) for s in batch])
        chunks.append(student_forward_batch(x, model))
    return np.concatenate(chunks, axis=0)


def train_student(train_samples, val_samples, model, config):
    """Adam on the weighted MSE with early stopping on validation loss.

    Returns (model at the best validation epoch, per-epoch history rows).
    The input model is left untouched.
    """
    if not train_samples:
        raise UnusableDataset("no training samples after selective filtering")
    if not val_samples:
        raise UnusableDataset("no validation samples after selective filtering")
    work = _clone_model(model)
    params = parameter_list(work)
    optimizer = AdamState(lr=config.lr, beta1=config.beta1, beta2=config.beta2,
                          epsilon=config.epsilon)
    rng = np.random.default_rng(config.rng_seed)

    val_targets = np.stack([s.target for s in val_samples]).astype(np.float64)
    val_weights = np.array([s.weight_pos for s in val_samples])

    history = []
    best_loss = math.inf
    best_params = None
    bad_epochs = 0
    for epoch in range(config.max_epochs):
        order = rng.permutation(len(train_samples))
        loss_sum = 0.0
        for start in range(0, len(order), config.batch_size):
            batch = [train_samples[i] for i in order[start:start + config.batch_size]]
            x = np.stack([stack_input(s.window) for s in batch])
            targets = np.stack([s.target for s in batch]).astype(np.float64)
            weights = np.array([s.weight_pos for s in batch])
            probs, caches = student_forward_batch(x, model=work, keep_caches=True)
            loss = wmse(probs, targets, weights)
            loss_sum += loss * len(batch)
            grad = wmse_gradient(probs.astype(np.float64), targets, weights)
            grads = student_backward_batch(work, caches, grad.astype(np.float32))
            adam_step(params, grads, optimizer)
        train_loss = loss_sum / len(train_samples)
        if not math.isfinite(train_loss):
            raise NumericError(f"training loss diverged at epoch {epoch}: {train_loss}")

        val_probs = _forward_in_batches(val_samples, work, config.batch_size)
        val_loss = wmse(val_probs.astype(np.float64), val_targets, val_weights)
        # same decision rule the deployed student uses, so these numbers are
        # directly comparable with downstream evaluation
        val_detections = np.stack([postprocess_scores(p, 0.5) for p in val_probs])
        r0, r1 = r_scores(val_targets, val_detections)
        history.append({"epoch": epoch, "train_loss": train_loss,
                        "val_loss": val_loss, "val_r0": r0, "val_r1": r1})

        if val_loss < best_loss:
            best_loss = val_loss
            best_params = [p.copy() for p in params]
            bad_epochs = 0
        else:
            bad_epochs += 1
            if bad_epochs >= config.early_stop_patience:
                break

    for p, best in zip(params, best_params):
        p[...] = best
    return work, history


def write_history(path, history):
    """Append-free CSV dump of the per-epoch training history."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=HISTORY_COLUMNS)
        writer.writeheader()
        writer.writerows(history)
