"""Detection metrics and runtime benchmarking.

Recall/precision variants operate per range bin over stacked frames. The
"1" variants grant a +/-1 range-bin allowance by taking the maximum over
each bin's surviving neighbors (boundary bins use only in-range ones).
Undefined ratios (0/0) are reported as None, never silently as 0 or 1.
"""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, NumericError


def _as_stacked_pair(y, yhat):
    y = np.atleast_2d(np.asarray(y))
    yhat = np.atleast_2d(np.asarray(yhat))
    if y.shape != yhat.shape:
        raise ConfigError(f"label shape {y.shape} != prediction shape {yhat.shape}")
    return (y != 0).astype(np.int64), (yhat != 0).astype(np.int64)


def neighborhood_max(x):
    """Per-row max over {j-1, j, j+1}, edges using only in-range neighbors."""
    x = np.atleast_2d(np.asarray(x))
    out = x.copy()
    np.maximum(out[:, :-1], x[:, 1:], out=out[:, :-1])
    np.maximum(out[:, 1:], x[:, :-1], out=out[:, 1:])
    return out


def postprocess_scores(scores, threshold):
    """Threshold a probability vector, then keep only the nearest-range bin
    of each run of adjacent detections."""
    detections = np.asarray(scores) >= threshold
    label = np.zeros(detections.size, dtype=np.uint8)
    starts = np.flatnonzero(detections & ~np.concatenate(([False], detections[:-1])))
    label[starts] = 1
    return label


def r_scores(y, yhat):
    """(exact recall, recall with +/-1 bin allowance); None when no positives."""
    y, yhat = _as_stacked_pair(y, yhat)
    positives = int(y.sum())
    if positives == 0:
        return None, None
    r0 = int((y * yhat).sum()) / positives
    r1 = int((y * neighborhood_max(yhat)).sum()) / positives
    return r0, r1


def p_scores(y, yhat):
    """(exact precision, precision with +/-1 bin allowance); None when no predictions."""
    y, yhat = _as_stacked_pair(y, yhat)
    predicted = int(yhat.sum())
    if predicted == 0:
        return None, None
    p0 = int((y * yhat).sum()) / predicted
    p1 = int((neighborhood_max(y) * yhat).sum()) / predicted
    return p0, p1


def specificity(y, yhat):
    """tn / (tn + fp) per bin; None when there are no true negatives to score."""
    y, yhat = _as_stacked_pair(y, yhat)
    negatives = int((1 - y).sum())
    if negatives == 0:
        return None
    tn = int(((1 - y) * (1 - yhat)).sum())
    return tn / negatives


def score_detections(labels, predictions):
    """Apply the evaluation restrictions and compute all five ratio metrics.

    labels: per-frame teacher label vectors, None where the teacher
    abstained. predictions: per-frame binary vectors (must be present for
    every labeled frame). Recall is computed over all labeled frames;
    precision and specificity only over labeled frames with at least one
    positive bin.
    """
    if len(labels) != len(predictions):
        raise ConfigError("labels and predictions must pair one-to-one")
    kept_y = []
    kept_yhat = []
    for i, label in enumerate(labels):
        if label is None:
            continue
        if predictions[i] is None:
            raise ConfigError(f"frame {i} is labeled but has no prediction")
        kept_y.append(np.asarray(label))
        kept_yhat.append(np.asarray(predictions[i]))
    scores = {
        "r0": None, "r1": None, "p0": None, "p1": None, "specificity": None,
        "frames_evaluated": len(kept_y),
        "frames_skipped": len(labels) - len(kept_y),
    }
    if not kept_y:
        return scores
    y = np.stack(kept_y)
    yhat = np.stack(kept_yhat)
    scores["r0"], scores["r1"] = r_scores(y, yhat)
    positive_rows = y.any(axis=1)
    if positive_rows.any():
        yp, yhatp = y[positive_rows], yhat[positive_rows]
        scores["p0"], scores["p1"] = p_scores(yp, yhatp)
        scores["specificity"] = specificity(yp, yhatp)
    return scores


def first_detection_range(ground_truths, predictions, geometry,
                          sustain=3, tolerance_bins=1):
    """Range (meters) at which a detector first holds onto the target.

    A frame counts as a hit when any predicted bin lies within
    tolerance_bins of a ground-truth bin; the detection must persist for
    `sustain` consecutive frames. Returns the target's range at the first
    frame of that streak, or 0.0 if it never happens.
    """
    if len(ground_truths) != len(predictions):
        raise ConfigError("ground truth and predictions must pair one-to-one")
    if sustain < 1:
        raise ConfigError("sustain must be >= 1")
    hits = []
    for gt, pred in zip(ground_truths, predictions):
        gt = np.atleast_2d(np.asarray(gt))
        if pred is None or not gt.any():
            hits.append(False)
            continue
        dilated = gt
        for _ in range(tolerance_bins):
            dilated = neighborhood_max(dilated)
        hits.append(bool((dilated[0] * np.asarray(pred)).any()))
    for i in range(len(hits) - sustain + 1):
        if all(hits[i:i + sustain]):
            bins = np.flatnonzero(np.asarray(ground_truths[i]))
            center = int(round(float(bins.mean())))
            return center * geometry.range_resolution
    return 0.0


@dataclass
class LatencyStats:
    mean_ms: float
    median_ms: float
    p95_ms: float
    calls: int


def bench(fn, inputs, repetitions=1, warmup=1):
    """Per-call wall-clock stats for fn over inputs, warm-up passes excluded."""
    if repetitions < 1:
        raise ConfigError("repetitions must be >= 1")
    if warmup < 0:
        raise ConfigError("warmup must be >= 0")
    if not inputs:
        raise ConfigError("bench needs at least one input")
    for _ in range(warmup):
        for item in inputs:
            fn(item)
    samples = []
    for _ in range(repetitions):
        for item in inputs:
            start = time.perf_counter()
            fn(item)
            samples.append((time.perf_counter() - start) * 1000.0)
    arr = np.asarray(samples)
    return LatencyStats(mean_ms=float(arr.mean()), median_ms=float(np.median(arr)),
                        p95_ms=float(np.percentile(arr, 95)), calls=len(samples))


@dataclass
class EvalReport:
    """One run's worth of Table-style results."""

    r0: float | None
    r1: float | None
    p0: float | None
    p1: float | None
    specificity: float | None
    student_max_range: float | None = None
    teacher_max_range: float | None = None
    student_mean_latency_ms: float | None = None
    teacher_mean_latency_ms: float | None = None
    frames_evaluated: int = 0
    frames_skipped: int = 0

    def __post_init__(self):
        if self.r0 is not None and self.r1 is not None and self.r1 < self.r0 - 1e-12:
            raise NumericError("impossible report: r1 < r0")
        if self.p0 is not None and self.p1 is not None and self.p1 < self.p0 - 1e-12:
            raise NumericError("impossible report: p1 < p0")

    @property
    def speedup_factor(self):
        if not self.student_mean_latency_ms or self.teacher_mean_latency_ms is None:
            return None
        return self.teacher_mean_latency_ms / self.student_mean_latency_ms

    def to_dict(self):
        d = dataclasses.asdict(self)
        d["speedup_factor"] = self.speedup_factor
        return d


def _fmt(value, unit=""):
    if value is None:
        return "n/a"
    return f"{value:.4f}{unit}" if isinstance(value, float) else f"{value}{unit}"


def render_table(report, title="evaluation"):
    rows = [
        ("R0", _fmt(report.r0)),
        ("R1", _fmt(report.r1)),
        ("P0", _fmt(report.p0)),
        ("P1", _fmt(report.p1)),
        ("specificity", _fmt(report.specificity)),
        ("student max range", _fmt(report.student_max_range, " m")),
        ("teacher max range", _fmt(report.teacher_max_range, " m")),
        ("student mean latency", _fmt(report.student_mean_latency_ms, " ms")),
        ("teacher mean latency", _fmt(report.teacher_mean_latency_ms, " ms")),
        ("speedup", _fmt(report.speedup_factor, "x")),
        ("frames evaluated", _fmt(report.frames_evaluated)),
        ("frames skipped", _fmt(report.frames_skipped)),
    ]
    width = max(len(name) for name, _ in rows)
    lines = [f"[{title}]"]
    lines += [f"  {name.ljust(width)}  {value}" for name, value in rows]
    return "\n".join(lines)
