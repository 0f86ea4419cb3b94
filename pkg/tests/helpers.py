"""Independent reference implementations used as test oracles.

Everything in here is deliberately written the slow, obvious way (explicit
loops, per-element counting) so it cannot share a bug with the vectorized
implementations under test.
"""

import numpy as np


def naive_conv2d(x, kernel, bias, stride, padding):
    """Direct 6-nested-loop cross-correlation with zero padding.

    x: [C, H, W], kernel: [outC, C, kH, kW], bias: [outC].
    Returns [outC, H', W'] in float64, no activation.
    """
    c, h, w = x.shape
    out_c, in_c, kh, kw = kernel.shape
    assert c == in_c
    sh, sw = stride
    ph, pw = padding
    xp = np.zeros((c, h + 2 * ph, w + 2 * pw), dtype=np.float64)
    xp[:, ph:ph + h, pw:pw + w] = x
    ho = (h + 2 * ph - kh) // sh + 1
    wo = (w + 2 * pw - kw) // sw + 1
    out = np.zeros((out_c, ho, wo), dtype=np.float64)
    for oc in range(out_c):
        for i in range(ho):
            for j in range(wo):
                acc = float(bias[oc])
                for ic in range(c):
                    for ki in range(kh):
                        for kj in range(kw):
                            acc += xp[ic, i * sh + ki, j * sw + kj] * kernel[oc, ic, ki, kj]
                out[oc, i, j] = acc
    return out


def fd_gradient(f, x, h=1e-5):
    """Central finite-difference gradient of scalar f at x (float64)."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x)
        flat[i] = orig - h
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def max_rel_error(analytic, numeric, floor=1e-6):
    """max |a - n| / max(|a|, |n|, floor) over all elements."""
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return float(np.max(np.abs(a - n) / denom))


def oracle_r_scores(y, yhat):
    """Per-element counting version of the recall scores.

    y, yhat: [N, M] binary arrays (stacked frames). Returns (r0, r1),
    each None when there are no true positives to score.
    """
    y = np.atleast_2d(np.asarray(y))
    yhat = np.atleast_2d(np.asarray(yhat))
    n_frames, m = y.shape
    positives = 0
    hit0 = 0
    hit1 = 0
    for i in range(n_frames):
        for j in range(m):
            if y[i, j] != 1:
                continue
            positives += 1
            if yhat[i, j] == 1:
                hit0 += 1
            neighborhood = [t for t in (j - 1, j, j + 1) if 0 <= t < m]
            if any(yhat[i, t] == 1 for t in neighborhood):
                hit1 += 1
    if positives == 0:
        return None, None
    return hit0 / positives, hit1 / positives


def oracle_p_scores(y, yhat):
    """Counting version of the modified precision scores."""
    y = np.atleast_2d(np.asarray(y))
    yhat = np.atleast_2d(np.asarray(yhat))
    n_frames, m = y.shape
    predicted = 0
    tp0 = 0
    tp1 = 0
    for i in range(n_frames):
        for j in range(m):
            if yhat[i, j] != 1:
                continue
            predicted += 1
            if y[i, j] == 1:
                tp0 += 1
            neighborhood = [t for t in (j - 1, j, j + 1) if 0 <= t < m]
            if any(y[i, t] == 1 for t in neighborhood):
                tp1 += 1
    if predicted == 0:
        return None, None
    return tp0 / predicted, tp1 / predicted


def oracle_specificity(y, yhat):
    """Counting version of tn / (tn + fp)."""
    y = np.atleast_2d(np.asarray(y))
    yhat = np.atleast_2d(np.asarray(yhat))
    n_frames, m = y.shape
    negatives = 0
    tn = 0
    for i in range(n_frames):
        for j in range(m):
            if y[i, j] != 0:
                continue
            negatives += 1
            if yhat[i, j] == 0:
                tn += 1
    if negatives == 0:
        return None
    return tn / negatives
