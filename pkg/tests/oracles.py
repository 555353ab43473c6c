"""Independent brute-force references used only by the tests.

These deliberately share no code with the package: finite differences for
gradients, all-pairs counting for AUC, trapezoidal ROC integration, and a
counting checker for the balanced resampler.
"""

import numpy as np


def fd_gradient(f, theta, h=1e-4):
    """Central-difference gradient of a scalar function of a flat vector."""
    theta = np.asarray(theta, dtype=np.float64)
    grad = np.zeros_like(theta)
    for i in range(theta.size):
        step = np.zeros_like(theta)
        step[i] = h
        grad[i] = (f(theta + step) - f(theta - step)) / (2.0 * h)
    return grad


def fd_param_gradient(loss_fn, arr, h=1e-4):
    """Central differences over every entry of an ndarray parameter, where
    loss_fn() re-evaluates the loss using the (mutated) array in place."""
    grad = np.zeros_like(arr)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + h
        fp = loss_fn()
        flat[i] = old - h
        fm = loss_fn()
        flat[i] = old
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def auc_bruteforce(scores, labels):
    """All-pairs Mann-Whitney statistic, O(P*N)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    pos = scores[labels == 1]
    neg = scores[labels == 0]
    if pos.size == 0 or neg.size == 0:
        raise ValueError("AUC undefined for single-class input")
    wins = ties = 0
    for p in pos:
        for n in neg:
            if p > n:
                wins += 1
            elif p == n:
                ties += 1
    return (wins + 0.5 * ties) / (pos.size * neg.size)


def roc_trapezoid(scores, labels):
    """Area under the empirical ROC curve by trapezoidal integration over all
    distinct thresholds (ties produce diagonal segments)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).ravel()
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUC undefined for single-class input")
    points = [(0.0, 0.0)]
    for thr in sorted(set(scores), reverse=True):
        picked = scores >= thr
        tpr = (picked & (labels == 1)).sum() / n_pos
        fpr = (picked & (labels == 0)).sum() / n_neg
        points.append((fpr, tpr))
    points.append((1.0, 1.0))
    area = 0.0
    for (x0, y0), (x1, y1) in zip(points, points[1:]):
        area += (x1 - x0) * (y0 + y1) / 2.0
    return area


def stream_counts(batches):
    """Count per-example and per-source occurrences in an emitted epoch of
    (path, label, source) record batches."""
    per_example = {}
    per_source = {}
    total = 0
    for batch in batches:
        for path, _, source in batch:
            per_example[path] = per_example.get(path, 0) + 1
            per_source[source] = per_source.get(source, 0) + 1
            total += 1
    return per_example, per_source, total
