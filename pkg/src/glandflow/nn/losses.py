"""Losses returning (mean value, gradient wrt logits)."""

import numpy as np


def softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits, targets, weights=None):
    """Mean log-sum-exp cross-entropy over rows of ``logits`` (N, C).

    With ``weights`` the mean becomes sum(w_i * loss_i) / sum(w_i).
    """
    logits = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    targets = np.atleast_1d(np.asarray(targets))
    n, c = logits.shape
    if targets.shape != (n,):
        raise ValueError("one target per row required")
    if np.any(targets < 0) or np.any(targets >= c):
        raise ValueError(f"target index out of range for {c} classes")
    if not np.all(np.isfinite(logits)):
        raise ValueError("logits must be finite")
    shift = logits.max(axis=1, keepdims=True)
    z = logits - shift
    lse = np.log(np.exp(z).sum(axis=1))
    rows = np.arange(n)
    per_row = lse - z[rows, targets]
    grad = softmax(logits)
    grad[rows, targets] -= 1.0
    if weights is None:
        return float(np.mean(per_row)), grad / n
    weights = np.asarray(weights, dtype=np.float64)
    total = weights.sum()
    if weights.shape != (n,) or np.any(weights < 0) or not total > 0:
        raise ValueError("weights must be one non-negative value per row with a positive sum")
    return float((weights * per_row).sum() / total), grad * (weights / total)[:, None]


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_cross_entropy(logits, targets):
    """Mean binary cross-entropy on logits; targets in [0, 1], same shape."""
    logits = np.asarray(logits, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if logits.shape != targets.shape:
        raise ValueError("logits and targets must have the same shape")
    # log(1 + exp(-|x|)) + max(x, 0) - x*t
    loss = np.logaddexp(0.0, -np.abs(logits)) + np.maximum(logits, 0.0) - logits * targets
    return float(loss.mean()), (sigmoid(logits) - targets) / logits.size
