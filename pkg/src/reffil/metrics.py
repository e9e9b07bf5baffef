"""Continual-learning metrics over the after-task accuracy matrix.

``a[i][j]`` is the accuracy on task ``j`` after finishing task ``i`` (0-based
here, ``j <= i``). Inputs may be ragged lower-triangular lists or square arrays
whose upper triangle is ignored.
"""

from __future__ import annotations

import numpy as np


def as_matrix(a) -> np.ndarray:
    """Square float array with NaN above the diagonal; validates entries."""
    if isinstance(a, np.ndarray) and a.ndim == 2:
        t = a.shape[0]
        if a.shape != (t, t):
            raise ValueError("accuracy matrix must be square")
        m = np.array(a, dtype=np.float64)
        m[np.triu_indices(t, 1)] = np.nan
    else:
        rows = [list(r) for r in a]
        t = len(rows)
        m = np.full((t, t), np.nan)
        for i, row in enumerate(rows):
            if len(row) < i + 1:
                raise ValueError(f"row {i} needs {i + 1} entries, has {len(row)}")
            m[i, : i + 1] = row[: i + 1]
    if t == 0:
        raise ValueError("empty accuracy matrix")
    low = m[np.tril_indices(t)]
    if np.any(~np.isfinite(low)) or np.any(low < 0) or np.any(low > 1):
        raise ValueError("accuracies must be finite fractions in [0, 1]")
    return m


def avg_accuracy(a) -> float:
    """Mean over learning steps of the mean accuracy on tasks seen so far."""
    m = as_matrix(a)
    return float(np.mean([m[i, : i + 1].mean() for i in range(len(m))]))


def last_accuracy(a) -> float:
    m = as_matrix(a)
    return float(m[-1].mean())


def forgetting(a) -> float:
    """Mean drop from each earlier task's best accuracy to its final accuracy.

    The final row takes part in the max, so a task that ends at its best
    contributes 0 rather than a negative drop.
    """
    m = as_matrix(a)
    t = len(m)
    if t == 1:
        return 0.0
    drops = [m[j:t, j].max() - m[t - 1, j] for j in range(t - 1)]
    return float(np.mean(drops))


def backward_transfer(a) -> float:
    """Mean change on earlier tasks between learning them and the end; negative means forgetting."""
    m = as_matrix(a)
    t = len(m)
    if t == 1:
        return 0.0
    return float(np.mean([m[t - 1, j] - m[j, j] for j in range(t - 1)]))


def summarize(a) -> dict[str, float]:
    return {
        "avg": avg_accuracy(a),
        "last": last_accuracy(a),
        "fgt": forgetting(a),
        "bwt": backward_transfer(a),
    }
