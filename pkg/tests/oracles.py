"""Independent oracles used by the test suite.

Everything here recomputes expected values from first principles (finite
differences, dense grids, closed forms) without touching the code paths
under test, so an agreement is meaningful evidence.
"""

from __future__ import annotations

import numpy as np

from fedgtst.models import Batch, ModelSpec, loss


def fd_gradient(spec: ModelSpec, w: np.ndarray, batch: Batch, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of the batch loss, coordinate by coordinate."""
    g = np.zeros_like(w)
    for i in range(len(w)):
        h = rel_step * max(1.0, abs(w[i]))
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (loss(spec, w + e, batch) - loss(spec, w - e, batch)) / (2.0 * h)
    return g


def fd_gradient_of(fn, w: np.ndarray, rel_step: float = 1e-6) -> np.ndarray:
    """Central-difference gradient of an arbitrary scalar function of w."""
    g = np.zeros_like(w)
    for i in range(len(w)):
        h = rel_step * max(1.0, abs(w[i]))
        e = np.zeros_like(w)
        e[i] = h
        g[i] = (fn(w + e) - fn(w - e)) / (2.0 * h)
    return g


def grid_sup_loss_gap(spec: ModelSpec, b1: Batch, b2: Batch, radius: float, points: int = 20001) -> float:
    """Dense grid search for sup |L1(w) - L2(w)| over a 1-parameter model."""
    assert spec.total_dim == 1
    best = 0.0
    for w0 in np.linspace(-radius, radius, points):
        w = np.array([w0])
        best = max(best, abs(loss(spec, w, b1) - loss(spec, w, b2)))
    return best


def least_squares_head_inf(x: np.ndarray, y: np.ndarray) -> float:
    """inf_w mean (w x - y)^2 for a 1-d no-bias linear head, closed form."""
    sxx = float(np.sum(x * x))
    if sxx == 0.0:
        return float(np.mean(y * y))
    w = float(np.sum(x * y)) / sxx
    return float(np.mean((w * x - y) ** 2))


def random_batch(spec: ModelSpec, rng: np.random.Generator, n: int = 12) -> Batch:
    x = rng.standard_normal((n, spec.input_dim))
    if spec.is_classifier:
        y = rng.integers(0, spec.num_classes, size=n)
    else:
        y = rng.standard_normal(n)
    return Batch(x, y)
