"""Generalized propensity score p(a | x) by Nadaraya-Watson conditional KDE."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset
from .numerics import median_heuristic, sq_dists

_SQRT_2PI = np.sqrt(2.0 * np.pi)


@dataclass(frozen=True, eq=False)
class PropensityModel:
    a_train: np.ndarray
    x_train: np.ndarray
    x_bandwidth: float
    a_bandwidth: float
    p_min: float

    def __post_init__(self):
        if not (self.x_bandwidth > 0 and self.a_bandwidth > 0):
            raise ValueError("bandwidths must be positive")
        if not self.p_min > 0:
            raise ValueError("p_min must be positive")

    def __call__(self, a, x) -> np.ndarray:
        return eval_gps(self, a, x)


def fit_gps(dataset: Dataset, x_bandwidth="auto", a_bandwidth="auto", p_min: float | None = None) -> PropensityModel:
    """Store the training sample and pick bandwidths.

    ``"auto"`` uses the median heuristic on ``x`` and Silverman's rule on ``a``.
    ``p_min`` defaults to ``0.05 / (c_plus - c_minus)``.
    """
    if dataset.n < 5:
        raise ValueError(f"need at least 5 observations to fit the propensity model, got {dataset.n}")
    a = np.array(dataset.a, float)
    x = np.array(dataset.x, float)
    if isinstance(a_bandwidth, str):
        sd = float(np.std(a, ddof=1))
        a_bandwidth = 1.06 * sd * dataset.n ** (-0.2)
        if sd <= 1e-12 * max(1.0, float(np.abs(a).max())):
            raise ValueError("degenerate treatment: Silverman bandwidth is zero")
    if isinstance(x_bandwidth, str):
        x_bandwidth = median_heuristic(x)
    if x_bandwidth <= 0 or a_bandwidth <= 0:
        raise ValueError("bandwidths must be positive")
    if p_min is None:
        p_min = 0.05 / dataset.support.width
    return PropensityModel(a, x, float(x_bandwidth), float(a_bandwidth), float(p_min))


def eval_gps(model: PropensityModel, a, x) -> np.ndarray:
    """Floored conditional density at query pairs ``(a_j, x_j)``.

    Scalar ``a`` with a single row ``x`` gives a scalar.
    """
    a_q = np.atleast_1d(np.asarray(a, float))
    x_q = np.asarray(x, float)
    scalar = np.ndim(a) == 0 and x_q.ndim <= 1
    x_q = x_q.reshape(a_q.shape[0], -1)
    if not (np.isfinite(a_q).all() and np.isfinite(x_q).all()):
        raise ValueError("non-finite query")
    out = np.empty(a_q.shape[0])
    hx, ha = model.x_bandwidth, model.a_bandwidth
    for start in range(0, a_q.shape[0], 2048):
        sl = slice(start, start + 2048)
        log_kx = -0.5 * sq_dists(x_q[sl] / hx, model.x_train / hx)
        log_kx -= log_kx.max(axis=1, keepdims=True)
        kx = np.exp(log_kx)
        ka = np.exp(-0.5 * ((a_q[sl, None] - model.a_train[None, :]) / ha) ** 2) / (_SQRT_2PI * ha)
        out[sl] = np.sum(kx * ka, axis=1) / np.sum(kx, axis=1)
    out = np.maximum(out, model.p_min)
    return float(out[0]) if scalar else out
