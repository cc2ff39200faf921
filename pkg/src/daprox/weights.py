"""Global inverse-density weights and policy-localized bridge weights."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import Dataset, TreatmentSupport
from .density import PropensityModel, eval_gps
from .numerics import trunc_gaussian


@dataclass(frozen=True, eq=False)
class WeightVector:
    values: np.ndarray
    tag: str = "initial"

    def __post_init__(self):
        v = np.array(self.values, dtype=float).ravel()
        if not (np.isfinite(v).all() and (v > 0).all()):
            raise ValueError("weights must be finite and strictly positive")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    def __len__(self):
        return self.values.shape[0]

    def subset(self, idx) -> "WeightVector":
        return WeightVector(self.values[np.asarray(idx)], self.tag)

    @classmethod
    def ones(cls, n: int) -> "WeightVector":
        return cls(np.ones(n), "uniform")


def _check_support(gps: PropensityModel, dataset: Dataset, support: TreatmentSupport):
    if support != dataset.support:
        raise ValueError(f"support mismatch: dataset has {dataset.support}, got {support}")
    if gps.x_train.shape[1] != dataset.x.shape[1]:
        raise ValueError("propensity model was fitted on covariates of a different width")


def initial_weights(gps: PropensityModel, dataset: Dataset, support: TreatmentSupport | None = None) -> WeightVector:
    """``1 / ((c_plus - c_minus) p(A_i | X_i))``."""
    support = dataset.support if support is None else support
    _check_support(gps, dataset, support)
    dens = eval_gps(gps, dataset.a, dataset.x)
    return WeightVector(1.0 / (support.width * dens), "initial")


def policy_weights(gps: PropensityModel, dataset: Dataset, pseudo_policy, lam: float, tau: float,
                   support: TreatmentSupport | None = None, tag: str = "policy") -> WeightVector:
    """Global weight times ``1 + lam * K((pi_i - A_i) / tau)``, K truncated Gaussian."""
    support = dataset.support if support is None else support
    _check_support(gps, dataset, support)
    if not tau > 0:
        raise ValueError(f"tau must be positive, got {tau}")
    if lam < 0:
        raise ValueError(f"lambda must be nonnegative, got {lam}")
    pi = np.asarray(pseudo_policy, float).ravel()
    if pi.shape[0] != dataset.n:
        raise ValueError(f"pseudo-policy has {pi.shape[0]} entries, dataset has {dataset.n}")
    if not support.contains(pi).all():
        raise ValueError("pseudo-policy outside treatment support")
    dens = eval_gps(gps, dataset.a, dataset.x)
    local = 1.0 + lam * trunc_gaussian((pi - dataset.a) / tau)
    return WeightVector(local / (support.width * dens), tag)


def localized_surface_loss(surface_error, a, pi, tau: float, density) -> float:
    """Empirical kernel-localized loss ``mean K((pi - A)/tau) / (tau p(A|X)) * G(X, A)``.

    ``surface_error`` holds ``G(X_i, A_i)``; ``density`` holds ``p(A_i | X_i)``.
    """
    k = trunc_gaussian((np.asarray(pi, float) - np.asarray(a, float)) / tau)
    return float(np.mean(k / (tau * np.asarray(density, float)) * np.asarray(surface_error, float)))
