"""Alternating decision-aware bridge fitting.

Each round fits cross-fitted bridges under the current weights, projects them
to a response surface, reads off per-observation pseudo-optimal treatments and
builds the next round's localized weights from them. A last full-sample refit
uses the final weights.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

from .core import Dataset, RngState, make_treatment_grid, split_folds
from .density import PropensityModel
from .policy import GridSurface, SurfaceParams, fit_surface, policy_from_panel, pseudo_outcomes
from .solvers import BridgeModel, PmmrParams, SolverError, fit_bridge
from .weights import WeightVector, initial_weights, policy_weights

logger = logging.getLogger(__name__)


class RoundError(RuntimeError):
    def __init__(self, round_index, cause):
        super().__init__(f"round {round_index}: {cause}")
        self.round_index = round_index


@dataclass(frozen=True)
class DaConfig:
    lam: float = 2.0
    tau: float = 0.2
    n_rounds: int = 3
    folds: int = 2
    solver: object = field(default_factory=PmmrParams)
    surface: SurfaceParams = field(default_factory=SurfaceParams)
    # "ipw" starts from global inverse-density weights, "uniform" from ones
    initial: str = "ipw"

    def __post_init__(self):
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        if self.lam < 0:
            raise ValueError("lambda must be nonnegative")
        if self.n_rounds < 0:
            raise ValueError("n_rounds must be >= 0")
        if self.folds < 2:
            raise ValueError("need at least 2 folds")
        if self.initial not in ("ipw", "uniform"):
            raise ValueError("initial weighting must be 'ipw' or 'uniform'")


@dataclass(eq=False)
class DaResult:
    bridge: BridgeModel
    surface: GridSurface
    weights: list  # omega^(0) .. omega^(n_rounds)
    policies: list  # pi^(0) .. pi^(n_rounds - 1) on training rows
    final_policy: np.ndarray
    change_fraction: list = field(default_factory=list)

    @property
    def n_rounds(self) -> int:
        return len(self.policies)

    def diagnostics(self) -> dict:
        return {
            "n_rounds": self.n_rounds,
            "policy_change_fraction": [float(c) for c in self.change_fraction],
            "weight_mean": [float(w.values.mean()) for w in self.weights],
            "weight_max_over_min": [float(w.values.max() / w.values.min()) for w in self.weights],
        }


def _project(dataset, config, weights, grid, rng):
    folds = split_folds(dataset.n, config.folds, rng.stream("folds"))
    table = pseudo_outcomes(dataset, config.solver, weights, folds, grid, rng.child("solver"))
    surface = fit_surface(table, dataset.x, config.surface, rng.child("surface"))
    return surface, policy_from_panel(surface.on_grid(grid, dataset.x), grid)


def run_da(dataset: Dataset, gps: PropensityModel | None, config: DaConfig, rng: RngState) -> DaResult:
    grid = make_treatment_grid(dataset.support)
    if config.initial == "ipw":
        if gps is None:
            raise ValueError("inverse-density initialization needs a propensity model")
        weights = initial_weights(gps, dataset)
    else:
        weights = WeightVector.ones(dataset.n)
    history, policies, changes = [weights], [], []
    for s in range(config.n_rounds):
        try:
            _, pi = _project(dataset, config, weights, grid, rng.child("round", s))
            weights = policy_weights(gps, dataset, pi, config.lam, config.tau, tag=f"round {s + 1}") \
                if gps is not None else _uniform_policy_weights(dataset, pi, config)
        except (SolverError, ValueError, np.linalg.LinAlgError) as exc:
            raise RoundError(s, exc) from exc
        if policies:
            changes.append(float(np.mean(pi != policies[-1])))
        policies.append(pi)
        history.append(weights)
        logger.info("round %d: weight range [%.3g, %.3g]", s, weights.values.min(), weights.values.max())

    final_rng = rng.child("final")
    try:
        bridge = fit_bridge(dataset, weights.values, config.solver, final_rng.child("refit"))
        bridge.train_index = np.arange(dataset.n)
        surface, final_pi = _project(dataset, config, weights, grid, final_rng)
    except (SolverError, ValueError, np.linalg.LinAlgError) as exc:
        raise RoundError(config.n_rounds, exc) from exc
    return DaResult(bridge, surface, history, policies, final_pi, changes)


def _uniform_policy_weights(dataset, pi, config):
    from .numerics import trunc_gaussian

    return WeightVector(1.0 + config.lam * trunc_gaussian((pi - dataset.a) / config.tau), "policy")
