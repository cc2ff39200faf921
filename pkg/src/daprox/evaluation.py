"""Decision-quality and estimation-quality metrics with multi-seed aggregation."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset
from .dgp import OracleCurves
from .policy import grid_inputs
from .solvers import BridgeModel

_GRID_ATOL = 1e-9


@dataclass(eq=False)
class MetricsReport:
    regret: float
    counterfactual_rmse: float
    factual_rmse: float
    policy_value: float
    oracle_value: float
    per_point_regret: np.ndarray = field(default_factory=lambda: np.zeros(0))
    oracle_se: np.ndarray | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.counterfactual_rmse < 0 or self.factual_rmse < 0:
            raise ValueError("RMSE values must be nonnegative")

    def to_dict(self) -> dict:
        return {
            "regret": float(self.regret),
            "counterfactual_rmse": float(self.counterfactual_rmse),
            "factual_rmse": float(self.factual_rmse),
            "policy_value": float(self.policy_value),
            "oracle_value": float(self.oracle_value),
            **{k: float(v) for k, v in self.extra.items()},
        }

    def to_json(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")

    def per_point_csv(self, path) -> None:
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["x_index", "regret"])
            for i, r in enumerate(self.per_point_regret):
                wr.writerow([i, repr(float(r))])


def _grid_index(treatments, grid) -> np.ndarray:
    t = np.asarray(treatments, float).ravel()
    idx = np.clip(np.searchsorted(grid, t), 0, grid.shape[0] - 1)
    # nearest of the two neighbours, then require an exact hit
    left = np.clip(idx - 1, 0, grid.shape[0] - 1)
    idx = np.where(np.abs(grid[left] - t) < np.abs(grid[idx] - t), left, idx)
    off = np.abs(grid[idx] - t) > _GRID_ATOL * max(1.0, float(np.abs(grid).max()))
    if off.any():
        i = int(np.flatnonzero(off)[0])
        raise ValueError(f"treatment {t[i]!r} at test point {i} is not on the oracle grid")
    return idx


def regret(policy_treatments, oracle: OracleCurves):
    """Mean and per-point regret ``m0(a*(x_i), x_i) - m0(pi_i, x_i)`` by grid lookup."""
    idx = _grid_index(policy_treatments, np.asarray(oracle.grid, float))
    if idx.shape[0] != oracle.m0.shape[0]:
        raise ValueError(f"{idx.shape[0]} treatments for {oracle.m0.shape[0]} oracle points")
    rows = np.arange(idx.shape[0])
    per_point = oracle.m0.max(axis=1) - oracle.m0[rows, idx]
    return float(per_point.mean()), per_point


def policy_values(policy_treatments, oracle: OracleCurves):
    """``(V(pi), V(a*))`` as test-point averages of the oracle curves."""
    idx = _grid_index(policy_treatments, np.asarray(oracle.grid, float))
    return float(oracle.m0[np.arange(idx.shape[0]), idx].mean()), float(oracle.m0.max(axis=1).mean())


def panel_rmse(panel, oracle: OracleCurves) -> float:
    panel = np.asarray(panel, float)
    if panel.shape != oracle.m0.shape:
        raise ValueError(f"panel shape {panel.shape} does not match oracle {oracle.m0.shape}")
    return float(np.sqrt(np.mean((panel - oracle.m0) ** 2)))


def counterfactual_rmse(surface, oracle: OracleCurves, x_rows) -> float:
    """RMSE of the surface against the oracle over the full (point x grid) panel."""
    x_rows = np.atleast_2d(np.asarray(x_rows, float))
    if x_rows.shape[0] != oracle.m0.shape[0]:
        raise ValueError(f"{x_rows.shape[0]} covariate rows for {oracle.m0.shape[0]} oracle points")
    return panel_rmse(surface.on_grid(oracle.grid, x_rows), oracle)


def bridge_average_panel(bridge: BridgeModel, w_pool, x_rows, grid, max_pool: int = 200) -> np.ndarray:
    """``mean_j h(a_m, W_j, x_i)`` over a pool of proxy rows.

    Valid as a response estimate when ``W`` is independent of ``X``, as in
    the synthetic benchmark.
    """
    w_pool = np.atleast_2d(np.asarray(w_pool, float))[:max_pool]
    x_rows = np.atleast_2d(np.asarray(x_rows, float))
    grid = np.asarray(grid, float)
    out = np.empty((x_rows.shape[0], grid.shape[0]))
    for i, x in enumerate(x_rows):
        a, w, xr = grid_inputs(grid, w_pool, np.repeat(x[None, :], w_pool.shape[0], axis=0))
        out[i] = bridge.predict(a, w, xr).reshape(w_pool.shape[0], grid.shape[0]).mean(axis=0)
    return out


def factual_rmse(bridge: BridgeModel, dataset: Dataset) -> float:
    pred = bridge.predict(dataset.a, dataset.w, dataset.x)
    return float(np.sqrt(np.mean((dataset.y - pred) ** 2)))


def evaluate(policy_treatments, surface, bridge, oracle: OracleCurves, x_rows, factual_data: Dataset,
             bridge_average: bool = False, w_pool=None) -> MetricsReport:
    mean_regret, per_point = regret(policy_treatments, oracle)
    value, best = policy_values(policy_treatments, oracle)
    extra = {}
    if bridge_average:
        pool = factual_data.w if w_pool is None else w_pool
        extra["bridge_average_rmse"] = panel_rmse(bridge_average_panel(bridge, pool, x_rows, oracle.grid), oracle)
    return MetricsReport(mean_regret, counterfactual_rmse(surface, oracle, x_rows), factual_rmse(bridge, factual_data),
                         value, best, per_point, oracle.se, extra)


# ------------------------------------------------------------------ seeds


@dataclass(frozen=True)
class SeedSummary:
    metric: str
    values: tuple
    mean: float
    std: float
    half_width: float
    deltas: tuple | None = None
    mean_delta: float | None = None
    improvements: int | None = None

    @property
    def k(self) -> int:
        return len(self.values)

    def to_dict(self) -> dict:
        return asdict(self)


def _metric(run, name):
    if isinstance(run, MetricsReport):
        return float(getattr(run, name)) if hasattr(run, name) else float(run.extra[name])
    if isinstance(run, dict):
        return float(run[name])
    return float(run)


def aggregate_seeds(runs, baseline_runs=None, metric: str = "regret") -> SeedSummary:
    """Mean, sample std and 95% normal half-width across seeds.

    With a baseline, also the per-seed deltas ``run - baseline`` and the number
    of seeds where the run is strictly lower (an improvement for regret and
    RMSE metrics).
    """
    if not runs:
        raise ValueError("no runs to aggregate")
    v = np.array([_metric(r, metric) for r in runs])
    std = float(v.std(ddof=1)) if v.size > 1 else 0.0
    half = 1.96 * std / math.sqrt(v.size)
    if baseline_runs is None:
        return SeedSummary(metric, tuple(v.tolist()), float(v.mean()), std, half)
    if len(baseline_runs) != len(runs):
        raise ValueError(f"{len(runs)} runs but {len(baseline_runs)} baseline runs")
    b = np.array([_metric(r, metric) for r in baseline_runs])
    d = v - b
    return SeedSummary(metric, tuple(v.tolist()), float(v.mean()), std, half,
                       tuple(d.tolist()), float(d.mean()), int(np.sum(d < 0)))


def write_summaries(summaries: dict, path) -> None:
    payload = {k: s.to_dict() for k, s in summaries.items()}
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
