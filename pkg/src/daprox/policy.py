"""Cross-fitted bridge pseudo-outcomes, response-surface projection and grid policies."""

from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core import Dataset, FoldAssignment, RngState
from .numerics import RbfKernelSpec, gram, jittered_solve, kernel_spec_from_data
from .solvers import BridgeModel, SolverError, fit_bridge
from .weights import WeightVector


@dataclass(frozen=True)
class SurfaceParams:
    """Kernel ridge settings for the (a, x) response-surface regressor."""

    ridge: float = 1e-3
    a_scale: float = 0.25
    x_scale: float = 1.0
    max_pairs: int = 5000

    def __post_init__(self):
        if self.ridge <= 0 or self.a_scale <= 0 or self.x_scale <= 0 or self.max_pairs < 2:
            raise ValueError("surface ridge, bandwidth scales and pair cap must be positive")


@dataclass(frozen=True, eq=False)
class PseudoOutcomeTable:
    values: np.ndarray  # (n, M) out-of-fold bridge evaluations
    grid: np.ndarray
    folds: FoldAssignment
    train_indices: tuple  # training rows of the model that filled each fold

    def __post_init__(self):
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite pseudo-outcomes")

    def to_csv(self, path) -> None:
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["row", "fold", *[f"a{m}" for m in range(self.grid.shape[0])]])
            wr.writerow(["grid", "", *[repr(float(a)) for a in self.grid]])
            for i, row in enumerate(self.values):
                wr.writerow([i, int(self.folds.fold_of[i]), *[repr(float(v)) for v in row]])


def grid_inputs(grid, w, x):
    """Rows ``(a_m, w_i, x_i)`` ordered row-major over (i, m)."""
    n, m = w.shape[0], grid.shape[0]
    a = np.tile(grid, n)
    return a, np.repeat(w, m, axis=0), np.repeat(x, m, axis=0)


def pseudo_outcomes(dataset: Dataset, hp, weights, folds: FoldAssignment, grid, rng: RngState | None = None,
                    ) -> PseudoOutcomeTable:
    """Cross-fitted table ``H[i, m] = h_{-k(i)}(a_m, W_i, X_i)``."""
    grid = np.asarray(grid, float)
    if not dataset.support.contains(grid).all():
        raise ValueError("grid leaves the treatment support")
    if folds.fold_of.shape[0] != dataset.n:
        raise ValueError("fold assignment does not match dataset size")
    rng = rng or RngState(0)
    wv = None if weights is None else (weights.values if isinstance(weights, WeightVector) else np.asarray(weights))
    table = np.empty((dataset.n, grid.shape[0]))
    trained_on = []
    for k in range(folds.k):
        train = folds.train_index(k)
        test = folds.test_index(k)
        try:
            model = fit_bridge(dataset.subset(train), None if wv is None else wv[train], hp, rng.child("fold", k))
        except (SolverError, np.linalg.LinAlgError) as exc:
            raise SolverError(f"fold {k}: {exc}") from exc
        model.train_index = train
        a, w, x = grid_inputs(grid, dataset.w[test], dataset.x[test])
        table[test] = model.predict(a, w, x).reshape(test.shape[0], grid.shape[0])
        trained_on.append(train)
    return PseudoOutcomeTable(table, grid, folds, tuple(trained_on))


@dataclass(frozen=True, eq=False)
class ResponseSurface:
    """Kernel ridge regressor ``m(a, x)``."""

    inputs: np.ndarray  # (p, 1 + d_x) training pairs
    coef: np.ndarray
    kernel: RbfKernelSpec
    offset: float
    ridge: float

    def __post_init__(self):
        if not np.isfinite(self.coef).all():
            raise ValueError("non-finite surface coefficients")

    def predict(self, a, x) -> np.ndarray:
        a = np.atleast_1d(np.asarray(a, float))
        x = np.asarray(x, float).reshape(a.shape[0], -1)
        out = np.empty(a.shape[0])
        q = np.column_stack([a, x])
        for s in range(0, q.shape[0], 4096):
            out[s:s + 4096] = self.offset + gram(q[s:s + 4096], self.inputs, self.kernel) @ self.coef
        return out

    def on_grid(self, grid, x_rows) -> np.ndarray:
        """Panel ``m(a_m, x_i)`` of shape (n_points, M)."""
        grid = np.asarray(grid, float)
        x_rows = np.atleast_2d(np.asarray(x_rows, float))
        a = np.tile(grid, x_rows.shape[0])
        x = np.repeat(x_rows, grid.shape[0], axis=0)
        return self.predict(a, x).reshape(x_rows.shape[0], grid.shape[0])


def fit_regression(a, x, target, params: SurfaceParams = SurfaceParams(), rng: RngState | None = None) -> ResponseSurface:
    """Kernel ridge of ``target`` on ``(a, x)`` with seeded subsampling to ``max_pairs``."""
    a = np.asarray(a, float).ravel()
    x = np.asarray(x, float).reshape(a.shape[0], -1)
    t = np.asarray(target, float).ravel()
    if a.shape[0] < 2:
        raise ValueError("need at least two training pairs")
    if a.shape[0] > params.max_pairs:
        gen = (rng or RngState(0)).stream("surface")
        keep = np.sort(gen.choice(a.shape[0], params.max_pairs, replace=False))
        a, x, t = a[keep], x[keep], t[keep]
    if np.ptp(a) == 0:
        raise ValueError("degenerate inputs: treatment values are constant")
    kernel = kernel_spec_from_data([a, x], [params.a_scale, params.x_scale])
    inputs = np.column_stack([a, x])
    offset = float(t.mean())
    k = gram(inputs, inputs, kernel)
    p = inputs.shape[0]
    coef = jittered_solve(k + p * params.ridge * np.eye(p), t - offset)
    return ResponseSurface(inputs, coef, kernel, offset, params.ridge)


def fit_s_learner(dataset: Dataset, params: SurfaceParams = SurfaceParams(),
                  rng: RngState | None = None) -> ResponseSurface:
    """No-proxy baseline: kernel ridge of ``Y`` on ``(A, X)``, ignoring ``Z`` and ``W``."""
    return fit_regression(dataset.a, dataset.x, dataset.y, params, rng)


@dataclass(frozen=True, eq=False)
class GridSurface:
    """Kernel ridge ``m(a, x)`` fitted on a full (rows x grid) panel.

    The product kernel ``k_a(a, a') k_x(x, x')`` on a Cartesian design has a
    Kronecker Gram matrix, so the exact ridge solution over all ``n * M``
    pairs costs one ``n x n`` and one ``M x M`` eigendecomposition.
    """

    x_train: np.ndarray
    grid: np.ndarray
    coef: np.ndarray  # (n, M)
    kernel: RbfKernelSpec  # blocks (a, x)
    offset: float
    ridge: float

    def __post_init__(self):
        if not np.isfinite(self.coef).all():
            raise ValueError("non-finite surface coefficients")

    def _block_kernels(self):
        ls_a, ls_x = self.kernel.lengthscales
        ka = RbfKernelSpec((1,), (ls_a,))
        kx = RbfKernelSpec((self.x_train.shape[1],), (ls_x,))
        return ka, kx

    def on_grid(self, grid, x_rows) -> np.ndarray:
        ka, kx = self._block_kernels()
        x_rows = np.atleast_2d(np.asarray(x_rows, float))
        g = np.asarray(grid, float)[:, None]
        return self.offset + gram(x_rows, self.x_train, kx) @ self.coef @ gram(self.grid[:, None], g, ka)

    def predict(self, a, x) -> np.ndarray:
        ka, kx = self._block_kernels()
        a = np.atleast_1d(np.asarray(a, float))
        x = np.asarray(x, float).reshape(a.shape[0], -1)
        out = np.empty(a.shape[0])
        for s in range(0, a.shape[0], 4096):
            sl = slice(s, s + 4096)
            left = gram(x[sl], self.x_train, kx) @ self.coef
            out[sl] = self.offset + np.sum(left * gram(a[sl, None], self.grid[:, None], ka), axis=1)
        return out


def fit_surface(table: PseudoOutcomeTable, x, params: SurfaceParams = SurfaceParams(),
                rng: RngState | None = None) -> GridSurface:
    """Regress stacked pseudo-outcomes ``H[i, m]`` on ``(a_m, X_i)`` by exact kernel ridge."""
    x = np.atleast_2d(np.asarray(x, float))
    h = table.values
    if x.shape[0] != h.shape[0]:
        raise ValueError("covariate rows do not match pseudo-outcome rows")
    if np.ptp(table.grid) == 0:
        raise ValueError("degenerate inputs: treatment grid is constant")
    kernel = kernel_spec_from_data([table.grid, x], [params.a_scale, params.x_scale])
    ka = RbfKernelSpec((1,), (kernel.lengthscales[0],))
    kx = RbfKernelSpec((x.shape[1],), (kernel.lengthscales[1],))
    g = table.grid[:, None]
    s_x, q_x = np.linalg.eigh(gram(x, x, kx))
    s_a, q_a = np.linalg.eigh(gram(g, g, ka))
    s_x, s_a = np.maximum(s_x, 0.0), np.maximum(s_a, 0.0)
    offset = float(h.mean())
    n_pairs = h.size
    rotated = q_x.T @ (h - offset) @ q_a
    coef = q_x @ (rotated / (np.outer(s_x, s_a) + n_pairs * params.ridge)) @ q_a.T
    return GridSurface(x.copy(), table.grid.copy(), coef, kernel, offset, params.ridge)


def _surface_panel(surface, grid, x_rows):
    if hasattr(surface, "on_grid"):
        return surface.on_grid(grid, x_rows)
    x_rows = np.atleast_2d(np.asarray(x_rows, float))
    return np.array([[surface(a, x) for a in grid] for x in x_rows], float)


def policy_from_panel(panel, grid) -> np.ndarray:
    """Row-wise grid argmax; ties go to the smallest treatment."""
    panel = np.asarray(panel, float)
    if not np.isfinite(panel).all():
        raise ValueError("non-finite surface values")
    return np.asarray(grid, float)[np.argmax(panel, axis=1)]


def argmax_policy(surface, grid, x):
    """Grid maximizer of ``surface`` at covariate row(s) ``x``.

    ``surface`` is a fitted surface or any callable ``f(a, x)``. A single
    row gives a float, a matrix gives one treatment per row.
    """
    grid = np.asarray(grid, float)
    if grid.size == 0:
        raise ValueError("empty grid")
    x = np.asarray(x, float)
    single = x.ndim <= 1
    pol = policy_from_panel(_surface_panel(surface, grid, np.atleast_2d(x)), grid)
    return float(pol[0]) if single else pol
