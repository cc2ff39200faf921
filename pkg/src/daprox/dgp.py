"""Synthetic and semi-synthetic proximal benchmarks with ground-truth response curves.

Two structural models are provided:

``SyntheticDGP``
    Gaussian covariates, two correlated latent confounders ``U_Z, U_W`` seen
    through noisy proxies, a clipped logistic-mean treatment, and an outcome
    with a narrow covariate-dependent peak plus a treatment-dependent latent
    term. The conditional causal response has a closed form.

``SemiSynthDGP``
    Eleven covariate features (5 observed covariates, 3 + 3 proxy features;
    e.g. principal components of expression data, or a Gaussian surrogate), a
    two-dimensional latent, Beta-distributed treatment on (0, 1) and a
    unit-specific quadratic dose response. Ground truth is by Monte Carlo only.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .core import Dataset, RngState, TreatmentSupport, make_treatment_grid

# ------------------------------------------------------------------ synthetic


def decay_weights(d: int) -> np.ndarray:
    """``(1, 1/2^2, ..., 1/d^2)``."""
    return 1.0 / np.arange(1, d + 1) ** 2


def _squash(t):
    return 0.1 + 0.8 / (1.0 + np.exp(-t))


@dataclass(frozen=True)
class SyntheticParams:
    d_x: int = 5
    d_z: int = 2
    d_w: int = 2
    rho_x: float = 0.5
    c_p: float = 0.35
    sigma_a: float = 0.35
    sigma_y: float = 0.0
    beta_xw: float = 1.2
    delta_c: float = 0.2
    eta_c: float = 2.7
    delta_s: float = 0.045
    delta_alpha: float = 0.35
    delta_kappa: float = 0.7
    lambda_tail: float = 0.06
    gamma: float = 0.7
    beta_a: float = 0.25
    delta_psi: float = 0.18
    gamma0: float = 1.2
    q_min: float = 0.001
    q_max: float = 0.999
    n_pilot: int = 50_000
    support_seed: int = 2718
    grid_size: int = 51
    # confounding-strength multiplier on (gamma, gamma0)
    omega: float = 1.0

    def __post_init__(self):
        if min(self.d_x, self.d_z, self.d_w) < 1:
            raise ValueError("dimensions must be positive")
        if self.delta_s <= 0:
            raise ValueError("delta_s must be positive")
        if not 0 <= self.q_min < self.q_max <= 1:
            raise ValueError("need 0 <= q_min < q_max <= 1")


def _draw_synthetic_latents(n, p: SyntheticParams, gen: np.random.Generator):
    cov = np.eye(p.d_x) + p.rho_x * (np.eye(p.d_x, k=1) + np.eye(p.d_x, k=-1))
    x = gen.multivariate_normal(np.zeros(p.d_x), cov, size=n, method="cholesky")
    eps = gen.standard_normal((n, 3))
    u_z = eps[:, 0] + eps[:, 2]
    u_w = eps[:, 1] + eps[:, 2]
    z = gen.uniform(-1.0, 1.0, (n, p.d_z)) + p.c_p * u_z[:, None]
    w = gen.uniform(-1.0, 1.0, (n, p.d_w)) + p.c_p * u_w[:, None]
    mu_a = _squash(3.0 * x @ decay_weights(p.d_x) + 3.0 * z @ decay_weights(p.d_z))
    return x, z, w, u_z, u_w, mu_a


def estimate_support(params: SyntheticParams = SyntheticParams(), rng: RngState | None = None) -> TreatmentSupport:
    """Empirical ``(q_min, q_max)`` quantiles of the unclipped treatment."""
    if params.n_pilot < 1000:
        raise ValueError("n_pilot must be at least 1000")
    rng = rng or RngState(params.support_seed)
    *_, u_w, mu_a = _draw_synthetic_latents(params.n_pilot, params, rng.stream("support"))
    raw = mu_a + params.sigma_a * u_w
    lo, hi = np.quantile(raw, [params.q_min, params.q_max])
    if not hi > lo:
        raise ValueError("degenerate pilot treatment sample")
    return TreatmentSupport(float(lo), float(hi), params.grid_size)


@dataclass
class SyntheticDGP:
    params: SyntheticParams = field(default_factory=SyntheticParams)
    support: TreatmentSupport | None = None

    def __post_init__(self):
        if self.support is None:
            self.support = estimate_support(self.params)

    # structural pieces -------------------------------------------------
    def structural(self, a, x0):
        """Peaked response ``g(a, x0)``."""
        p, sup = self.params, self.support
        a = np.asarray(a, float)
        x0 = np.asarray(x0, float)
        c = sup.midpoint + p.delta_c * np.tanh(p.eta_c * x0)
        s = p.delta_s * sup.width * (1.0 + 0.10 * np.tanh(0.8 * x0))
        r = (a - c) / s
        alpha = 1.0 + p.delta_alpha * np.tanh(x0)
        kappa = p.delta_kappa * np.tanh(x0)
        return alpha * np.exp(-0.5 * r**2) * (1.0 + kappa * np.tanh(1.5 * r)) - p.lambda_tail * r**2

    def confounding_coef(self, a):
        """Multiplier of ``U_Z`` in the outcome."""
        p, sup = self.params, self.support
        t = (np.asarray(a, float) - sup.midpoint) / (p.delta_psi * sup.width)
        return p.omega * (p.gamma * (1.0 + p.beta_a * t**2) + p.gamma0)

    def outcome(self, a, x, w, u_z, noise):
        p = self.params
        x = np.atleast_2d(x)
        return (self.structural(a, x[..., 0])
                + p.beta_xw * (x @ decay_weights(p.d_x) + np.atleast_2d(w) @ decay_weights(p.d_w))
                + self.confounding_coef(a) * u_z + noise)

    # sampling ------------------------------------------------------------
    def sample(self, n: int, rng: RngState):
        """Observational sample plus hidden latents (``u_z``, ``u_w``, ``mu_a``)."""
        if n < 1:
            raise ValueError("n must be >= 1")
        p, sup = self.params, self.support
        gen = rng.stream("dgp")
        x, z, w, u_z, u_w, mu_a = _draw_synthetic_latents(n, p, gen)
        a = np.clip(mu_a + p.sigma_a * u_w, sup.c_minus, sup.c_plus)
        noise = p.sigma_y * gen.standard_normal(n)
        y = self.outcome(a, x, w, u_z, noise)
        return Dataset(y, a, z, w, x, sup), {"u_z": u_z, "u_w": u_w, "mu_a": mu_a}

    def m0(self, a, x):
        """Closed-form ``E[Y(a) | X = x]``; broadcasts ``a`` against rows of ``x``."""
        p = self.params
        x = np.asarray(x, float)
        return self.structural(a, x[..., 0]) + p.beta_xw * (x @ decay_weights(p.d_x))

    def interventional_draws(self, a: float, x, b: int, gen: np.random.Generator) -> np.ndarray:
        """``b`` draws of ``Y(do(A=a))`` at covariate row ``x``."""
        p = self.params
        eps = gen.standard_normal((b, 3))
        u_z = eps[:, 0] + eps[:, 2]
        u_w = eps[:, 1] + eps[:, 2]
        w = gen.uniform(-1.0, 1.0, (b, p.d_w)) + p.c_p * u_w[:, None]
        noise = p.sigma_y * gen.standard_normal(b)
        xr = np.broadcast_to(np.asarray(x, float), (b, p.d_x))
        return self.outcome(np.full(b, a), xr, w, u_z, noise)


def sample_synthetic(n: int, params: SyntheticParams, support: TreatmentSupport, rng: RngState):
    return SyntheticDGP(params, support).sample(n, rng)


def synthetic_m0(a, x, params: SyntheticParams, support: TreatmentSupport):
    return SyntheticDGP(params, support).m0(a, x)


# ------------------------------------------------------------- semi-synthetic


def _sigmoid(t):
    return 1.0 / (1.0 + np.exp(-t))


def _softplus(t):
    return np.logaddexp(0.0, t)


def _vec(scale, *entries):
    v = np.asarray(entries, float)
    return scale / np.sqrt(v.size) * v


@dataclass(frozen=True)
class SemiSynthParams:
    sigma_z: float = 0.2
    sigma_w: float = 0.2
    b_z: np.ndarray = field(default_factory=lambda: 0.8 * np.array([[1, 0], [0, 1], [2**-0.5, -(2**-0.5)]]))
    b_w: np.ndarray = field(default_factory=lambda: 0.8 * np.array([[1, 0], [0, 1], [2**-0.5, 2**-0.5]]))
    c_z: np.ndarray = field(default_factory=lambda: 0.2 * np.eye(3, 5))
    c_w: np.ndarray = field(default_factory=lambda: 0.2 * np.eye(3, 5, k=2))
    r_z: np.ndarray = field(default_factory=lambda: 0.5 * np.eye(3))
    r_w: np.ndarray = field(default_factory=lambda: 0.5 * np.eye(3))
    a_star_lo: float = 0.15
    a_star_span: float = 0.70
    phi: float = 20.0
    mean_clip: tuple = (0.02, 0.98)
    gamma0: float = 0.0
    gamma_x: np.ndarray = field(default_factory=lambda: _vec(0.6, 1, -1, 1, -1, 1))
    gamma_u: np.ndarray = field(default_factory=lambda: _vec(0.8, 1, -1))
    eta0: float = 0.0
    eta_x: np.ndarray = field(default_factory=lambda: _vec(0.4, 1, 1, -1, 1, -1))
    eta_u: np.ndarray = field(default_factory=lambda: _vec(0.8, 1, 1))
    eta_z: np.ndarray = field(default_factory=lambda: _vec(0.6, 1, -1, 1))
    big_gamma: float = 1.0
    sigma_y: float = 0.1
    theta_x: np.ndarray = field(default_factory=lambda: _vec(0.25, 1, -1, 1, 1, -1))
    theta_u: np.ndarray = field(default_factory=lambda: _vec(0.5, 1, -1))
    omega_x: np.ndarray = field(default_factory=lambda: _vec(0.2, 1, 2, -1, 1, -2))
    omega_u: np.ndarray = field(default_factory=lambda: _vec(0.3, 1, 1))
    kappa0: float = 0.0
    kappa_x: np.ndarray = field(default_factory=lambda: _vec(0.3, 1, -1, 0.5, 1, -0.5))
    kappa_u: np.ndarray = field(default_factory=lambda: _vec(0.3, 1, -1))
    lambda_w: np.ndarray = field(default_factory=lambda: _vec(0.5, 1, -1, 1))
    n_pilot: int = 50_000
    pilot_seed: int = 2718
    grid_size: int = 51

    def __post_init__(self):
        if self.phi <= 0:
            raise ValueError("Beta concentration must be positive")
        shapes = {"b_z": (3, 2), "b_w": (3, 2), "c_z": (3, 5), "c_w": (3, 5), "r_z": (3, 3), "r_w": (3, 3),
                  "gamma_x": (5,), "gamma_u": (2,), "eta_x": (5,), "eta_u": (2,), "eta_z": (3,),
                  "theta_x": (5,), "theta_u": (2,), "omega_x": (5,), "omega_u": (2,),
                  "kappa_x": (5,), "kappa_u": (2,), "lambda_w": (3,)}
        for name, shape in shapes.items():
            if np.shape(getattr(self, name)) != shape:
                raise ValueError(f"{name} must have shape {shape}")


N_COVARIATE_FEATURES = 11  # 5 covariates, 3 Z features, 3 W features


def surrogate_covariates(n: int, gen: np.random.Generator) -> np.ndarray:
    return gen.standard_normal((n, N_COVARIATE_FEATURES))


def load_covariates_csv(path) -> np.ndarray:
    """Numeric CSV with a header row and 11 feature columns."""
    with open(Path(path), newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))[1:]
    cov = np.array([[float(c) for c in r] for r in rows if r], float)
    if cov.ndim != 2 or cov.shape[1] != N_COVARIATE_FEATURES:
        raise ValueError(f"covariate file must have {N_COVARIATE_FEATURES} columns")
    return cov


@dataclass
class SemiSynthDGP:
    """Semi-synthetic model; ``covariates`` is an optional (m, 11) feature pool."""

    params: SemiSynthParams = field(default_factory=SemiSynthParams)
    covariates: np.ndarray | None = None
    stats: dict | None = None

    def __post_init__(self):
        if self.covariates is not None:
            cov = np.asarray(self.covariates, float)
            if cov.ndim != 2 or cov.shape[1] != N_COVARIATE_FEATURES:
                raise ValueError(f"covariates must have {N_COVARIATE_FEATURES} columns, got shape {cov.shape}")
            self.covariates = cov
        self.support = TreatmentSupport(0.0, 1.0, self.params.grid_size)
        if self.stats is None:
            self.stats = self._pilot_stats()

    def _features(self, n, gen):
        if self.covariates is None:
            return surrogate_covariates(n, gen)
        m = self.covariates.shape[0]
        return self.covariates[gen.choice(m, n, replace=n > m)]

    def _proxies(self, u, x, feat, mat_b, mat_c, mat_r, sigma, gen):
        lin = u @ mat_b.T + x @ mat_c.T + feat @ mat_r.T
        return np.tanh(lin) + sigma * gen.standard_normal(lin.shape)

    def _pilot_stats(self):
        p = self.params
        gen = RngState(p.pilot_seed).stream("pilot")
        feats = self._features(p.n_pilot, gen)
        x, zt = feats[:, :5], feats[:, 5:8]
        u = self._latents(p.n_pilot, gen)
        s = p.gamma0 + x @ p.gamma_x + u @ p.gamma_u
        z = self._proxies(u, x, zt, p.b_z, p.c_z, p.r_z, p.sigma_z, gen)
        r = p.eta0 + x @ p.eta_x + u @ p.eta_u + z @ p.eta_z
        return {"mu_s": float(s.mean()), "sigma_s": float(s.std()),
                "mu_r": float(r.mean()), "sigma_r": float(r.std())}

    @staticmethod
    def _latents(n, gen):
        return np.column_stack([gen.standard_normal(n), gen.exponential(1.0, n) - 1.0])

    def a_star(self, x, u):
        p = self.params
        s = p.gamma0 + x @ p.gamma_x + u @ p.gamma_u
        return p.a_star_lo + p.a_star_span * _sigmoid((s - self.stats["mu_s"]) / self.stats["sigma_s"])

    def potential_outcome(self, a, x, u, w, noise):
        p = self.params
        c = 5.0 + 5.0 * _softplus(p.kappa0 + x @ p.kappa_x + u @ p.kappa_u)
        mu = x @ p.theta_x + u @ p.theta_u
        b = 0.5 * np.sin(x @ p.omega_x) + 0.5 * np.cos(u @ p.omega_u)
        a = np.asarray(a, float)
        return (mu + b + w @ p.lambda_w + p.big_gamma * u[:, 0] * a * x[:, 0]
                - c * (a - self.a_star(x, u)) ** 2 + noise) / 4.0

    def sample(self, n: int, rng: RngState):
        p = self.params
        gen = rng.stream("dgp")
        feats = self._features(n, gen)
        x, zt, wt = feats[:, :5], feats[:, 5:8], feats[:, 8:11]
        u = self._latents(n, gen)
        z = self._proxies(u, x, zt, p.b_z, p.c_z, p.r_z, p.sigma_z, gen)
        w = self._proxies(u, x, wt, p.b_w, p.c_w, p.r_w, p.sigma_w, gen)
        a_star = self.a_star(x, u)
        r = p.eta0 + x @ p.eta_x + u @ p.eta_u + z @ p.eta_z
        r_bar = (r - self.stats["mu_r"]) / self.stats["sigma_r"]
        m = np.clip(0.3 * a_star + 0.7 * _sigmoid(r_bar), *p.mean_clip)
        a = gen.beta(p.phi * m, p.phi * (1.0 - m))
        noise = p.sigma_y * gen.standard_normal(n)
        y = self.potential_outcome(a, x, u, w, noise)
        latents = {"u": u, "a_star": a_star, "assign_mean": m, "features": feats}
        return Dataset(y, a, z, w, x, self.support), latents

    def interventional_draws(self, a: float, x, b: int, gen: np.random.Generator) -> np.ndarray:
        p = self.params
        feats = self._features(b, gen)
        xr = np.broadcast_to(np.asarray(x, float), (b, 5))
        u = self._latents(b, gen)
        w = self._proxies(u, xr, feats[:, 8:11], p.b_w, p.c_w, p.r_w, p.sigma_w, gen)
        noise = p.sigma_y * gen.standard_normal(b)
        return self.potential_outcome(np.full(b, a), xr, u, w, noise)


def sample_semisynth(covariates, n: int, params: SemiSynthParams = SemiSynthParams(), rng: RngState | None = None):
    dgp = SemiSynthDGP(params, covariates)
    return dgp.sample(n, rng or RngState(0))


# ------------------------------------------------------------ oracle curves


@dataclass(frozen=True, eq=False)
class OracleCurves:
    m0: np.ndarray  # (n_test, M)
    grid: np.ndarray
    se: np.ndarray | None = None
    method: str = "closed-form"
    b: int = 0

    def __post_init__(self):
        m0 = np.asarray(self.m0, float)
        if m0.ndim != 2 or m0.shape[1] != np.shape(self.grid)[0]:
            raise ValueError("oracle panel must be (n_points, grid size)")
        if not np.isfinite(m0).all():
            raise ValueError("non-finite oracle values")

    @property
    def best_index(self) -> np.ndarray:
        return np.argmax(self.m0, axis=1)

    @property
    def a_star(self) -> np.ndarray:
        return self.grid[self.best_index]

    def to_csv(self, path) -> None:
        se = np.zeros_like(self.m0) if self.se is None else self.se
        with open(Path(path), "w", newline="", encoding="utf-8") as fh:
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["x_index", "a", "m0", "se"])
            for i in range(self.m0.shape[0]):
                for m, a in enumerate(self.grid):
                    wr.writerow([i, repr(float(a)), repr(float(self.m0[i, m])), repr(float(se[i, m]))])

    @classmethod
    def from_csv(cls, path, method: str = "file") -> "OracleCurves":
        with open(Path(path), newline="", encoding="utf-8") as fh:
            rows = list(csv.DictReader(fh))
        idx = np.array([int(r["x_index"]) for r in rows])
        a = np.array([float(r["a"]) for r in rows])
        n = idx.max() + 1
        grid = a[idx == 0]
        m = grid.shape[0]
        m0 = np.array([float(r["m0"]) for r in rows]).reshape(n, m)
        se = np.array([float(r["se"]) for r in rows]).reshape(n, m)
        return cls(m0, grid, se, method)


def closed_form_curves(dgp: SyntheticDGP, x_rows, grid=None) -> OracleCurves:
    grid = make_treatment_grid(dgp.support) if grid is None else np.asarray(grid, float)
    x_rows = np.atleast_2d(np.asarray(x_rows, float))
    m0 = dgp.m0(grid[None, :], x_rows[:, None, :])
    return OracleCurves(m0, grid, np.zeros_like(m0), "closed-form", 0)


def mc_ground_truth(dgp, x_rows, grid, b: int = 256, rng: RngState | None = None) -> OracleCurves:
    """Monte Carlo ``E[Y(do(a)) | X = x]`` on the (x_rows x grid) panel.

    Each (point, treatment) cell draws from its own substream, so the panel does
    not depend on evaluation order.
    """
    if b < 1:
        raise ValueError("B must be >= 1")
    rng = rng or RngState(0)
    x_rows = np.atleast_2d(np.asarray(x_rows, float))
    grid = np.asarray(grid, float)
    mean = np.empty((x_rows.shape[0], grid.shape[0]))
    se = np.empty_like(mean)
    for i, x in enumerate(x_rows):
        for m, a in enumerate(grid):
            draws = dgp.interventional_draws(float(a), x, b, rng.stream("mc-oracle", i, m))
            mean[i, m] = draws.mean()
            se[i, m] = draws.std(ddof=1) / np.sqrt(b) if b > 1 else 0.0
    return OracleCurves(mean, grid, se, "monte-carlo", b)


def with_confounding(params: SyntheticParams, omega: float) -> SyntheticParams:
    return replace(params, omega=float(omega))
