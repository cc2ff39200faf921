"""Weighted proximal outcome-bridge solvers: PMMR, KPV, DFPV and NMMR.

Every solver fits ``h(a, w, x)`` to the conditional moment restriction
``E[Y - h(A, W, X) | A, Z, X] = 0``. Observation weights change the norm in
which moment violations are penalized:

* PMMR / NMMR replace the moment Gram ``K_V`` by ``D^{1/2} K_V D^{1/2}``;
* KPV / DFPV weight the second-stage ridge regression by ``D``; the first
  stage stays unweighted.

Passing ``weights=None`` runs the ordinary (unweighted) solver.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .core import Dataset, RngState
from .numerics import (
    AdamState,
    MlpModel,
    RbfKernelSpec,
    RffSpec,
    adam_step,
    gram,
    jittered_solve,
    kernel_spec_from_data,
    mlp_backward,
    mlp_forward,
    rff_features,
)
from .weights import WeightVector

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1


class SolverError(RuntimeError):
    """A bridge fit failed (singular system, divergence, bad input)."""


# ------------------------------------------------------------ hyperparameters


@dataclass(frozen=True)
class PmmrParams:
    # defaults picked by held-out factual RMSE on the synthetic benchmark
    eta: float = 1.0
    u_scale: float = 1.0
    v_scale: float = 0.5
    solver = "PMMR"

    def __post_init__(self):
        if self.eta <= 0 or self.u_scale <= 0 or self.v_scale <= 0:
            raise ValueError("PMMR regularizer and bandwidth scales must be positive")


@dataclass(frozen=True)
class KpvParams:
    lam1: float = 1e-3
    lam2: float = 1e-3
    kernel_scale: float = 1.0
    split: float = 0.5
    solver = "KPV"

    def __post_init__(self):
        if self.lam1 <= 0 or self.lam2 <= 0 or self.kernel_scale <= 0:
            raise ValueError("KPV regularizers and kernel scale must be positive")
        if not 0 < self.split < 1:
            raise ValueError("split fraction must lie in (0, 1)")


@dataclass(frozen=True)
class DfpvParams:
    lam1: float = 1e-3
    lam2: float = 1e-3
    n_features: int = 100
    u_scale: float = 1.0
    v_scale: float = 1.0
    split: float = 0.5
    solver = "DFPV"

    def __post_init__(self):
        if self.lam1 <= 0 or self.lam2 <= 0:
            raise ValueError("DFPV regularizers must be positive")
        if self.n_features < 1:
            raise ValueError("feature dimension must be >= 1")
        if not 0 < self.split < 1:
            raise ValueError("split fraction must lie in (0, 1)")


@dataclass(frozen=True)
class NmmrParams:
    statistic: str = "V"
    hidden: tuple = (32, 32)
    activation: str = "tanh"
    lr: float = 3e-3
    epochs: int = 300
    v_scale: float = 1.0
    product_kernel: bool = True
    weight_decay: float = 1e-4
    solver = "NMMR"

    def __post_init__(self):
        if self.statistic not in ("U", "V"):
            raise ValueError("statistic must be 'U' or 'V'")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if self.lr < 0 or self.weight_decay < 0 or self.v_scale <= 0:
            raise ValueError("invalid NMMR optimizer settings")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))


SOLVER_PARAMS = {"PMMR": PmmrParams, "KPV": KpvParams, "DFPV": DfpvParams, "NMMR": NmmrParams}


def make_params(solver: str, **kwargs):
    try:
        cls = SOLVER_PARAMS[solver.upper()]
    except KeyError:
        raise ValueError(f"unknown solver {solver!r}; expected one of {sorted(SOLVER_PARAMS)}") from None
    return cls(**kwargs)


# ------------------------------------------------------------------- bridges


def _u_rows(a, w, x):
    a = np.atleast_1d(np.asarray(a, float))
    n = a.shape[0]
    return np.column_stack([a, np.asarray(w, float).reshape(n, -1), np.asarray(x, float).reshape(n, -1)])


@dataclass(eq=False)
class BridgeModel:
    """Fitted outcome bridge. ``payload`` holds the solver-specific arrays."""

    solver: str
    payload: dict
    train_index: np.ndarray | None = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        for key, val in self.payload.items():
            if isinstance(val, np.ndarray) and not np.isfinite(val).all():
                raise SolverError(f"{self.solver} bridge has non-finite {key}")

    def predict_u(self, u) -> np.ndarray:
        u = np.atleast_2d(np.asarray(u, float))
        p = self.payload
        if self.solver == "PMMR":
            return gram(u, p["u_train"], p["u_kernel"]) @ p["alpha"]
        if self.solver == "KPV":
            return gram(u, p["u_stage1"], p["u_kernel"]) @ (p["gamma"] @ p["beta"])
        if self.solver == "DFPV":
            return rff_features(u, p["features"]) @ p["beta"]
        if self.solver == "NMMR":
            z = (u - p["u_mean"]) / p["u_std"]
            return p["y_mean"] + p["y_std"] * mlp_forward(p["mlp"], z)
        raise SolverError(f"unknown solver {self.solver!r}")

    def predict(self, a, w, x) -> np.ndarray:
        return self.predict_u(_u_rows(a, w, x))

    @property
    def input_dim(self) -> int:
        p = self.payload
        if self.solver == "PMMR":
            return p["u_train"].shape[1]
        if self.solver == "KPV":
            return p["u_stage1"].shape[1]
        if self.solver == "DFPV":
            return p["features"].frequencies.shape[0]
        return p["mlp"].weights[0].shape[0]

    # serialization -------------------------------------------------------
    def to_dict(self) -> dict:
        out = {}
        for key, val in self.payload.items():
            if isinstance(val, RbfKernelSpec):
                out[key] = {"kernel": val.to_dict()}
            elif isinstance(val, RffSpec):
                out[key] = {"rff": {"frequencies": val.frequencies.tolist(), "phases": val.phases.tolist()}}
            elif isinstance(val, MlpModel):
                out[key] = {"mlp": {"weights": [w.tolist() for w in val.weights],
                                    "biases": [b.tolist() for b in val.biases],
                                    "activation": val.activation}}
            elif isinstance(val, np.ndarray):
                out[key] = {"array": val.tolist()}
            else:
                out[key] = {"value": val}
        return {
            "format": "daprox-bridge",
            "version": FORMAT_VERSION,
            "solver": self.solver,
            "payload": out,
            "info": self.info,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "BridgeModel":
        if d.get("format") != "daprox-bridge" or d.get("version") != FORMAT_VERSION:
            raise ValueError("not a version-1 bridge blob")
        payload = {}
        for key, val in d["payload"].items():
            if "kernel" in val:
                payload[key] = RbfKernelSpec.from_dict(val["kernel"])
            elif "rff" in val:
                payload[key] = RffSpec(np.array(val["rff"]["frequencies"]), np.array(val["rff"]["phases"]))
            elif "mlp" in val:
                m = val["mlp"]
                payload[key] = MlpModel([np.array(w, float) for w in m["weights"]],
                                        [np.array(b, float) for b in m["biases"]], m["activation"])
            elif "array" in val:
                payload[key] = np.array(val["array"], float)
            else:
                payload[key] = val["value"]
        return cls(d["solver"], payload, info=d.get("info", {}))


def eval_bridge(model: BridgeModel, a, w, x):
    """Evaluate a bridge at one point (scalar) or at aligned arrays of points."""
    scalar = np.ndim(a) == 0
    u = _u_rows(a, w, x)
    if u.shape[1] != model.input_dim:
        raise ValueError(f"bridge expects {model.input_dim} input columns, got {u.shape[1]}")
    out = model.predict_u(u)
    return float(out[0]) if scalar else out


def save_bridge(model: BridgeModel, path) -> None:
    Path(path).write_text(json.dumps(model.to_dict()))


def load_bridge(path) -> BridgeModel:
    return BridgeModel.from_dict(json.loads(Path(path).read_text()))


# ----------------------------------------------------------------- helpers


def _weight_values(weights, n):
    if weights is None:
        return None
    vals = weights.values if isinstance(weights, WeightVector) else np.asarray(weights, float)
    if vals.shape[0] != n:
        raise SolverError(f"weight vector has length {vals.shape[0]}, dataset has {n}")
    return vals


def _u_kernel(ds: Dataset, scale: float) -> RbfKernelSpec:
    return kernel_spec_from_data([ds.a, ds.w, ds.x], [scale])


def _v_kernel(ds: Dataset, scale: float, product: bool = True) -> RbfKernelSpec:
    if product:
        return kernel_spec_from_data([ds.a, ds.z, ds.x], [scale])
    return kernel_spec_from_data([ds.v], [scale])


def _stage_split(n: int, frac: float, rng: RngState):
    m1 = int(round(n * frac))
    if m1 < 3 or n - m1 < 3:
        raise SolverError(f"stage sizes {m1}/{n - m1} too small (need >= 3 each)")
    perm = rng.stream("solver-split").permutation(n)
    return np.sort(perm[:m1]), np.sort(perm[m1:])


def mmr_loss(residuals, k_v, weights=None, statistic: str = "V") -> float:
    """Weighted MMR quadratic form of residuals.

    V-statistic: ``r' D^{1/2} K D^{1/2} r / n^2``; U-statistic deletes the
    diagonal of ``K`` and divides by ``n (n - 1)``.
    """
    r = np.asarray(residuals, float).ravel()
    k = np.asarray(k_v, float)
    n = r.shape[0]
    if k.shape != (n, n):
        raise ValueError(f"residual length {n} does not match Gram {k.shape}")
    if weights is not None:
        wv = _weight_values(weights, n)
        r = np.sqrt(wv) * r
    quad = r @ k @ r
    if statistic == "V":
        return float(quad / n**2)
    if statistic == "U":
        if n < 2:
            raise ValueError("U-statistic needs n >= 2")
        return float((quad - np.sum(np.diag(k) * r * r)) / (n * (n - 1)))
    raise ValueError("statistic must be 'U' or 'V'")


# --------------------------------------------------------------------- PMMR


def pmmr_coefficients(l_u, k_v, y, eta, weights=None, delta=None) -> np.ndarray:
    """``(L K_w L + eta L + delta I)^{-1} L K_w y`` with ``K_w = D^{1/2} K D^{1/2}``."""
    if weights is not None:
        s = np.sqrt(weights)
        k_v = s[:, None] * k_v * s[None, :]
    lk = l_u @ k_v
    system = lk @ l_u + eta * l_u
    return jittered_solve(system, lk @ y, delta)


def fit_pmmr(dataset: Dataset, weights, hp: PmmrParams = PmmrParams(), rng: RngState | None = None) -> BridgeModel:
    n = dataset.n
    if n < 5:
        raise SolverError("PMMR needs at least 5 observations")
    wv = _weight_values(weights, n)
    u_kernel = _u_kernel(dataset, hp.u_scale)
    v_kernel = _v_kernel(dataset, hp.v_scale)
    u = dataset.u
    v = dataset.v
    l_u = gram(u, u, u_kernel)
    k_v = gram(v, v, v_kernel)
    alpha = pmmr_coefficients(l_u, k_v, dataset.y, hp.eta, wv)
    return BridgeModel("PMMR", {"alpha": alpha, "u_train": u, "u_kernel": u_kernel})


# ---------------------------------------------------------------------- KPV


def kpv_stage1(k_v11, k_v12, lam1) -> np.ndarray:
    m1 = k_v11.shape[0]
    return jittered_solve(k_v11 + m1 * lam1 * np.eye(m1), k_v12, delta=0.0)


def kpv_stage2(g_mu, y2, lam2, weights=None, delta=None) -> np.ndarray:
    """Symmetric weighted second stage; returns ``beta = D^{1/2} eta``."""
    m2 = g_mu.shape[0]
    s = np.ones(m2) if weights is None else np.sqrt(weights)
    g_w = s[:, None] * g_mu * s[None, :]
    eta = jittered_solve(g_w + m2 * lam2 * np.eye(m2), s * y2, delta)
    return s * eta


def fit_kpv(dataset: Dataset, weights, hp: KpvParams = KpvParams(), rng: RngState | None = None) -> BridgeModel:
    n = dataset.n
    if n < 10:
        raise SolverError("KPV needs at least 10 observations")
    wv = _weight_values(weights, n)
    rng = rng or RngState(0)
    i1, i2 = _stage_split(n, hp.split, rng)
    u_kernel = _u_kernel(dataset, hp.kernel_scale)
    v_kernel = _v_kernel(dataset, hp.kernel_scale)
    u, v = dataset.u, dataset.v
    v1 = v[i1]
    gamma = kpv_stage1(gram(v1, v1, v_kernel), gram(v1, v[i2], v_kernel), hp.lam1)
    u1 = u[i1]
    g_mu = gamma.T @ gram(u1, u1, u_kernel) @ gamma
    beta = kpv_stage2(g_mu, dataset.y[i2], hp.lam2, None if wv is None else wv[i2])
    payload = {"gamma": gamma, "beta": beta, "u_stage1": u1, "v_stage1": v1, "v_stage2": v[i2],
               "u_kernel": u_kernel, "v_kernel": v_kernel}
    return BridgeModel("KPV", payload, info={"stage1": i1.tolist(), "stage2": i2.tolist()})


# --------------------------------------------------------------------- DFPV


def dfpv_stage2(m_hat, y2, lam2, weights=None, delta=None) -> np.ndarray:
    """``(M' D M + m2 lam2 I + delta I)^{-1} M' D y2``."""
    m2, d = m_hat.shape
    dw = np.ones(m2) if weights is None else np.asarray(weights, float)
    mtd = m_hat.T * dw
    return jittered_solve(mtd @ m_hat + m2 * lam2 * np.eye(d), mtd @ y2, delta)


def fit_dfpv(dataset: Dataset, weights, hp: DfpvParams = DfpvParams(), rng: RngState | None = None) -> BridgeModel:
    n = dataset.n
    if n < 10:
        raise SolverError("DFPV needs at least 10 observations")
    wv = _weight_values(weights, n)
    rng = rng or RngState(0)
    i1, i2 = _stage_split(n, hp.split, rng)
    u_kernel = _u_kernel(dataset, hp.u_scale)
    v_kernel = _v_kernel(dataset, hp.v_scale)
    features = RffSpec.draw(u_kernel, hp.n_features, rng.stream("solver-init"))
    u, v = dataset.u, dataset.v
    phi1 = rff_features(u[i1], features)
    v1 = v[i1]
    m1 = len(i1)
    coef = jittered_solve(gram(v1, v1, v_kernel) + m1 * hp.lam1 * np.eye(m1), phi1, delta=0.0)
    m_hat = gram(v[i2], v1, v_kernel) @ coef
    beta = dfpv_stage2(m_hat, dataset.y[i2], hp.lam2, None if wv is None else wv[i2])
    return BridgeModel("DFPV", {"features": features, "beta": beta, "m_hat": m_hat},
                       info={"stage1": i1.tolist(), "stage2": i2.tolist()})


# --------------------------------------------------------------------- NMMR


def nmmr_objective(mlp: MlpModel, inputs, y, k_v, weights=None, statistic="V",
                   weight_decay=0.0, y_mean=0.0, y_std=1.0):
    """Loss and parameter gradients of the weighted MMR objective plus L2 decay.

    The bridge is ``y_mean + y_std * mlp(inputs)``.
    """
    n = inputs.shape[0]
    h = y_mean + y_std * mlp_forward(mlp, inputs)
    r = y - h
    s = np.ones(n) if weights is None else np.sqrt(weights)
    rs = s * r
    if statistic == "V":
        kr = k_v @ rs
        loss = rs @ kr / n**2
        d_rs = 2.0 * kr / n**2
    else:
        kr = k_v @ rs - np.diag(k_v) * rs
        loss = rs @ kr / (n * (n - 1))
        d_rs = 2.0 * kr / (n * (n - 1))
    d_out = -y_std * s * d_rs
    grads = mlp_backward(mlp, inputs, d_out)
    if weight_decay:
        loss += weight_decay * sum(float(np.sum(w * w)) for w in mlp.weights)
        for i, w in enumerate(mlp.weights):
            grads[i] = grads[i] + 2.0 * weight_decay * w
    return float(loss), grads


def fit_nmmr(dataset: Dataset, weights, hp: NmmrParams = NmmrParams(), rng: RngState | None = None) -> BridgeModel:
    n = dataset.n
    if n < 20:
        raise SolverError("NMMR needs at least 20 observations")
    wv = _weight_values(weights, n)
    rng = rng or RngState(0)
    u = dataset.u
    u_mean = u.mean(axis=0)
    u_std = u.std(axis=0)
    u_std[u_std < 1e-12] = 1.0
    inputs = (u - u_mean) / u_std
    y = np.asarray(dataset.y, float)
    y_mean, y_std = float(y.mean()), float(y.std()) or 1.0
    v_kernel = _v_kernel(dataset, hp.v_scale, hp.product_kernel)
    k_v = gram(dataset.v, dataset.v, v_kernel)

    mlp = MlpModel.init([u.shape[1], *hp.hidden, 1], rng.stream("solver-init"), hp.activation)
    state = AdamState.zeros_like(mlp)
    trace = []
    for epoch in range(hp.epochs):
        loss, grads = nmmr_objective(mlp, inputs, y, k_v, wv, hp.statistic, hp.weight_decay, y_mean, y_std)
        if not np.isfinite(loss):
            raise SolverError(f"NMMR diverged at epoch {epoch}; loss trace tail {trace[-5:]}")
        trace.append(loss)
        mlp, state = adam_step(mlp, grads, state, hp.lr)
    payload = {"mlp": mlp, "u_mean": u_mean, "u_std": u_std, "y_mean": y_mean, "y_std": y_std}
    return BridgeModel("NMMR", payload, info={"loss_trace": trace})


# ----------------------------------------------------------------- dispatch

_FITTERS = {"PMMR": fit_pmmr, "KPV": fit_kpv, "DFPV": fit_dfpv, "NMMR": fit_nmmr}


def fit_bridge(dataset: Dataset, weights, hp, rng: RngState | None = None) -> BridgeModel:
    """Fit the solver selected by the type of ``hp``."""
    return _FITTERS[hp.solver](dataset, weights, hp, rng)


def params_to_dict(hp) -> dict:
    return {"solver": hp.solver, **asdict(hp)}


def params_from_dict(d: dict):
    d = dict(d)
    solver = d.pop("solver")
    if "hidden" in d:
        d["hidden"] = tuple(d["hidden"])
    return make_params(solver, **d)
