"""Kernels, regularized solves, random features and a small hand-differentiated MLP."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
from scipy import linalg
from scipy.special import erf

logger = logging.getLogger(__name__)

_MEDIAN_SUBSAMPLE = 2000


class SolveError(RuntimeError):
    """Raised when a regularized solve fails even after jitter escalation."""


# ---------------------------------------------------------------- kernels


@dataclass(frozen=True)
class RbfKernelSpec:
    """Product of per-block RBF kernels on concatenated input columns.

    ``block_sizes[b]`` columns share ``lengthscales[b]``.
    """

    block_sizes: tuple
    lengthscales: tuple
    scale: float = 1.0

    def __post_init__(self):
        if len(self.block_sizes) != len(self.lengthscales):
            raise ValueError("one lengthscale per block required")
        if any(ls <= 0 or not np.isfinite(ls) for ls in self.lengthscales):
            raise ValueError(f"lengthscales must be positive, got {self.lengthscales}")
        if self.scale <= 0:
            raise ValueError("kernel scale must be positive")

    @property
    def dim(self) -> int:
        return int(sum(self.block_sizes))

    def column_lengthscales(self) -> np.ndarray:
        return np.repeat(np.asarray(self.lengthscales, float), self.block_sizes)

    def to_dict(self) -> dict:
        return {
            "block_sizes": [int(b) for b in self.block_sizes],
            "lengthscales": [float(v) for v in self.lengthscales],
            "scale": float(self.scale),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RbfKernelSpec":
        return cls(tuple(d["block_sizes"]), tuple(d["lengthscales"]), d["scale"])


def median_heuristic(points, rng: np.random.Generator | None = None) -> float:
    """Median pairwise Euclidean distance (subsampled to 2000 rows)."""
    p = np.asarray(points, dtype=float)
    if p.ndim == 1:
        p = p[:, None]
    if p.shape[0] < 2:
        raise ValueError("median heuristic needs at least 2 rows")
    if p.shape[0] > _MEDIAN_SUBSAMPLE:
        rng = rng if rng is not None else np.random.default_rng(0)
        p = p[rng.choice(p.shape[0], _MEDIAN_SUBSAMPLE, replace=False)]
    sq = np.sum(p**2, axis=1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * p @ p.T
    iu = np.triu_indices(p.shape[0], k=1)
    med = float(np.sqrt(np.median(np.maximum(d2[iu], 0.0))))
    return med if med > 1e-12 else 1.0


def kernel_spec_from_data(blocks, scales=None, kernel_scale: float = 1.0) -> RbfKernelSpec:
    """Per-block median-heuristic lengthscales multiplied by bandwidth scales."""
    blocks = [np.asarray(b, float).reshape(len(b), -1) for b in blocks]
    scales = [1.0] * len(blocks) if scales is None else list(scales)
    if len(scales) == 1 and len(blocks) > 1:
        scales = scales * len(blocks)
    ls = tuple(s * median_heuristic(b) for s, b in zip(scales, blocks))
    return RbfKernelSpec(tuple(b.shape[1] for b in blocks), ls, kernel_scale)


def sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sa = np.sum(a * a, axis=1)
    sb = np.sum(b * b, axis=1)
    d2 = sa[:, None] + sb[None, :] - 2.0 * (a @ b.T)
    return np.maximum(d2, 0.0)


def gram(rows_a, rows_b, spec: RbfKernelSpec) -> np.ndarray:
    """Kernel matrix ``scale * exp(-sum_b |d_b|^2 / (2 ls_b^2))``."""
    ra = np.atleast_2d(np.asarray(rows_a, float))
    rb = np.atleast_2d(np.asarray(rows_b, float))
    if ra.shape[1] != spec.dim or rb.shape[1] != spec.dim:
        raise ValueError(f"kernel expects {spec.dim} columns, got {ra.shape[1]} and {rb.shape[1]}")
    ls = spec.column_lengthscales()
    sa, sb = ra / ls, rb / ls
    k = spec.scale * np.exp(-0.5 * sq_dists(sa, sb))
    if rows_a is rows_b:
        k = 0.5 * (k + k.T)
        np.fill_diagonal(k, spec.scale)
    return k


# ------------------------------------------------------------ linear algebra


def default_jitter(a: np.ndarray) -> float:
    n = a.shape[0]
    return 1e-8 * abs(float(np.trace(a))) / max(n, 1)


def jittered_solve(a, b, delta: float | None = None, max_escalations: int = 6, return_jitter: bool = False):
    """Solve ``(A + delta I) X = B`` through a Cholesky factorization.

    ``delta=None`` uses ``1e-8 * trace(A) / n``. If the factorization fails the
    jitter is multiplied by 10, at most ``max_escalations`` times.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ValueError(f"A must be square, got {a.shape}")
    if b.shape[0] != a.shape[0]:
        raise ValueError(f"B has {b.shape[0]} rows, A is {a.shape[0]}x{a.shape[0]}")
    if not (np.isfinite(a).all() and np.isfinite(b).all()):
        raise SolveError("non-finite entries in linear system")
    if delta is None:
        delta = default_jitter(a)
    if delta < 0:
        raise ValueError("jitter must be nonnegative")
    sym = 0.5 * (a + a.T)
    eye = np.eye(a.shape[0])
    d = float(delta)
    for attempt in range(max_escalations + 1):
        try:
            factor = linalg.cho_factor(sym + d * eye, lower=True, check_finite=False)
            x = linalg.cho_solve(factor, b, check_finite=False)
            if np.isfinite(x).all():
                if attempt:
                    logger.debug("jittered_solve escalated jitter to %g", d)
                return (x, d) if return_jitter else x
        except linalg.LinAlgError:
            pass
        d = d * 10.0 if d > 0 else max(1e-12, default_jitter(a) or 1e-12)
    raise SolveError(f"factorization failed after {max_escalations} jitter escalations (last delta={d / 10:g})")


# ------------------------------------------------------- localization kernel

_TG_MASS = erf(1.0 / np.sqrt(2.0))  # int_{-1}^{1} phi


def trunc_gaussian(u):
    """Standard normal density truncated to ``[-1, 1]`` and renormalized."""
    u = np.asarray(u, dtype=float)
    out = np.where(np.abs(u) <= 1.0, np.exp(-0.5 * u * u) / np.sqrt(2.0 * np.pi) / _TG_MASS, 0.0)
    return out if out.ndim else float(out)


TRUNC_GAUSSIAN_MU2 = 1.0 - 2.0 * np.exp(-0.5) / np.sqrt(2.0 * np.pi) / _TG_MASS


# --------------------------------------------------- random Fourier features


@dataclass(frozen=True, eq=False)
class RffSpec:
    """Cosine random features ``sqrt(2/d) cos(x Omega + b)``."""

    frequencies: np.ndarray  # (input_dim, d)
    phases: np.ndarray  # (d,)

    def __post_init__(self):
        f = np.array(self.frequencies, float)
        p = np.array(self.phases, float).ravel()
        if f.ndim != 2 or f.shape[1] != p.shape[0] or p.shape[0] < 1:
            raise ValueError("frequency matrix and phase vector disagree on feature count")
        if not (np.isfinite(f).all() and np.isfinite(p).all()):
            raise ValueError("non-finite random features")
        object.__setattr__(self, "frequencies", f)
        object.__setattr__(self, "phases", p)

    @property
    def d(self) -> int:
        return self.phases.shape[0]

    @classmethod
    def draw(cls, kernel: RbfKernelSpec, d: int, rng: np.random.Generator) -> "RffSpec":
        """Features whose inner products approximate ``kernel`` (scale ignored)."""
        if d < 1:
            raise ValueError("feature dimension must be >= 1")
        ls = kernel.column_lengthscales()
        freq = rng.standard_normal((kernel.dim, d)) / ls[:, None]
        phase = rng.uniform(0.0, 2.0 * np.pi, d)
        return cls(freq, phase)


def rff_features(rows, spec: RffSpec) -> np.ndarray:
    r = np.atleast_2d(np.asarray(rows, float))
    if r.shape[1] != spec.frequencies.shape[0]:
        raise ValueError(f"features expect {spec.frequencies.shape[0]} columns, got {r.shape[1]}")
    return np.sqrt(2.0 / spec.d) * np.cos(r @ spec.frequencies + spec.phases)


# ----------------------------------------------------------------------- MLP

_ACTIVATIONS = ("relu", "tanh")


@dataclass(eq=False)
class MlpModel:
    """Fully connected net with scalar output; the last layer is affine."""

    weights: list
    biases: list
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {_ACTIVATIONS}")
        if len(self.weights) != len(self.biases) or not self.weights:
            raise ValueError("need one bias per weight matrix")
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            if w.shape[1] != b.shape[0]:
                raise ValueError(f"layer {i}: weight {w.shape} incompatible with bias {b.shape}")
            if i and self.weights[i - 1].shape[1] != w.shape[0]:
                raise ValueError(f"layer {i}: input width {w.shape[0]} != previous output")
        if self.weights[-1].shape[1] != 1:
            raise ValueError("output layer must have width 1")

    @property
    def layer_sizes(self) -> list:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    def params(self) -> list:
        return [*self.weights, *self.biases]

    def copy(self) -> "MlpModel":
        return MlpModel([w.copy() for w in self.weights], [b.copy() for b in self.biases], self.activation)

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, activation: str = "tanh") -> "MlpModel":
        """Glorot-uniform weights, zero biases."""
        ws, bs = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (fan_in + fan_out))
            ws.append(rng.uniform(-lim, lim, (fan_in, fan_out)))
            bs.append(np.zeros(fan_out))
        return cls(ws, bs, activation)


def _act(z, kind):
    return np.tanh(z) if kind == "tanh" else np.maximum(z, 0.0)


def _act_grad(z, h, kind):
    return 1.0 - h * h if kind == "tanh" else (z > 0).astype(float)


def _forward(model: MlpModel, inputs):
    x = np.atleast_2d(np.asarray(inputs, float))
    if x.shape[1] != model.weights[0].shape[0]:
        raise ValueError(f"network expects {model.weights[0].shape[0]} inputs, got {x.shape[1]}")
    pre, post = [], [x]
    h = x
    last = len(model.weights) - 1
    for i, (w, b) in enumerate(zip(model.weights, model.biases)):
        z = h @ w + b
        pre.append(z)
        h = z if i == last else _act(z, model.activation)
        post.append(h)
    return pre, post


def mlp_forward(model: MlpModel, inputs) -> np.ndarray:
    return _forward(model, inputs)[1][-1][:, 0]


def mlp_backward(model: MlpModel, inputs, output_grads) -> list:
    """Gradients of ``sum_i g_i * h(u_i)``; same layout as ``model.params()``."""
    pre, post = _forward(model, inputs)
    g = np.asarray(output_grads, float).reshape(-1, 1)
    if g.shape[0] != post[0].shape[0]:
        raise ValueError(f"got {g.shape[0]} output grads for {post[0].shape[0]} inputs")
    n_layers = len(model.weights)
    gw, gb = [None] * n_layers, [None] * n_layers
    delta = g
    for i in range(n_layers - 1, -1, -1):
        if i != n_layers - 1:
            delta = delta * _act_grad(pre[i], post[i + 1], model.activation)
        gw[i] = post[i].T @ delta
        gb[i] = delta.sum(axis=0)
        if i:
            delta = delta @ model.weights[i].T
    return [*gw, *gb]


@dataclass
class AdamState:
    m: list
    v: list
    t: int = 0

    @classmethod
    def zeros_like(cls, model: MlpModel) -> "AdamState":
        return cls([np.zeros_like(p) for p in model.params()], [np.zeros_like(p) for p in model.params()])


def adam_step(model: MlpModel, grads, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update. Returns a new model and state."""
    params = model.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise ValueError("gradient shapes do not match model parameters")
    if len(state.m) != len(params) or any(m.shape != p.shape for m, p in zip(state.m, params)):
        raise ValueError("optimizer state does not match model parameters")
    t = state.t + 1
    new_m, new_v, new_p = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        m = beta1 * m + (1.0 - beta1) * g
        v = beta2 * v + (1.0 - beta2) * g * g
        m_hat = m / (1.0 - beta1**t)
        v_hat = v / (1.0 - beta2**t)
        new_p.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m)
        new_v.append(v)
    k = len(model.weights)
    return MlpModel(new_p[:k], new_p[k:], model.activation), AdamState(new_m, new_v, t)
