import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import toy_dataset
from daprox.core import Dataset, RngState, TreatmentSupport
from daprox.density import fit_gps
from daprox.evaluation import bridge_average_panel
from daprox.numerics import MlpModel, RbfKernelSpec, gram
from daprox.solvers import (BridgeModel, DfpvParams, KpvParams, NmmrParams, PmmrParams, SolverError, dfpv_stage2,
                            eval_bridge, fit_bridge, fit_dfpv, fit_kpv, fit_nmmr, fit_pmmr, kpv_stage1, kpv_stage2,
                            load_bridge, make_params, mmr_loss, nmmr_objective, params_from_dict, params_to_dict,
                            pmmr_coefficients, save_bridge)
from daprox.weights import WeightVector, policy_weights


def random_spd(n, seed):
    m = np.random.default_rng(seed).normal(size=(n, n))
    return m @ m.T + 0.1 * np.eye(n)


# ------------------------------------------------------------------ MMR loss


def double_sum(r, k, w, stat):
    n = len(r)
    total = 0.0
    for i in range(n):
        for j in range(n):
            if stat == "U" and i == j:
                continue
            total += np.sqrt(w[i] * w[j]) * r[i] * r[j] * k[i, j]
    return total / (n * n if stat == "V" else n * (n - 1))


def test_mmr_two_point_example():
    rho = 0.3
    k = np.array([[1.0, rho], [rho, 1.0]])
    assert mmr_loss([1.0, 1.0], k, statistic="V") == pytest.approx((1 + rho) / 2, abs=1e-15)
    assert mmr_loss([1.0, 1.0], k, statistic="U") == pytest.approx(rho, abs=1e-15)
    assert mmr_loss([0.0, 0.0], k, statistic="V") == 0.0
    assert mmr_loss([0.0, 0.0], k, statistic="U") == 0.0
    with pytest.raises(ValueError):
        mmr_loss([1.0, 2.0, 3.0], k)


@settings(max_examples=50, deadline=None)
@given(n=st.integers(2, 5), seed=st.integers(0, 10_000), c=st.floats(0.1, 10.0), stat=st.sampled_from("UV"))
def test_mmr_matches_double_sum_and_homogeneity(n, seed, c, stat):
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n, 2))
    k = gram(x, x, RbfKernelSpec((2,), (1.0,)))
    r = gen.normal(size=n)
    w = gen.uniform(0.2, 3.0, n)
    val = mmr_loss(r, k, w, stat)
    assert val == pytest.approx(double_sum(r, k, w, stat), abs=1e-12)
    assert mmr_loss(r, k, c * w, stat) == pytest.approx(c * val, rel=1e-12, abs=1e-15)
    # weighted loss equals the unweighted loss of sqrt(w) * r
    assert mmr_loss(r, k, w, stat) == pytest.approx(mmr_loss(np.sqrt(w) * r, k, None, stat), abs=1e-12)


# ---------------------------------------------------------------------- PMMR


def test_pmmr_dense_inverse_oracle():
    l, k = random_spd(3, 0), random_spd(3, 1)
    y = np.array([1.0, -2.0, 0.5])
    w = np.array([0.5, 2.0, 1.5])
    eta, delta = 0.3, 1e-6
    d = np.diag(np.sqrt(w))
    kw = d @ k @ d
    oracle = np.linalg.inv(l @ kw @ l + eta * l + delta * np.eye(3)) @ l @ kw @ y
    np.testing.assert_allclose(pmmr_coefficients(l, k, y, eta, w, delta), oracle, atol=1e-8)


def test_pmmr_identity_weights_and_zero_target(toy):
    hp = PmmrParams(eta=0.1)
    plain = fit_pmmr(toy, None, hp)
    ones = fit_pmmr(toy, np.ones(toy.n), hp)
    np.testing.assert_allclose(ones.payload["alpha"], plain.payload["alpha"], atol=1e-10)
    zero = fit_pmmr(toy.with_outcome(np.zeros(toy.n)), None, hp)
    np.testing.assert_array_equal(zero.payload["alpha"], 0.0)
    with pytest.raises(SolverError):
        fit_pmmr(toy.subset(np.arange(4)), None, hp)
    with pytest.raises(SolverError):
        fit_pmmr(toy, np.ones(3), hp)


def test_pmmr_eval_examples():
    spec = RbfKernelSpec((1, 1, 1), (1.0, 1.0, 1.0), scale=1.7)
    zero = BridgeModel("PMMR", {"alpha": np.zeros(2), "u_train": np.zeros((2, 3)), "u_kernel": spec})
    assert eval_bridge(zero, 0.3, [1.0], [2.0]) == 0.0
    one = BridgeModel("PMMR", {"alpha": np.array([2.0]), "u_train": np.array([[0.1, 0.2, 0.3]]), "u_kernel": spec})
    assert eval_bridge(one, 0.1, [0.2], [0.3]) == pytest.approx(2 * 1.7)
    with pytest.raises(ValueError):
        eval_bridge(one, 0.1, [0.2, 0.0], [0.3])


# ----------------------------------------------------------------------- KPV


def test_kpv_stage_oracles():
    k11, k12 = random_spd(3, 2), np.random.default_rng(3).normal(size=(3, 3))
    lam1 = 0.05
    gamma = kpv_stage1(k11, k12, lam1)
    np.testing.assert_allclose(gamma, np.linalg.inv(k11 + 3 * lam1 * np.eye(3)) @ k12, atol=1e-8)
    g = random_spd(3, 4)
    y2 = np.array([0.3, -1.0, 2.0])
    w = np.array([1.5, 0.5, 2.0])
    lam2, delta = 0.01, 1e-6
    d = np.diag(np.sqrt(w))
    eta = np.linalg.inv(d @ g @ d + 3 * lam2 * np.eye(3) + delta * np.eye(3)) @ d @ y2
    np.testing.assert_allclose(kpv_stage2(g, y2, lam2, w, delta), d @ eta, atol=1e-8)
    np.testing.assert_array_equal(kpv_stage2(g, np.zeros(3), lam2, w), 0.0)


def test_kpv_identity_weights(toy):
    hp = KpvParams()
    a = fit_kpv(toy, None, hp, RngState(1))
    b = fit_kpv(toy, np.ones(toy.n), hp, RngState(1))
    np.testing.assert_allclose(b.payload["beta"], a.payload["beta"], atol=1e-10)
    assert a.info["stage1"] and set(a.info["stage1"]).isdisjoint(a.info["stage2"])
    with pytest.raises(SolverError):
        fit_kpv(toy.subset(np.arange(8)), None, hp)


# ---------------------------------------------------------------------- DFPV


def test_dfpv_stage2_oracles():
    m = np.ones((6, 1))
    assert dfpv_stage2(m, np.ones(6), 1e-12, delta=0.0)[0] == pytest.approx(1.0, abs=1e-9)
    gen = np.random.default_rng(5)
    m = gen.normal(size=(4, 2))
    y = gen.normal(size=4)
    w = gen.uniform(0.5, 2.0, 4)
    lam2, delta = 0.02, 1e-7
    d = np.diag(w)
    oracle = np.linalg.inv(m.T @ d @ m + 4 * lam2 * np.eye(2) + delta * np.eye(2)) @ m.T @ d @ y
    np.testing.assert_allclose(dfpv_stage2(m, y, lam2, w, delta), oracle, atol=1e-8)


def test_dfpv_identity_weights(toy):
    hp = DfpvParams(n_features=20)
    a = fit_dfpv(toy, None, hp, RngState(2))
    b = fit_dfpv(toy, np.ones(toy.n), hp, RngState(2))
    np.testing.assert_allclose(b.payload["beta"], a.payload["beta"], atol=1e-10)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 1000), lam2=st.floats(1e-4, 10.0))
def test_second_stage_monotonicity(seed, lam2):
    gen = np.random.default_rng(seed)
    m = gen.normal(size=(8, 3))
    y = gen.normal(size=8)
    w = gen.uniform(0.2, 5.0, 8)
    for weights in (None, w):
        b1 = dfpv_stage2(m, y, lam2, weights, delta=0.0)
        b2 = dfpv_stage2(m, y, 10 * lam2, weights, delta=0.0)
        assert np.linalg.norm(b2) <= np.linalg.norm(b1) * (1 + 1e-10)
    g = m @ m.T
    b1 = kpv_stage2(g, y, lam2, None, delta=0.0)
    b2 = kpv_stage2(g, y, 10 * lam2, None, delta=0.0)
    assert np.linalg.norm(b2) <= np.linalg.norm(b1) * (1 + 1e-10)


# ---------------------------------------------------------------------- NMMR


def test_nmmr_frozen_training(toy):
    hp = NmmrParams(epochs=1, lr=0.0, hidden=(8,), weight_decay=0.0)
    model = fit_nmmr(toy, None, hp, RngState(3))
    init = MlpModel.init([toy.u.shape[1], 8, 1], RngState(3).stream("solver-init"), hp.activation)
    for p, q in zip(model.payload["mlp"].params(), init.params()):
        np.testing.assert_array_equal(p, q)


def test_nmmr_trace_finite_on_benchmark(synth_dgp):
    data, _ = synth_dgp.sample(500, RngState(4))
    model = fit_nmmr(data, None, NmmrParams(epochs=200, hidden=(16, 16)), RngState(4))
    trace = np.array(model.info["loss_trace"])
    assert trace.shape == (200,) and np.isfinite(trace).all()
    assert trace[-1] < trace[0]


@pytest.mark.parametrize("stat", ["U", "V"])
def test_nmmr_objective_gradients(stat):
    gen = np.random.default_rng(6)
    net = MlpModel.init([4, 8, 1], gen)
    x = gen.normal(size=(10, 4))
    y = gen.normal(size=10)
    k = gram(x, x, RbfKernelSpec((4,), (1.5,)))
    w = gen.uniform(0.5, 2.0, 10)
    args = (x, y, k, w, stat, 1e-3, 0.2, 1.3)
    _, grads = nmmr_objective(net, *args)
    step = 1e-5
    for p, g in zip(net.params(), grads):
        flat = p.reshape(-1)
        for j in range(flat.size):
            old = flat[j]
            flat[j] = old + step
            up = nmmr_objective(net, *args)[0]
            flat[j] = old - step
            down = nmmr_objective(net, *args)[0]
            flat[j] = old
            fd = (up - down) / (2 * step)
            assert abs(fd - g.reshape(-1)[j]) <= 1e-3 * max(abs(fd), 1e-6)


def test_nmmr_identity_trajectory(toy):
    hp = NmmrParams(epochs=30, hidden=(8, 8))
    a = fit_nmmr(toy, None, hp, RngState(9))
    b = fit_nmmr(toy, np.ones(toy.n), hp, RngState(9))
    assert a.info["loss_trace"] == b.info["loss_trace"]


# ------------------------------------------------------------ shared surface


@pytest.mark.parametrize("hp", [PmmrParams(), KpvParams(), DfpvParams(n_features=30), NmmrParams(epochs=20)])
def test_bridges_total_and_serializable(hp, toy, tmp_path):
    model = fit_bridge(toy, None, hp, RngState(0))
    gen = np.random.default_rng(1)
    q = (gen.uniform(0, 1, 1000), gen.normal(size=(1000, 1)), gen.normal(size=(1000, 2)))
    pred = model.predict(*q)
    assert pred.shape == (1000,) and np.isfinite(pred).all()
    save_bridge(model, tmp_path / "b.json")
    back = load_bridge(tmp_path / "b.json")
    np.testing.assert_allclose(back.predict(*q), pred, rtol=1e-12, atol=1e-12)
    json.loads((tmp_path / "b.json").read_text())


def test_params_roundtrip_and_validation():
    for name in ("PMMR", "KPV", "DFPV", "NMMR"):
        hp = make_params(name)
        assert params_from_dict(params_to_dict(hp)) == hp
    with pytest.raises(ValueError):
        make_params("GMM")
    with pytest.raises(ValueError):
        PmmrParams(eta=0.0)
    with pytest.raises(ValueError):
        NmmrParams(epochs=0)
    with pytest.raises(ValueError):
        KpvParams(split=1.0)


def linear_bridge_data(n, seed):
    gen = np.random.default_rng(seed)
    u = gen.normal(size=n)
    x = gen.normal(size=(n, 1))
    z = u[:, None] + 0.5 * gen.normal(size=(n, 1))
    w = u[:, None] + 0.5 * gen.normal(size=(n, 1))
    a = 1.0 / (1.0 + np.exp(-(x[:, 0] + z[:, 0])))
    y = np.sin(2 * np.pi * a) + x[:, 0] + u + 0.1 * gen.normal(size=n)
    return Dataset(y, a, z, w, x, TreatmentSupport(0.0, 1.0))


def test_target_preservation_under_policy_weights():
    # bridge h = sin(2 pi a) + x + w solves the moment equation, so m0(a, x) = sin(2 pi a) + x
    train = linear_bridge_data(2000, 0)
    hp = PmmrParams(eta=1e-3)
    plain = fit_pmmr(train, None, hp)
    gps = fit_gps(train)
    weights = policy_weights(gps, train, np.full(train.n, 0.5), 5.0, 0.2)
    weighted = fit_pmmr(train, weights, hp)
    grid = np.linspace(0.05, 0.95, 10)
    x_rows = np.random.default_rng(1).normal(size=(10, 1)) * 0.5
    truth = np.sin(2 * np.pi * grid)[None, :] + x_rows
    p0 = bridge_average_panel(plain, train.w, x_rows, grid)
    p1 = bridge_average_panel(weighted, train.w, x_rows, grid)
    err = np.max(np.abs(p0 - truth))
    assert np.max(np.abs(p1 - p0)) < 2 * err
