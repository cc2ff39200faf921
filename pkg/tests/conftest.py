import numpy as np
import pytest

from daprox.core import Dataset, RngState, TreatmentSupport
from daprox.dgp import SyntheticDGP


@pytest.fixture(scope="session")
def synth_dgp():
    return SyntheticDGP()


@pytest.fixture(scope="session")
def small_synth(synth_dgp):
    data, _ = synth_dgp.sample(120, RngState(11).child("train"))
    return data


def toy_dataset(n=40, seed=0, dz=1, dw=1, dx=2, support=(0.0, 1.0)):
    """Smooth toy data with a known bridge-like structure."""
    gen = np.random.default_rng(seed)
    x = gen.normal(size=(n, dx))
    u = gen.normal(size=n)
    z = u[:, None] + 0.5 * gen.normal(size=(n, dz))
    w = u[:, None] + 0.5 * gen.normal(size=(n, dw))
    lo, hi = support
    a = lo + (hi - lo) / (1.0 + np.exp(-(0.5 * x[:, 0] + 0.5 * u)))
    y = np.sin(3 * a) + x[:, 0] + u + 0.1 * gen.normal(size=n)
    return Dataset(y, a, z, w, x, TreatmentSupport(lo, hi))


@pytest.fixture
def toy():
    return toy_dataset()


# acceptance criteria record one line each; printed at the end of the run
ACCEPTANCE_LINES = {}


def record_criterion(number, title, ok, detail=""):
    ACCEPTANCE_LINES[number] = f"criterion {number} [{'PASS' if ok else 'FAIL'}] {title}: {detail}"
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
