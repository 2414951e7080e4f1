"""Shared fixtures and the acceptance summary printed at the end of a run."""
import numpy as np
import pytest

from mvhedge.coeffs import solve_coefficients
from mvhedge.model import IndexLinearPayoff, ModelSpec, PowerRowVolatility
from mvhedge.presets import index_example

ACCEPTANCE = {}


def record(criterion, ok, detail):
    """Store one acceptance line; the terminal summary prints them in order."""
    line = f"{'PASS' if ok else 'FAIL'} criterion {criterion}: {detail}"
    ACCEPTANCE[criterion] = line
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[key])


@pytest.fixture(scope="session")
def solvable_spec():
    return index_example(T=0.5, beta=1.0)


@pytest.fixture(scope="session")
def solvable_coeffs(solvable_spec):
    return solve_coefficients(solvable_spec)


@pytest.fixture(scope="session")
def cev_specs():
    return {b: index_example(T=1.0, beta=b) for b in (0.0, 0.25, 0.5, 1.0)}


@pytest.fixture(scope="session")
def cev_coeffs(cev_specs):
    return {b: solve_coefficients(s) for b, s in cev_specs.items()}


def small_model(T=0.5, payoff=None):
    vol = PowerRowVolatility([[0.2, 0.0], [-0.1, 0.25]], [1.0, 1.0])
    return ModelSpec(d=1, m=1, z0=[0.3, 0.2], Sigma0=[[0.2, 0.05], [0.05, 0.2]],
                     mu=[0.06, 0.02], F=[[0.2, 0.05], [0.05, 0.2]],
                     delta=[[0.3, 0.1], [-0.05, 0.3]], volatility=vol,
                     payoff=payoff or IndexLinearPayoff(1), T=T, x0=[1.0, 1.0], name="small")


@pytest.fixture(scope="session")
def small_spec():
    return small_model()


@pytest.fixture(scope="session")
def small_coeffs(small_spec):
    return solve_coefficients(small_spec)


def complete_market(theta=(0.3, -0.2), T=1.0):
    """Deterministic MPR: no filtering noise, no non-tradables."""
    n = len(theta)
    vol = PowerRowVolatility(0.2 * np.eye(n), np.ones(n))
    return ModelSpec(d=n, m=0, z0=theta, Sigma0=np.zeros((n, n)), mu=np.zeros(n),
                     F=np.zeros((n, n)), delta=np.zeros((n, n)), volatility=vol,
                     payoff=IndexLinearPayoff(0), T=T, x0=np.ones(n), name="complete")
