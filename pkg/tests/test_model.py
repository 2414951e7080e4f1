import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mvhedge.errors import SingularBlock
from mvhedge.model import (ConstantPayoff, IndexLinearPayoff, PowerIndexPayoff, PowerRowVolatility,
                           SmoothPayoff, cev_index_volatility, constant_volatility, eval_gamma,
                           loglinear_volatility, validate)
from mvhedge.presets import SIGMA_Y, index_example

H = 1e-5


def fd_gamma(vol, x):
    """Central differences of gamma and of its analytic first derivative."""
    n = len(x)
    d1 = np.empty((n, n, n))
    d2 = np.empty((n, n, n, n))
    for k in range(n):
        e = np.zeros(n)
        e[k] = H
        d1[k] = (vol.evaluate(x + e)[0] - vol.evaluate(x - e)[0]) / (2 * H)
        d2[k] = (vol.evaluate(x + e, 1)[1] - vol.evaluate(x - e, 1)[1]) / (2 * H)
    return d1, d2


def close_rel(a, b, rel=1e-6):
    scale = max(1.0, np.abs(b).max())
    return np.abs(a - b).max() <= rel * scale


def test_reference_parameters_validate(solvable_spec):
    assert validate(solvable_spec) == []


def test_negative_eigenvalue_reported(solvable_spec):
    bad = solvable_spec.replace(Sigma0=np.diag([0.2, 0.2, -0.1]))
    assert "Sigma0 not positive definite" in validate(bad)


def test_asymmetric_sigma0_reported(solvable_spec):
    S = np.array(solvable_spec.Sigma0)
    S[0, 1] += 1e-3
    assert "Sigma0 not symmetric" in validate(solvable_spec.replace(Sigma0=S))


def test_zero_tradables_reported(solvable_spec):
    bad = solvable_spec.replace(d=0, m=3)
    assert "d ≥ 1 required" in validate(bad)


def test_non_positive_horizon_reported(solvable_spec):
    assert "horizon T > 0 required" in validate(solvable_spec.replace(T=0.0))


def test_validate_is_pure(solvable_spec):
    bad = solvable_spec.replace(Sigma0=-np.eye(3))
    assert validate(bad) == validate(bad)


def test_bayesian_with_signal_drift_reported(solvable_spec):
    assert any("Bayesian" in m for m in validate(solvable_spec.replace(filter_kind="bayesian")))


def test_singular_rho_block():
    vol = PowerRowVolatility([[0.2, 0.0], [0.1, 0.0]], [1.0, 0.0])
    from tests.conftest import small_model
    spec = small_model().replace(volatility=vol)
    with pytest.raises(SingularBlock):
        eval_gamma(spec, np.array([1.0, 1.0]))
    assert any("rho" in m for m in validate(spec))


@pytest.mark.parametrize("beta,y,factor", [(1.0, 1.0, 1.0), (0.0, 3.7, 1.0), (0.5, 4.0, 2.0)])
def test_cev_index_row(beta, y, factor):
    spec = index_example(beta=beta)
    g = eval_gamma(spec, np.array([1.0, 1.0, y]))[0]
    np.testing.assert_allclose(g[2], factor * np.array(SIGMA_Y), rtol=1e-15)


def test_cev_zero_index_is_absorbed():
    vol = index_example(beta=0.5).volatility
    g, dg, d2g = vol.evaluate(np.array([1.0, 1.0, -0.1]), 2)
    assert not g[2].any() and not dg[2].any() and not d2g[2].any()
    X = np.array([[1.0, 1.0, -0.2], [1.0, 1.0, 0.3]])
    np.testing.assert_array_equal(vol.absorb(X)[:, 2], [0.0, 0.3])


def test_constant_index_is_never_absorbed():
    X = np.array([[1.0, 1.0, -0.2]])
    assert index_example(beta=0.0).volatility.absorb(X)[0, 2] == -0.2


def test_factories():
    m = np.array([[0.2, 0.0], [0.1, 0.3]])
    assert constant_volatility(m).kind == "Constant"
    assert loglinear_volatility(m).kind == "LogLinear"
    with pytest.raises(ValueError):
        cev_index_volatility(m, [0.1, 0.2], 1.5, 1)


def test_batch_evaluation_matches_pointwise():
    vol = index_example(beta=0.25).volatility
    X = np.random.default_rng(0).uniform(0.5, 2.0, size=(5, 3))
    g, dg, d2g = vol.evaluate(X, 2)
    for k in range(5):
        gk, dgk, d2gk = vol.evaluate(X[k], 2)
        np.testing.assert_array_equal(g[k], gk)
        np.testing.assert_array_equal(dg[k], dgk)
        np.testing.assert_array_equal(d2g[k], d2gk)


def test_apply_and_flow_generator_match_dense():
    vol = index_example(beta=0.5).volatility
    rng = np.random.default_rng(1)
    X = rng.uniform(0.5, 2.0, size=(4, 3))
    v = rng.normal(size=(4, 3))
    g, dg = vol.evaluate(X, 1)
    np.testing.assert_allclose(vol.apply(X, v), np.einsum("bij,bj->bi", g, v), rtol=1e-14)
    J = np.einsum("bkjl,bl->bkj", dg, v)
    np.testing.assert_allclose(vol.flow_generator(X, v), J, rtol=1e-14)


powers = st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0])
coords = st.floats(0.3, 3.0)


@settings(max_examples=100, deadline=None)
@given(p=st.tuples(powers, powers, powers), x=st.tuples(coords, coords, coords))
def test_volatility_derivatives_match_differences(p, x):
    vecs = np.array([[0.2, 0.0, 0.0], [0.05, 0.2, 0.0], [-0.07, -0.12, 0.27]])
    vol = PowerRowVolatility(vecs, np.array(p))
    x = np.array(x)
    _, dg, d2g = vol.evaluate(x, 2)
    d1, d2 = fd_gamma(vol, x)
    assert close_rel(dg, d1)
    assert close_rel(d2g, d2)


def fd_payoff(pay, x, order):
    n = len(x)
    out = np.empty((n,) * order)
    for k in range(n):
        e = np.zeros(n)
        e[k] = H
        out[k] = (pay.evaluate(x + e, order - 1)[order - 1]
                  - pay.evaluate(x - e, order - 1)[order - 1]) / (2 * H)
    return out


def _smooth():
    return SmoothPayoff(
        value=lambda X: np.exp(0.5 * X[:, 0]) * X[:, 1],
        grad=lambda X: np.stack([0.5 * np.exp(0.5 * X[:, 0]) * X[:, 1], np.exp(0.5 * X[:, 0])], 1),
        hess=lambda X: np.stack([np.stack([0.25 * np.exp(0.5 * X[:, 0]) * X[:, 1],
                                           0.5 * np.exp(0.5 * X[:, 0])], 1),
                                 np.stack([0.5 * np.exp(0.5 * X[:, 0]), 0 * X[:, 0]], 1)], 1),
        third=lambda X: np.array([[[[0.125 * np.exp(0.5 * x[0]) * x[1], 0.25 * np.exp(0.5 * x[0])],
                                    [0.25 * np.exp(0.5 * x[0]), 0.0]],
                                   [[0.25 * np.exp(0.5 * x[0]), 0.0], [0.0, 0.0]]] for x in X]),
        name="exp-times-linear")


@settings(max_examples=100, deadline=None)
@given(x=st.tuples(st.floats(0.2, 3.0), st.floats(0.2, 3.0)),
       kind=st.sampled_from(["linear", "constant", "power2", "power3", "smooth"]))
def test_payoff_derivatives_match_differences(x, kind):
    pay = {"linear": IndexLinearPayoff(1), "constant": ConstantPayoff(2.0),
           "power2": PowerIndexPayoff(1, 2, 0.7), "power3": PowerIndexPayoff(0, 3),
           "smooth": _smooth()}[kind]
    x = np.array(x)
    vals = pay.evaluate(x, 3)
    for r in (1, 2, 3):
        assert close_rel(vals[r], fd_payoff(pay, x, r))


def test_smooth_payoff_missing_derivative():
    pay = SmoothPayoff(value=lambda X: X[:, 0], grad=lambda X: np.ones_like(X))
    with pytest.raises(ValueError):
        pay.evaluate(np.ones(2), 2)
