import numpy as np
import pytest

from mvhedge.coeffs import eval_A, eval_P, eval_V1_solvable, eval_Z1_solvable, solve_coefficients
from mvhedge.errors import FlowsMissing, NumericOverflow
from mvhedge.mc import (FORWARD, PHYSICAL, ClosedFormProvider, estimate_V0_particle,
                        estimate_V0_physical, estimate_V0_solvable, estimate_V1, estimate_Z1_delta,
                        estimate_Z1_flows, girsanov_check, histogram, replay_wealth, simulate)
from mvhedge.mc.paths import path_grid, pair_units
from mvhedge.mc.rng import CHUNK, ChunkNoise, chunk_layout, uniforms
from mvhedge.model import ConstantPayoff, IndexLinearPayoff, ModelSpec, PowerRowVolatility
from tests.conftest import small_model


def within(a, sa, b, sb=0.0, k=3.0):
    return abs(a - b) <= k * np.hypot(sa, sb)


def frozen_spec(base):
    vol = PowerRowVolatility(np.zeros((base.n, base.n)), np.ones(base.n))
    return base.replace(volatility=vol)


# -- grid and random numbers -------------------------------------------------

def test_path_grid():
    g = path_grid(0.5, 2e-3)
    assert len(g) == 251 and g[-1] == 0.5
    with pytest.raises(ValueError):
        path_grid(0.5, 0.0)


def test_chunk_layout():
    assert chunk_layout(CHUNK + 5) == [(0, CHUNK), (1, 5)]
    with pytest.raises(ValueError):
        chunk_layout(0)


def test_noise_prefix_stable():
    a = ChunkNoise(3, 1, 10, 2).draw(1.0)
    b = ChunkNoise(3, 1, 700, 2).draw(1.0)
    np.testing.assert_array_equal(a, b[:10])
    anti = ChunkNoise(3, 1, 10, 2, antithetic=True).draw(1.0)
    np.testing.assert_array_equal(anti[:10], -anti[10:])
    u = uniforms(3, 0, 5, antithetic=True)
    np.testing.assert_array_equal(u[:5], u[5:])


def test_paths_independent_of_path_count(small_spec, small_coeffs):
    a = simulate(small_spec, small_coeffs, PHYSICAL, 100, dt=0.05, seed=4)
    b = simulate(small_spec, small_coeffs, PHYSICAL, CHUNK + 50, dt=0.05, seed=4)
    np.testing.assert_array_equal(a.X_T, b.X_T[:100])


def test_workers_do_not_change_results(small_spec, small_coeffs):
    kw = dict(dt=0.05, seed=9, with_flows=True, antithetic=True)
    a = simulate(small_spec, small_coeffs, FORWARD, 2 * CHUNK + 7, workers=1, **kw)
    b = simulate(small_spec, small_coeffs, FORWARD, 2 * CHUNK + 7, workers=3, **kw)
    for name in ("X_T", "z_T", "chi", "chiTilde", "xi", "logLinv"):
        assert np.array_equal(getattr(a, name), getattr(b, name)), name


def test_antithetic_preserves_mean(small_spec, small_coeffs):
    plain = simulate(small_spec, small_coeffs, PHYSICAL, 20000, dt=0.01, seed=1)
    anti = simulate(small_spec, small_coeffs, PHYSICAL, 10000, dt=0.01, seed=2, antithetic=True)
    m1, s1 = plain.estimate(plain.X_T[:, 1])
    m2, s2 = anti.estimate(anti.X_T[:, 1])
    assert within(m1, s1, m2, s2)
    assert anti.lanes == 20000 and len(anti.units(anti.X_T[:, 1])) == 10000


# -- simulation ---------------------------------------------------------------

def test_zero_volatility_freezes_state(small_spec, small_coeffs):
    spec = frozen_spec(small_spec)
    ens = simulate(spec, small_coeffs, PHYSICAL, 50, dt=0.05, seed=0)
    assert np.all(ens.X_T == np.asarray(spec.x0))
    assert ens.z_T.std(axis=0).min() > 0


def test_xi_identity_without_generator(small_spec, small_coeffs):
    c = small_coeffs.replace(Phi=np.zeros_like(small_coeffs.Phi))
    ens = simulate(small_spec, c, FORWARD, 20, dt=0.05, with_flows=True)
    assert np.array_equal(ens.xi, np.broadcast_to(np.eye(2), ens.xi.shape))


def test_flow_initial_conditions(small_spec, small_coeffs):
    ens = simulate(small_spec, small_coeffs, FORWARD, 5, dt=0.25, with_flows=True)
    assert ens.has_flows
    ens2 = simulate(small_spec, small_coeffs, FORWARD, 5, dt=0.25)
    with pytest.raises(FlowsMissing):
        ens2.require_flows()


def test_filter_mean_follows_ode(solvable_spec, solvable_coeffs):
    ens = simulate(solvable_spec, solvable_coeffs, PHYSICAL, 20000, dt=0.01, seed=5,
                   antithetic=True)
    F, mu, z0 = solvable_spec.F, solvable_spec.mu, np.asarray(solvable_spec.z0)
    # dz/dt = mu - F z, matrix exponential solution
    from scipy.linalg import expm
    T = solvable_spec.T
    zbar = expm(-F * T) @ z0 + np.linalg.solve(F, (np.eye(3) - expm(-F * T)) @ mu)
    m, se = ens.estimate(ens.z_T)
    assert np.all(np.abs(m - zbar) <= 3 * se + 1e-4)


def test_overflow_reported(small_spec, small_coeffs):
    vol = PowerRowVolatility(np.array([[1e200, 0.0], [0.0, 1e200]]), [1.0, 1.0])
    with pytest.raises(NumericOverflow) as info:
        simulate(small_spec.replace(volatility=vol), small_coeffs, PHYSICAL, 10, dt=0.05)
    assert info.value.exit_code == 4


def test_stored_paths(small_spec, small_coeffs):
    ens = simulate(small_spec, small_coeffs, PHYSICAL, 8, dt=0.1, store_paths=True)
    assert ens.X_paths.shape == (6, 8, 2)
    np.testing.assert_array_equal(ens.X_paths[-1], ens.X_T)


# -- V1 and zeta1 -------------------------------------------------------------

def test_v1_constant_payoff_is_A(small_spec, small_coeffs):
    ens = simulate(small_spec, small_coeffs, FORWARD, 200, dt=0.05)
    m, se = estimate_V1(ens, small_coeffs, ConstantPayoff(1.0))
    assert m == pytest.approx(float(eval_A(small_coeffs, 0.0, small_spec.z0)), rel=1e-14)
    assert se == 0.0


def test_v1_needs_forward_measure(small_spec, small_coeffs):
    ens = simulate(small_spec, small_coeffs, PHYSICAL, 10, dt=0.1)
    with pytest.raises(ValueError):
        estimate_V1(ens, small_coeffs, small_spec.payoff)


def test_v1_solvable(solvable_spec, solvable_coeffs):
    ens = simulate(solvable_spec, solvable_coeffs, FORWARD, 20000, seed=3, antithetic=True)
    m, se = estimate_V1(ens, solvable_coeffs, solvable_spec.payoff)
    exact = float(eval_V1_solvable(solvable_coeffs, 0.0, 1.0, solvable_spec.z0))
    assert within(m, se, exact)


def test_zeta_constant_payoff(small_spec, small_coeffs):
    ens = simulate(small_spec, small_coeffs, FORWARD, 100, dt=0.05, with_flows=True)
    m, se = estimate_Z1_flows(ens, small_coeffs, ConstantPayoff(2.0))
    c, z = small_coeffs, np.asarray(small_spec.z0)
    A = float(eval_A(c, 0.0, z))
    np.testing.assert_allclose(m, 2 * A * c.Sigma[0] @ (c.c1[0] + c.c2[0] @ z), rtol=1e-13)
    assert np.all(se < 1e-15)


def test_zeta_flows_solvable(solvable_spec, solvable_coeffs):
    ens = simulate(solvable_spec, solvable_coeffs, FORWARD, 20000, seed=11, with_flows=True,
                   antithetic=True)
    m, se = estimate_Z1_flows(ens, solvable_coeffs, solvable_spec.payoff)
    exact = eval_Z1_solvable(solvable_coeffs, 0.0, 1.0, solvable_spec.z0)
    assert np.all(np.abs(m - exact) <= 3 * se + 1e-12)


def test_zeta_flows_start_checked(small_spec, small_coeffs):
    ens = simulate(small_spec, small_coeffs, FORWARD, 10, dt=0.1, with_flows=True)
    with pytest.raises(ValueError):
        estimate_Z1_flows(ens, small_coeffs, small_spec.payoff, zhat=[9.0, 9.0])


def test_delta_constant_payoff(small_spec, small_coeffs):
    spec = small_spec.replace(payoff=ConstantPayoff(1.0))
    m, _ = estimate_Z1_delta(spec, small_coeffs, n_paths=50, dt=0.05)
    c, z = small_coeffs, np.asarray(spec.z0)
    A = float(eval_A(c, 0.0, z))
    np.testing.assert_allclose(m, A * c.Sigma[0] @ (c.c1[0] + c.c2[0] @ z), rtol=1e-12)


def test_delta_frozen_dynamics(small_spec, small_coeffs):
    """With gamma = 0 the only sensitivity of E[Y_T] is d/dy = 1."""
    spec = frozen_spec(small_spec)
    c = small_coeffs
    m, _ = estimate_Z1_delta(spec, c, n_paths=20, dt=0.05)
    z = np.asarray(spec.z0)
    A = float(eval_A(c, 0.0, z))
    # H = y = 1 and the gradient term vanishes because gamma = 0
    np.testing.assert_allclose(m, A * c.Sigma[0] @ (c.c1[0] + c.c2[0] @ z), rtol=1e-10)


@pytest.mark.parametrize("which", ["solvable", "cev"])
def test_flows_agree_with_delta(which, solvable_spec, solvable_coeffs, cev_specs, cev_coeffs):
    spec, c = ((solvable_spec, solvable_coeffs) if which == "solvable"
               else (cev_specs[0.5], cev_coeffs[0.5]))
    ens = simulate(spec, c, FORWARD, 8000, seed=21, with_flows=True, antithetic=True, dt=5e-3)
    mf, sf = estimate_Z1_flows(ens, c, spec.payoff)
    md, sd = estimate_Z1_delta(spec, c, n_paths=8000, seed=22, dt=5e-3)
    assert np.all(np.abs(mf - md) <= 3 * np.hypot(sf, sd) + 1e-12)


# -- Girsanov and the forward-measure representation of A ----------------------

def test_girsanov_constant_payoff(small_spec, small_coeffs):
    rep = girsanov_check(small_spec, small_coeffs, ConstantPayoff(1.0), n_paths=5000, dt=0.01)
    assert rep.physical == 1.0 and rep.physical_se == 0.0
    assert within(rep.reweighted, rep.reweighted_se, 1.0)


def test_girsanov_trivial_kernel(small_spec, small_coeffs):
    c = small_coeffs.replace(G=np.zeros_like(small_coeffs.G), K=np.zeros_like(small_coeffs.K))
    ens = simulate(small_spec, c, FORWARD, 50, dt=0.05)
    assert np.all(ens.logLinv == 0.0)


def test_girsanov_index_model(solvable_spec, solvable_coeffs):
    rep = girsanov_check(solvable_spec, solvable_coeffs, n_paths=20000, seed=4)
    assert rep.agrees()
    assert within(rep.density_mean, rep.density_se, 1.0)


def test_A_feynman_kac(solvable_spec, solvable_coeffs):
    """Independent Euler scheme for the quadratic-Gaussian representation of ``A``."""
    c = solvable_coeffs
    dt = 2e-3
    t = path_grid(c.T, dt)
    b2, b1, vp, ka, S = (c.at(k, t) for k in ("b2", "b1", "varphi", "kappa", "Sigma"))
    rng = np.random.default_rng(77)
    N = 40000
    z = np.tile(np.asarray(solvable_spec.z0), (N, 1))
    integ = np.zeros(N)
    for k in range(len(t) - 1):
        f = 0.5 * np.einsum("bi,ij,bj->b", z, b2[k], z) + z @ b1[k]
        fz_prev = f
        dw = rng.standard_normal((N, 3)) * np.sqrt(dt)
        z_new = z + (vp[k] + z @ ka[k].T) * dt + dw @ S[k].T
        f_new = 0.5 * np.einsum("bi,ij,bj->b", z_new, b2[k + 1], z_new) + z_new @ b1[k + 1]
        integ += 0.5 * (fz_prev + f_new) * dt
        z = z_new
    vals = np.exp(-integ)
    m, se = vals.mean(), vals.std(ddof=1) / np.sqrt(N)
    assert within(m, se, float(eval_A(c, 0.0, solvable_spec.z0)))


# -- V0 -------------------------------------------------------------------------

def test_particle_zero_payoff(small_spec, small_coeffs):
    m, se = estimate_V0_particle(small_spec, small_coeffs, ConstantPayoff(0.0), n_paths=500,
                                 dt=0.05)
    assert m == 0.0 and se == 0.0


def test_particle_rejects_bad_intensity(small_spec, small_coeffs):
    with pytest.raises(ValueError):
        estimate_V0_particle(small_spec, small_coeffs, lam=0.0, n_paths=10)


def test_v0_fully_degenerate():
    """No index noise, no filtering noise, zero MPR: V1 = V2 = 1 and V0 = 1."""
    vol = PowerRowVolatility(np.array([[0.2, 0.0], [0.0, 0.0]]), [1.0, 1.0])
    spec = ModelSpec(d=1, m=1, z0=[0.0, 0.0], Sigma0=np.zeros((2, 2)), mu=[0, 0],
                     F=np.zeros((2, 2)), delta=np.zeros((2, 2)), volatility=vol,
                     payoff=IndexLinearPayoff(1), T=0.5, x0=[1.0, 1.0])
    c = solve_coefficients(spec)
    m, se = estimate_V0_solvable(spec, c, n_paths=100, dt=0.05)
    assert m == pytest.approx(1.0, abs=1e-14) and se == 0.0


def test_v0_solvable_matches_particle(solvable_spec, solvable_coeffs):
    m1, s1 = estimate_V0_solvable(solvable_spec, solvable_coeffs, n_paths=20000, seed=1)
    m2, s2 = estimate_V0_particle(solvable_spec, solvable_coeffs, n_paths=20000, seed=2)
    assert within(m1, s1, m2, s2)


def test_v0_solvable_needs_closed_forms(cev_specs, cev_coeffs):
    from mvhedge.errors import ConfigMismatch
    with pytest.raises(ConfigMismatch):
        estimate_V0_solvable(cev_specs[0.5], cev_coeffs[0.5], n_paths=10)


# -- wealth replay ----------------------------------------------------------------

def _zero_provider(n):
    return lambda t, X, z: (np.zeros(len(X)), np.zeros((len(X), n)))


def test_replay_zero_liability(small_spec, small_coeffs):
    spec = small_spec.replace(payoff=ConstantPayoff(0.0))
    rep = replay_wealth(spec, small_coeffs, _zero_provider(2), 0.0, n_paths=200, dt=0.05)
    assert rep.mse == 0.0 and rep.V1_0 == 0.0 and rep.V0_0 == 0.0


def test_replay_report(solvable_spec, solvable_coeffs):
    reps = replay_wealth(solvable_spec, solvable_coeffs, ClosedFormProvider(solvable_coeffs),
                         [0.0, 1.0], n_paths=5000, seed=3)
    assert len(reps) == 2
    r = reps[1]
    assert r.w_star == r.V1_0 / r.V2_0
    assert r.value(1.0) == pytest.approx(r.predicted)
    assert r.hist_counts.sum() <= 10000 and len(r.hist_edges) == 201
    assert r.pi_path.shape == (250, 2)
    assert list(r.checkpoint_times) == [0.0, 0.25, 0.5]
    d = r.to_dict()
    assert d["w"] == 1.0 and isinstance(d["hist_counts"], list)


def test_histogram_degenerate():
    edges, counts = histogram(np.zeros(100), bins=10)
    assert counts.sum() == 100 and len(edges) == 11


def test_physical_route_with_closed_form(solvable_spec, solvable_coeffs):
    prov = ClosedFormProvider(solvable_coeffs)
    a = estimate_V0_physical(solvable_spec, solvable_coeffs, prov, n_paths=300, seed=8)
    b = estimate_V0_solvable(solvable_spec, solvable_coeffs, n_paths=300, seed=8)
    assert a == b


def test_pair_units():
    np.testing.assert_array_equal(pair_units(np.arange(4.0), True), [1.0, 2.0])
