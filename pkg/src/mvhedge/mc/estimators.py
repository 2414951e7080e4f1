"""Monte Carlo estimators of ``V1``, ``Z1`` and ``V0``."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..coeffs import eval_A
from ..errors import NumericOverflow
from .paths import (DEFAULT_DT, FORWARD, PHYSICAL, Engine, assemble, map_chunks, mean_se,
                    pair_units, simulate)
from .rng import CHUNK, STREAM_MAIN, STREAM_PARTICLE, ChunkNoise, chunk_layout, uniforms


def _check_start(ensemble, t, x, zhat):
    for name, a, b in (("t", t, ensemble.t0), ("x", x, ensemble.x0), ("zhat", zhat, ensemble.z0)):
        if a is not None and not np.allclose(a, b, rtol=0, atol=1e-12):
            raise ValueError(f"ensemble was started from a different {name}")


def estimate_V1(ensemble, coeffs, payoff):
    """``A(t,T)`` times the forward-measure sample mean of ``H(X_T)``."""
    if ensemble.measure != FORWARD:
        raise ValueError("V1 is estimated under the forward measure")
    A = float(eval_A(coeffs, ensemble.t0, ensemble.z0))
    m, se = ensemble.estimate(payoff(ensemble.X_T))
    return A * float(m), A * float(se)


def _z1_assemble(A, H, dx, dz, S, c1, c2, z, gamma):
    """Per-lane ``A {H Sigma(c1 + c2 z) + gamma' dx + Sigma dz}``."""
    w = S @ (c1 + c2 @ z)
    return A * (H[:, None] * w + dx @ gamma + dz @ S.T)


def estimate_Z1_flows(ensemble, coeffs, payoff, t=None, x=None, zhat=None):
    """``zeta1 = (Z1, Gamma1)`` at the ensemble start from the simulated flows."""
    ensemble.require_flows()
    _check_start(ensemble, t, x, zhat)
    t, x, z = ensemble.t0, ensemble.x0, ensemble.z0
    H, dH = payoff.evaluate(ensemble.X_T, 1)[:2]
    dx = np.einsum("bij,bj->bi", ensemble.chi, dH)
    dz = np.einsum("bij,bj->bi", ensemble.chiTilde, dH)
    gamma = ensemble.volatility(x)
    vals = _z1_assemble(float(eval_A(coeffs, t, z)), H, dx, dz, coeffs.at("Sigma", t),
                        coeffs.at("c1", t), coeffs.at("c2", t), z, gamma)
    return ensemble.estimate(vals)


def estimate_Z1_delta(spec, coeffs, t=0.0, x=None, zhat=None, bump=1e-4, n_paths=20000,
                      dt=DEFAULT_DT, seed=0, antithetic=True, workers=1):
    """Central differences of ``E^{A_T}[H(X_T)]`` in ``x`` and ``zhat`` with
    common random numbers, combined into the ``zeta1`` formula.

    The bump for coordinate ``i`` is ``bump * max(|v_i|, 1)``.
    """
    x = spec.x0 if x is None else np.asarray(x, dtype=float)
    z = spec.z0 if zhat is None else np.asarray(zhat, dtype=float)
    n = spec.n
    kw = dict(dt=dt, seed=seed, antithetic=antithetic, t0=t, track_density=False, workers=workers)

    def H_at(xs, zs):
        ens = simulate(spec, coeffs, FORWARD, n_paths, x0=xs, z0=zs, **kw)
        return spec.payoff(ens.X_T)

    H0 = H_at(x, z)
    grads = []
    for which in ("x", "z"):
        base = x if which == "x" else z
        g = np.empty((H0.shape[0], n))
        for i in range(n):
            h = bump * max(abs(base[i]), 1.0)
            up, dn = base.copy(), base.copy()
            up[i] += h
            dn[i] -= h
            if which == "x":
                g[:, i] = (H_at(up, z) - H_at(dn, z)) / (2 * h)
            else:
                g[:, i] = (H_at(x, up) - H_at(x, dn)) / (2 * h)
        grads.append(g)
    gamma = spec.volatility(x)
    vals = _z1_assemble(float(eval_A(coeffs, t, z)), H0, grads[0], grads[1],
                        coeffs.at("Sigma", t), coeffs.at("c1", t), coeffs.at("c2", t), z, gamma)
    return mean_se(pair_units(vals, antithetic))


# --------------------------------------------------------------------------
# V0: particle representation
# --------------------------------------------------------------------------

def _grid_tables(engine, coeffs):
    t = engine.times
    return {k: coeffs.at(k, t) for k in ("a2", "a1", "a0", "c2", "c1", "c0")}


def _lane_quad(M2, v1, s0, z):
    return 0.5 * np.einsum("bi,bij,bj->b", z, M2, z) + np.einsum("bi,bi->b", v1, z) + s0


def _cal_z(A, H, dH, chi, chiT, gam, S, c1, c2, z):
    """Per-lane particle functional ``A H {Sigma(c1 + c2 z) + z} + A {gamma'(chi dH) + Sigma(chiTilde dH)}``."""
    w = np.einsum("bij,bj->bi", S, c1 + np.einsum("bij,bj->bi", c2, z)) + z
    r = np.einsum("bij,bj->bi", chi, dH)
    rt = np.einsum("bij,bj->bi", chiT, dH)
    return A[:, None] * (H[:, None] * w + np.einsum("bij,bi->bj", gam, r)
                         + np.einsum("bij,bj->bi", S, rt))


def estimate_V0_particle(spec, coeffs, payoff=None, lam=None, n_paths=20000, dt=DEFAULT_DT,
                         seed=0, antithetic=False, workers=1, return_terms=False):
    """One-shot particle estimator of ``V0`` at ``(0, x0, z0)``.

    An interaction time ``tau ~ Exp(lam)`` is drawn per path.  At the last
    grid node before ``tau`` the main path (particle group 1) restarts its
    flows and a second group branches off with independent increments.  The
    branched pair contributes
    ``L_tau^{-1} e^{-V_L(tau) + lam tau} / lam * Z^(1)' 1_(d,0) Z^(2)``.
    """
    payoff = spec.payoff if payoff is None else payoff
    lam = 1.0 / spec.T if lam is None else float(lam)
    if not lam > 0:
        raise ValueError("interaction intensity must be positive")
    engine = Engine(spec, coeffs, FORWARD, dt)
    tab = _grid_tables(engine, coeffs)
    times, K, d, n = engine.times, engine.n_steps, spec.d, spec.n
    layout = chunk_layout(n_paths)

    def run(chunk, size):
        nz1 = ChunkNoise(seed, chunk, size, n, STREAM_MAIN, antithetic)
        nz2 = ChunkNoise(seed, chunk, size, n, STREAM_PARTICLE, antithetic)
        u = uniforms(seed, chunk, size, antithetic=antithetic)
        tau = -np.log1p(-u) / lam
        ktau = np.floor(tau / engine.dt + 1e-12).astype(int)
        active = ktau < K
        lanes = nz1.lanes
        p1 = engine.start(lanes, spec.x0, spec.z0, flows=True, density=True)
        p2 = engine.start(lanes, spec.x0, spec.z0, flows=True)
        lz = np.zeros(lanes)
        z_tau = np.zeros((lanes, n))
        x_tau = np.zeros((lanes, n))
        try:
            for k in range(K):
                hit = ktau == k
                if hit.any():
                    lz[hit] = p1.logLinv[hit]
                    z_tau[hit] = p1.z[hit]
                    x_tau[hit] = p1.X[hit]
                    p1.reset_flows(hit)
                    p2.copy_from(p1, hit)
                engine.step(k, p1, nz1.draw(engine.sqdt))
                engine.step(k, p2, nz2.draw(engine.sqdt))
        except NumericOverflow as exc:
            raise NumericOverflow(chunk * CHUNK + exc.path % size, exc.t) from None

        H1, dH1 = payoff.evaluate(p1.X, 1)[:2]
        H2, dH2 = payoff.evaluate(p2.X, 1)[:2]
        first = np.exp(p1.logLinv) * H1 ** 2
        kk = np.minimum(ktau, K - 1)
        c2, c1, c0 = tab["c2"][kk], tab["c1"][kk], tab["c0"][kk]
        A = np.exp(_lane_quad(c2, c1, c0, z_tau))
        VL = _lane_quad(tab["a2"][kk], tab["a1"][kk], tab["a0"][kk], z_tau)
        S = engine.S[kk]
        gam = spec.volatility.evaluate(x_tau, 0)[0]
        Z1 = _cal_z(A, H1, dH1, p1.chi, p1.chiTilde, gam, S, c1, c2, z_tau)
        Z2 = _cal_z(A, H2, dH2, p2.chi, p2.chiTilde, gam, S, c1, c2, z_tau)
        weight = np.exp(lz - VL + lam * np.where(active, tau, 0.0)) / lam
        second = np.where(active, weight * np.einsum("bi,bi->b", Z1[:, :d], Z2[:, :d]), 0.0)
        return {"first": first, "second": second}

    res = assemble(map_chunks(run, layout, workers), layout, antithetic)
    m, se = mean_se(pair_units(res["first"] - res["second"], antithetic))
    if return_terms:
        return float(m), float(se), {k: mean_se(pair_units(v, antithetic)) for k, v in res.items()}
    return float(m), float(se)


def estimate_V0_nested(spec, coeffs, payoff=None, n_outer=2000, n_inner=64, dt=DEFAULT_DT,
                       seed=0, return_terms=False):
    """Two-level Monte Carlo of the original ``V0`` representation.

    Outer forward-measure paths carry ``L^{-1}``.  At every grid node an
    inner simulation restarted from the outer state estimates the
    conditional mean of the particle functional twice, on independent
    inner groups, so their product is unbiased.  The time integral uses the
    left-point rule on the path grid, which is the discretization the
    particle estimator samples.  Cost grows like ``n_outer * n_inner * K^2``:
    this is a test oracle for small instances.
    """
    payoff = spec.payoff if payoff is None else payoff
    outer = Engine(spec, coeffs, FORWARD, dt)
    times, K, d, n = outer.times, outer.n_steps, spec.d, spec.n
    tab = _grid_tables(outer, coeffs)
    rng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(0,))))
    st = outer.start(n_outer, spec.x0, spec.z0, density=True)
    integral = np.zeros(n_outer)
    for k in range(K):
        inner = Engine(spec, coeffs, FORWARD, outer.dt, times[k])
        if inner.n_steps != K - k:
            raise ValueError("inner grid does not align with the outer grid")
        lanes = n_outer * 2 * n_inner
        x_s = np.repeat(st.X, 2 * n_inner, axis=0)
        z_s = np.repeat(st.z, 2 * n_inner, axis=0)
        p = inner.start(lanes, spec.x0, spec.z0, flows=True)
        p.X, p.z = x_s.copy(), z_s.copy()
        irng = np.random.Generator(np.random.Philox(np.random.SeedSequence(seed, spawn_key=(1, k))))
        for j in range(inner.n_steps):
            inner.step(j, p, irng.standard_normal((lanes, n)) * inner.sqdt)
        H, dH = payoff.evaluate(p.X, 1)[:2]
        A = np.exp(_lane_quad(np.broadcast_to(tab["c2"][k], (lanes, n, n)),
                              np.broadcast_to(tab["c1"][k], (lanes, n)), tab["c0"][k], z_s))
        S = np.broadcast_to(outer.S[k], (lanes, n, n))
        gam = spec.volatility.evaluate(x_s, 0)[0]
        Z = _cal_z(A, H, dH, p.chi, p.chiTilde, gam, S,
                   np.broadcast_to(tab["c1"][k], (lanes, n)),
                   np.broadcast_to(tab["c2"][k], (lanes, n, n)), z_s)
        Z = Z.reshape(n_outer, 2, n_inner, n).mean(axis=2)
        VL = ((0.5 * (st.z @ tab["a2"][k]) + tab["a1"][k]) * st.z).sum(axis=1) + tab["a0"][k]
        integral += (np.exp(st.logLinv - VL) * (Z[:, 0, :d] * Z[:, 1, :d]).sum(axis=1)
                     * outer.dt)
        outer.step(k, st, rng.standard_normal((n_outer, n)) * outer.sqdt)
    first = np.exp(st.logLinv) * payoff(st.X) ** 2
    m, se = mean_se(first - integral)
    if return_terms:
        return float(m), float(se), {"first": mean_se(first), "second": mean_se(integral)}
    return float(m), float(se)


# --------------------------------------------------------------------------
# V0: physical-measure route with a supplied (V1, zeta1) provider
# --------------------------------------------------------------------------

def estimate_V0_physical(spec, coeffs, provider, n_paths=100000, dt=DEFAULT_DT, seed=0,
                         antithetic=True, workers=1):
    """``E[H^2 - int ||(zeta1 + V1 zhat)_d||^2 / V2 ds]`` under the physical measure."""
    from .wealth import physical_run
    res = physical_run(spec, coeffs, provider, None, n_paths, dt, seed, antithetic, workers)
    m, se = mean_se(pair_units(res["v0"], antithetic))
    return float(m), float(se)


def estimate_V0_solvable(spec, coeffs, n_paths=100000, dt=DEFAULT_DT, seed=0, antithetic=True,
                         workers=1):
    """Physical-measure estimate of ``V0`` with the closed-form ``(V1, Z1)``."""
    from .wealth import ClosedFormProvider
    return estimate_V0_physical(spec, coeffs, ClosedFormProvider(coeffs), n_paths, dt, seed,
                                antithetic, workers)


# --------------------------------------------------------------------------
# Girsanov consistency
# --------------------------------------------------------------------------

@dataclass
class GirsanovReport:
    physical: float
    physical_se: float
    reweighted: float
    reweighted_se: float
    density_mean: float
    density_se: float

    @property
    def z_score(self):
        return abs(self.physical - self.reweighted) / np.hypot(self.physical_se, self.reweighted_se)

    def agrees(self, k=3.0):
        return self.z_score <= k


def girsanov_check(spec, coeffs, payoff=None, n_paths=50000, dt=DEFAULT_DT, seed=0,
                   antithetic=False, workers=1):
    """Compare ``E_P[H(X_T)]`` with ``E^{A_T}[L_T^{-1} H(X_T)]`` on independent streams."""
    payoff = spec.payoff if payoff is None else payoff
    phys = simulate(spec, coeffs, PHYSICAL, n_paths, dt, seed, antithetic=antithetic,
                    workers=workers)
    fwd = simulate(spec, coeffs, FORWARD, n_paths, dt, seed + 1, antithetic=antithetic,
                   track_density=True, workers=workers)
    m1, s1 = phys.estimate(payoff(phys.X_T))
    Linv = np.exp(fwd.logLinv)
    m2, s2 = fwd.estimate(Linv * payoff(fwd.X_T))
    m3, s3 = fwd.estimate(Linv)
    return GirsanovReport(float(m1), float(s1), float(m2), float(s2), float(m3), float(s3))
