"""Euler-Maruyama simulation of ``(X, zhat)`` and the stochastic flows.

Under the physical measure the innovation ``n`` is Brownian and

    dX = gamma(X) (dn + zhat dt),   dzhat = (mu - F zhat) dt + Sigma dn.

Under the forward measure ``P^{A_T}`` the drift of ``n`` becomes
``psi + Psi zhat`` for ``X`` and the filter follows
``dzhat = (phi - Phi zhat) dt + Sigma dn``.  Both cases share one stepper
written for ``dX = gamma (dn + (a + B z) dt)``, ``dz = (c - C z) dt + Sigma dn``.

Flows follow the index convention ``chi[i, j] = dX^j / dx^i``,
``chiTilde[i, j] = dX^j / dzhat^i`` and ``xi[i, j] = dzhat^j / dzhat^i``.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..errors import FlowsMissing, NumericOverflow
from .rng import CHUNK, STREAM_MAIN, ChunkNoise, chunk_layout

PHYSICAL = "Physical"
FORWARD = "ForwardAT"
MEASURES = (PHYSICAL, FORWARD)
DEFAULT_DT = 2e-3


def path_grid(T, dt, t0=0.0):
    """Uniform path grid from ``t0`` to ``T`` with spacing close to ``dt``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    if not 0.0 <= t0 < T:
        raise ValueError("start time must lie in [0, T)")
    k = max(1, int(round((T - t0) / dt)))
    return t0 + (T - t0) * np.arange(k + 1) / k


class State:
    """Mutable per-lane simulation state."""

    __slots__ = ("X", "z", "chi", "chiTilde", "xi", "logLinv")

    def __init__(self, X, z, flows=False, density=False):
        self.X = X
        self.z = z
        N, n = X.shape
        if flows:
            eye = np.broadcast_to(np.eye(n), (N, n, n))
            self.chi = eye.copy()
            self.chiTilde = np.zeros((N, n, n))
            self.xi = eye.copy()
        else:
            self.chi = self.chiTilde = self.xi = None
        self.logLinv = np.zeros(N) if density else None

    def reset_flows(self, mask):
        n = self.X.shape[1]
        self.chi[mask] = np.eye(n)
        self.chiTilde[mask] = 0.0
        self.xi[mask] = np.eye(n)

    def copy_from(self, other, mask):
        for name in self.__slots__:
            a, b = getattr(self, name), getattr(other, name)
            if a is not None and b is not None:
                a[mask] = b[mask]


class Engine:
    """Step coefficients of one measure tabulated on a path grid."""

    def __init__(self, spec, coeffs, measure, dt=DEFAULT_DT, t0=0.0):
        if measure not in MEASURES:
            raise ValueError(f"measure must be one of {MEASURES}")
        self.spec = spec
        self.coeffs = coeffs
        self.measure = measure
        self.times = path_grid(spec.T, dt, t0)
        self.dt = self.times[1] - self.times[0]
        self.sqdt = np.sqrt(self.dt)
        t = self.times
        n = spec.n
        self.S = coeffs.at("Sigma", t)
        self.rows = spec.volatility.row_structure()
        if measure == FORWARD:
            self.a = coeffs.at("psi", t)
            self.B = coeffs.at("Psi", t)
            self.c = coeffs.at("phi", t)
            self.C = coeffs.at("Phi", t)
            self.G = coeffs.at("G", t)
            self.K = coeffs.at("K", t)
        else:
            self.a = np.zeros((len(t), n))
            self.B = np.broadcast_to(np.eye(n), (len(t), n, n))
            self.c = np.broadcast_to(spec.mu, (len(t), n))
            self.C = np.broadcast_to(spec.F, (len(t), n, n))
            self.G = self.K = None

    @property
    def n_steps(self):
        return len(self.times) - 1

    def step(self, k, st: State, dn):
        """Advance ``st`` in place from ``times[k]`` to ``times[k+1]``."""
        # overflow is detected below and raised as NumericOverflow
        with np.errstate(over="ignore", invalid="ignore"):
            self._step(k, st, dn)
        if not (np.isfinite(st.X).all() and np.isfinite(st.z).all()):
            bad = np.flatnonzero(~(np.isfinite(st.X).all(1) & np.isfinite(st.z).all(1)))[0]
            raise NumericOverflow(bad, self.times[k + 1])

    def _step(self, k, st, dn):
        dt = self.dt
        z = st.z
        v = dn + (self.a[k] + z @ self.B[k].T) * dt
        vol = self.spec.volatility
        n = z.shape[1]
        if st.logLinv is not None:
            theta = self.G[k] + z @ self.K[k].T
            st.logLinv -= ((dn + 0.5 * dt * theta) * theta).sum(axis=1)
        if self.rows is None:
            if st.chi is not None:
                J = vol.flow_generator(st.X, v)
                gB = vol.evaluate(st.X, 0)[0] @ self.B[k]
                st.chiTilde += st.chiTilde @ J + dt * (st.xi @ np.swapaxes(gB, 1, 2))
                st.chi += st.chi @ J
                st.xi -= dt * (st.xi @ self.C[k].T)
            st.X = vol.absorb(st.X + vol.apply(st.X, v))
        else:
            # gamma = diag(s) V: the flow generator is diagonal, diag(s' * (V v))
            Vv = v @ self.rows.T
            if st.chi is not None:
                s0, s1 = vol.row_scales(st.X, 1)
                jd = (s1 * Vv)[:, None, :]
                VB = (self.rows @ self.B[k]).T
                src = (st.xi.reshape(-1, n) @ VB).reshape(st.xi.shape) * s0[:, None, :]
                st.chiTilde += st.chiTilde * jd + dt * src
                st.chi += st.chi * jd
                st.xi -= dt * (st.xi.reshape(-1, n) @ self.C[k].T).reshape(st.xi.shape)
            else:
                s0 = vol.row_scales(st.X, 0)[0]
            st.X = vol.absorb(st.X + s0 * Vv)
        st.z = z + (self.c[k] - z @ self.C[k].T) * dt + dn @ self.S[k].T

    def start(self, lanes, x0, z0, flows=False, density=False):
        X = np.tile(np.asarray(x0, dtype=float), (lanes, 1))
        z = np.tile(np.asarray(z0, dtype=float), (lanes, 1))
        return State(X, z, flows, density)


# --------------------------------------------------------------------------
# chunk orchestration
# --------------------------------------------------------------------------

def map_chunks(fn, layout, workers=1):
    """Apply ``fn(chunk, size)`` to every chunk; results keep chunk order."""
    if workers and workers > 1 and len(layout) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(lambda cs: fn(*cs), layout))
    return [fn(c, s) for c, s in layout]


def assemble(results, layout, antithetic):
    """Concatenate per-chunk lane arrays as ``[all base lanes; all mirror lanes]``."""
    out = {}
    for key in results[0]:
        if results[0][key] is None:
            out[key] = None
            continue
        if antithetic:
            base = [r[key][:s] for r, (_, s) in zip(results, layout)]
            mirror = [r[key][s:] for r, (_, s) in zip(results, layout)]
            out[key] = np.concatenate(base + mirror)
        else:
            out[key] = np.concatenate([r[key] for r in results])
    return out


def pair_units(values, antithetic):
    """Independent sampling units: antithetic pairs are averaged."""
    v = np.asarray(values, dtype=float)
    if not antithetic:
        return v
    h = v.shape[0] // 2
    return 0.5 * (v[:h] + v[h:])


def mean_se(units):
    u = np.asarray(units, dtype=float)
    N = u.shape[0]
    se = u.std(axis=0, ddof=1) / np.sqrt(N) if N > 1 else np.full(u.shape[1:], np.nan)
    return u.mean(axis=0), se


@dataclass
class PathEnsemble:
    measure: str
    seed: int
    dt: float
    times: np.ndarray
    n_paths: int
    antithetic: bool
    x0: np.ndarray
    z0: np.ndarray
    X_T: np.ndarray
    z_T: np.ndarray
    chi: Optional[np.ndarray] = None
    chiTilde: Optional[np.ndarray] = None
    xi: Optional[np.ndarray] = None
    logLinv: Optional[np.ndarray] = None
    X_paths: Optional[np.ndarray] = None
    z_paths: Optional[np.ndarray] = None
    volatility: object = None

    @property
    def t0(self):
        return self.times[0]

    @property
    def lanes(self):
        return self.X_T.shape[0]

    @property
    def has_flows(self):
        return self.chi is not None

    def require_flows(self):
        if not self.has_flows:
            raise FlowsMissing("ensemble was simulated without stochastic flows")

    def units(self, values):
        return pair_units(values, self.antithetic)

    def estimate(self, values):
        return mean_se(self.units(values))


def simulate(spec, coeffs, measure, n_paths, dt=DEFAULT_DT, seed=0, with_flows=False,
             antithetic=False, t0=0.0, x0=None, z0=None, store_paths=False,
             track_density=None, workers=1, stream=STREAM_MAIN) -> PathEnsemble:
    """Simulate ``n_paths`` base paths (twice as many lanes with antithetics).

    ``track_density`` accumulates ``log L^{-1}`` under the forward measure
    and defaults to on for that measure.
    """
    engine = Engine(spec, coeffs, measure, dt, t0)
    x0 = spec.x0 if x0 is None else np.asarray(x0, dtype=float)
    z0 = spec.z0 if z0 is None else np.asarray(z0, dtype=float)
    if track_density is None:
        track_density = measure == FORWARD
    if track_density and measure != FORWARD:
        raise ValueError("the density process is defined under the forward measure")
    layout = chunk_layout(n_paths)

    def run(chunk, size):
        noise = ChunkNoise(seed, chunk, size, spec.n, stream, antithetic)
        st = engine.start(noise.lanes, x0, z0, with_flows, track_density)
        Xs = zs = None
        if store_paths:
            Xs = np.empty((engine.n_steps + 1,) + st.X.shape)
            zs = np.empty_like(Xs)
            Xs[0], zs[0] = st.X, st.z
        try:
            for k in range(engine.n_steps):
                engine.step(k, st, noise.draw(engine.sqdt))
                if store_paths:
                    Xs[k + 1], zs[k + 1] = st.X, st.z
        except NumericOverflow as exc:
            raise NumericOverflow(chunk * CHUNK + exc.path % size, exc.t) from None
        return {"X_T": st.X, "z_T": st.z, "chi": st.chi, "chiTilde": st.chiTilde,
                "xi": st.xi, "logLinv": st.logLinv,
                "X_paths": None if Xs is None else np.swapaxes(Xs, 0, 1),
                "z_paths": None if zs is None else np.swapaxes(zs, 0, 1)}

    res = assemble(map_chunks(run, layout, workers), layout, antithetic)
    for key in ("X_paths", "z_paths"):
        if res[key] is not None:
            res[key] = np.swapaxes(res[key], 0, 1)
    return PathEnsemble(measure=measure, seed=seed, dt=engine.dt, times=engine.times,
                        n_paths=int(n_paths), antithetic=antithetic, x0=x0, z0=z0,
                        volatility=spec.volatility, **res)
