"""Posterior mean and covariance of the market price of risk.

The covariance ``Sigma(t)`` is deterministic: closed form for the Bayesian
prior, forward Riccati ODE for the Kalman-Bucy signal.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import BlowUp, NotPositiveDefinite, SingularMatrix
from .model import BAYESIAN, ModelSpec

BLOWUP_NORM = 1e8
PD_TOL = -1e-10
DEFAULT_STEPS = 5000


def uniform_grid(T, step=None):
    """Uniform grid on ``[0, T]`` whose spacing does not exceed ``step``."""
    if step is None:
        k = DEFAULT_STEPS
    else:
        if not step > 0:
            raise ValueError("step must be positive")
        k = max(1, int(np.ceil(T / step - 1e-9)))
    return np.linspace(0.0, T, k + 1)


def interp_nodes(grid, values, t):
    """Entrywise linear interpolation of node ``values`` at times ``t``.

    Times within 1e-9 steps of a node return the stored node value exactly.
    """
    t = np.asarray(t, dtype=float)
    K = len(grid) - 1
    u = np.clip((t - grid[0]) / (grid[1] - grid[0]), 0.0, K)
    k = np.minimum(np.floor(u).astype(int), K - 1)
    w = u - k
    kn = np.rint(u).astype(int)
    near = np.abs(u - kn) < 1e-9
    wshape = w.shape + (1,) * (values.ndim - 1)
    lin = (1.0 - w.reshape(wshape)) * values[k] + w.reshape(wshape) * values[k + 1]
    return np.where(near.reshape(wshape), values[kn], lin)


@dataclass(frozen=True, eq=False)
class SigmaSchedule:
    grid: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        for name in ("grid", "values"):
            a = np.array(getattr(self, name), dtype=float)
            a.setflags(write=False)
            object.__setattr__(self, name, a)

    @property
    def step(self):
        return self.grid[1] - self.grid[0]

    @property
    def T(self):
        return self.grid[-1]

    def at(self, t):
        return interp_nodes(self.grid, self.values, t)

    def to_csv(self, path):
        n = self.values.shape[1]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [f"Sigma_{i}{j}" for i in range(n) for j in range(n)])
            for t, S in zip(self.grid, self.values):
                w.writerow([repr(float(t))] + [repr(float(v)) for v in S.ravel()])


@dataclass(frozen=True)
class FilterState:
    t: float
    zhat: np.ndarray
    Sigma_t: np.ndarray


def bayesian_sigma(Sigma0, t):
    """Posterior covariance ``[Sigma0^-1 + t I]^-1`` of a Gaussian prior."""
    S0 = np.asarray(Sigma0, dtype=float)
    if t < 0:
        raise ValueError("t must be non-negative")
    n = S0.shape[0]
    try:
        # (S0^-1 + tI)^-1 = S0 (I + t S0)^-1, avoids inverting S0 itself
        out = np.linalg.solve(np.eye(n) + t * S0.T, S0.T).T
    except np.linalg.LinAlgError as exc:
        raise SingularMatrix(str(exc)) from exc
    return 0.5 * (out + out.T)


def kalman_rhs(S, Q, F):
    return Q - F @ S - S @ F.T - S @ S


def rk4_propagators(M1, Mm, M0, s):
    """Batched one-step RK4 maps for ``y' = M(t) y`` with signed step ``s``.

    ``M1, Mm, M0`` hold the generator at the start, middle and end of each
    step (shape ``(K, p, p)``).  Returns ``P`` with ``y_end = P @ y_start``,
    which is exactly what four RK4 stages produce for a linear ODE.
    """
    I = np.eye(M1.shape[-1])
    K1 = M1
    K2 = Mm @ (I + 0.5 * s * K1)
    K3 = Mm @ (I + 0.5 * s * K2)
    K4 = M0 @ (I + s * K3)
    return I + (s / 6.0) * (K1 + 2.0 * K2 + 2.0 * K3 + K4)


def riccati_generator(Q, L, R):
    """Linear generator whose flow solves ``y' = Q + L'y + yL + yRy`` via ``y = V U^-1``."""
    top = np.concatenate([-L, -R], axis=-1)
    bot = np.concatenate([Q, np.swapaxes(L, -1, -2)], axis=-1)
    return np.concatenate([top, bot], axis=-2)


def mobius_step(P, y):
    """Advance ``y`` by one propagator of the linearised Riccati system."""
    n = y.shape[0]
    U = P[:n, :n] + P[:n, n:] @ y
    V = P[n:, :n] + P[n:, n:] @ y
    out = np.linalg.solve(U.T, V.T).T
    return 0.5 * (out + out.T)


MOBIUS_BLOCK = 32


def mobius_sweep(P, y0, times, name, block=MOBIUS_BLOCK):
    """Apply the propagators ``P[0], P[1], ...`` in turn starting from ``y0``.

    Within a block of steps the frame ``[U; V]`` is carried by plain matrix
    products and the ratios ``V U^-1`` of the whole block come from one
    stacked solve; each block restarts from ``[I; y]``, which keeps the
    frame well scaled.  ``times[k]`` labels the node reached after
    ``P[k]`` and is what a :class:`BlowUp` reports.
    """
    K = len(P)
    n = y0.shape[0]
    out = np.empty((K, n, n))
    eye = np.eye(n)
    y = np.asarray(y0, dtype=float)
    with np.errstate(all="ignore"):
        for start in range(0, K, block):
            stop = min(start + block, K)
            frame = np.concatenate([eye, y])
            fr = np.empty((stop - start, 2 * n, n))
            for j in range(start, stop):
                frame = P[j] @ frame
                fr[j - start] = frame
            U, V = fr[:, :n], fr[:, n:]
            det = np.linalg.det(U)
            sing = np.flatnonzero(~np.isfinite(det) | (det == 0.0))
            if sing.size:
                raise BlowUp(name, times[start + sing[0]])
            Y = np.swapaxes(np.linalg.solve(np.swapaxes(U, 1, 2), np.swapaxes(V, 1, 2)), 1, 2)
            Y = 0.5 * (Y + np.swapaxes(Y, 1, 2))
            norms = np.abs(Y).reshape(len(Y), -1).max(axis=1)
            bad = np.flatnonzero(~(norms <= BLOWUP_NORM))
            if bad.size:
                raise BlowUp(name, times[start + bad[0]], norms[bad[0]])
            out[start:stop] = Y
            y = Y[-1]
    return out


def _check_nodes(grid, values, what="Sigma"):
    norms = np.abs(values).reshape(len(grid), -1).max(axis=1)
    bad = np.flatnonzero(~np.isfinite(norms) | (norms > BLOWUP_NORM))
    if bad.size:
        k = bad[0]
        raise BlowUp(what, grid[k], norms[k])
    eigs = np.linalg.eigvalsh(values).min(axis=1)
    bad = np.flatnonzero(eigs < PD_TOL)
    if bad.size:
        k = bad[0]
        raise NotPositiveDefinite(grid[k], eigs[k])


def solve_kalman_sigma(spec: ModelSpec, step=None) -> SigmaSchedule:
    """Forward solve of the Kalman-Bucy variance equation on a uniform grid.

    Each step applies RK4 to the linear system ``U' = F'U + V, V' = QU - FV``
    whose ratio ``V U^-1`` is the Riccati solution; the node is symmetrised
    afterwards.  For a Bayesian model the closed form is tabulated instead.
    """
    grid = uniform_grid(spec.T, step)
    if spec.filter_kind == BAYESIAN:
        vals = np.array([bayesian_sigma(spec.Sigma0, t) for t in grid])
        _check_nodes(grid, vals)
        return SigmaSchedule(grid, vals)

    h = grid[1] - grid[0]
    n = spec.n
    Q = spec.delta @ spec.delta.T
    Mg = riccati_generator(Q, -spec.F.T, -np.eye(n))[None]
    P = rk4_propagators(Mg, Mg, Mg, h)[0]
    vals = np.empty((len(grid), n, n))
    vals[0] = spec.Sigma0
    vals[1:] = mobius_sweep(np.broadcast_to(P, (len(grid) - 1,) + P.shape), vals[0], grid[1:],
                            "Sigma")
    _check_nodes(grid, vals)
    return SigmaSchedule(grid, vals)


def propagate_zhat(state: FilterState, schedule: SigmaSchedule, spec: ModelSpec, dn, dt) -> FilterState:
    """One Euler-Maruyama step of the filter driven by innovation increment ``dn``."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    S = schedule.at(state.t)
    z = np.asarray(state.zhat, dtype=float)
    z_new = z + (spec.mu - spec.F @ z) * dt + S @ np.asarray(dn, dtype=float)
    t_new = state.t + dt
    return FilterState(t_new, z_new, schedule.at(min(t_new, schedule.T)))


def bayesian_posterior_mean(z0, Sigma0, omega_tilde, t):
    """Closed-form posterior mean given the observed ``omega_tilde`` at time ``t``."""
    S = bayesian_sigma(Sigma0, t)
    z0 = np.asarray(z0, dtype=float)
    return z0 + S @ (np.asarray(omega_tilde, dtype=float) - t * z0)
