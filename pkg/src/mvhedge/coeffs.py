"""Deterministic coefficient functions of the three hedging BSDEs.

All ODEs are integrated backward from ``T`` with RK4 on the uniform grid of
the covariance schedule.  Mid-step values of previously solved tables come
from linear interpolation, i.e. the average of neighbouring nodes.

Naming follows the quadratic ansatz used throughout:

* ``V_L = log V2 = 1/2 z'a2 z + a1'z + a0``
* ``A(t,T) = exp(1/2 z'c2 z + c1'z + c0)``
* ``P(t,T) = exp(beta1'z + beta0)`` (index-linear example)
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, fields, replace
from typing import Optional

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .errors import BlowUp, ConfigMismatch
from .filter import (BLOWUP_NORM, SigmaSchedule, interp_nodes, riccati_generator,
                     mobius_sweep, rk4_propagators, solve_kalman_sigma)
from .model import IndexLinearPayoff, ModelSpec, PowerRowVolatility


# --------------------------------------------------------------------------
# backward integrators
# --------------------------------------------------------------------------

def _mids(arr):
    return 0.5 * (arr[:-1] + arr[1:])


def riccati_backward(grid, Q, L, R, name):
    """Solve ``y' = Q + L'y + yL + yRy`` backward from ``y(T) = 0``.

    ``Q, L, R`` are node arrays of shape ``(K+1, n, n)``.  RK4 is applied to
    the linear system whose ratio ``V U^-1`` is ``y`` (see
    :func:`mobius_sweep`); nodes are symmetrised.  A singular ``U`` or a
    norm above the threshold is reported as blow-up.
    """
    h = grid[1] - grid[0]
    Mg = riccati_generator(Q, L, R)
    P = rk4_propagators(Mg[1:], _mids(Mg), Mg[:-1], -h)
    out = np.zeros_like(Q)
    out[:-1] = mobius_sweep(P[::-1], out[-1], grid[-2::-1], name)[::-1]
    return out


def linear_backward(grid, u, B, name):
    """Solve ``y' = u + B y`` backward from ``y(T) = 0`` with RK4.

    The RK4 step of a linear ODE is an affine map, so all step maps are
    formed at once and only the cheap recursion runs sequentially.
    """
    h = grid[1] - grid[0]
    n = u.shape[1]
    Mg = np.zeros((len(grid), n + 1, n + 1))
    Mg[:, :n, :n] = B
    Mg[:, :n, n] = u
    P = rk4_propagators(Mg[1:], _mids(Mg), Mg[:-1], -h)
    A, c = P[:, :n, :n], P[:, :n, n]
    out = np.zeros_like(u)
    y = out[-1]
    for k in range(len(grid) - 2, -1, -1):
        y = A[k] @ y + c[k]
        out[k] = y
    bad = np.flatnonzero(~(np.abs(out).max(axis=1) <= BLOWUP_NORM))
    if bad.size:
        raise BlowUp(name, grid[bad[-1]], np.abs(out[bad[-1]]).max())
    return out


def quadrature_backward(grid, f_nodes, f_mids, name):
    """RK4 for ``y' = f(t)`` with ``y(T) = 0`` (Simpson's rule per step)."""
    h = grid[1] - grid[0]
    incr = (h / 6.0) * (f_nodes[:-1] + 4.0 * f_mids + f_nodes[1:])
    out = np.zeros(len(grid))
    out[:-1] = -np.cumsum(incr[::-1])[::-1]
    bad = np.flatnonzero(~(np.abs(out) <= BLOWUP_NORM))
    if bad.size:
        raise BlowUp(name, grid[bad[-1]], abs(out[bad[-1]]))
    return out


# --------------------------------------------------------------------------
# coefficient table
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class CoefficientTable:
    grid: np.ndarray
    d: int
    Sigma: np.ndarray
    Xi: np.ndarray
    a2: np.ndarray
    a1: np.ndarray
    a0: np.ndarray
    b2: np.ndarray
    b1: np.ndarray
    varphi: np.ndarray
    kappa: np.ndarray
    c2: np.ndarray
    c1: np.ndarray
    c0: np.ndarray
    psi: np.ndarray
    Psi: np.ndarray
    PsiTilde: np.ndarray
    phi: np.ndarray
    Phi: np.ndarray
    G: np.ndarray
    K: np.ndarray
    sigma_y: Optional[np.ndarray] = None
    beta1: Optional[np.ndarray] = None
    beta0: Optional[np.ndarray] = None
    beta0_index: Optional[np.ndarray] = None
    index: Optional[int] = None
    solvable: bool = False

    @property
    def T(self):
        return self.grid[-1]

    @property
    def n(self):
        return self.Sigma.shape[1]

    @property
    def step(self):
        return self.grid[1] - self.grid[0]

    def at(self, name, t):
        return interp_nodes(self.grid, getattr(self, name), t)

    def replace(self, **changes):
        return replace(self, **changes)

    def to_csv(self, path):
        """One row per grid node, one column per scalar entry of every table."""
        cols = []
        for f in fields(self):
            v = getattr(self, f.name)
            if f.name == "grid" or not isinstance(v, np.ndarray) or v.shape[:1] != self.grid.shape:
                continue
            flat = v.reshape(len(self.grid), -1)
            if v.ndim == 1:
                cols.append((f.name, flat))
            elif v.ndim == 2:
                cols += [(f"{f.name}_{i}", flat[:, [i]]) for i in range(flat.shape[1])]
            else:
                n2 = v.shape[2]
                cols += [(f"{f.name}_{i // n2}{i % n2}", flat[:, [i]]) for i in range(flat.shape[1])]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t"] + [c[0] for c in cols])
            for k, t in enumerate(self.grid):
                w.writerow([repr(float(t))] + [repr(float(c[1][k, 0])) for c in cols])


def _sym_xi(S, D):
    M = np.eye(S.shape[-1]) - D
    return S @ D @ S - S @ M @ S


def solve_a(schedule: SigmaSchedule, spec: ModelSpec):
    """Quadratic-ansatz coefficients of ``log V2``; solved a2, then a1, then a0."""
    a2 = solve_a2(schedule, spec)
    a1 = solve_a1(schedule, spec, a2)
    a0 = solve_a0(schedule, spec, a2, a1)
    return a2, a1, a0


def solve_a2(schedule, spec):
    S = schedule.values
    D = spec.tradable
    Xi = _sym_xi(S, D)
    L = spec.F + 2.0 * S @ D
    Q = np.broadcast_to(2.0 * D, S.shape)
    return riccati_backward(schedule.grid, Q, L, Xi, "a2")


def solve_a1(schedule, spec, a2):
    S = schedule.values
    D = spec.tradable
    Xi = _sym_xi(S, D)
    u = -a2 @ spec.mu
    B = spec.F.T + a2 @ Xi + 2.0 * D @ S
    return linear_backward(schedule.grid, u, B, "a1")


def _a0_rhs(S, Xi, mu, a2, a1):
    return (-a1 @ mu - 0.5 * np.einsum("kij,kji->k", a2, S @ S)
            + 0.5 * np.einsum("ki,kij,kj->k", a1, Xi, a1))


def solve_a0(schedule, spec, a2, a1):
    S = schedule.values
    Xi = _sym_xi(S, spec.tradable)
    f = _a0_rhs(S, Xi, spec.mu, a2, a1)
    fm = _a0_rhs(_mids(S), _mids(Xi), spec.mu, _mids(a2), _mids(a1))
    return quadrature_backward(schedule.grid, f, fm, "a0")


def forward_measure_terms(S, D, a2, a1, mu, F):
    """``b2, b1, varphi, kappa`` built from the a-tables."""
    b2 = 2.0 * D + D @ S @ a2 + a2 @ S @ D
    b1 = np.einsum("ij,kjl,kl->ki", D, S, a1)
    SdS = S @ D @ S
    varphi = mu - np.einsum("kij,kj->ki", SdS, a1)
    kappa = -(F + SdS @ a2 + S @ D)
    return b2, b1, varphi, kappa


def solve_c(a_table, schedule: SigmaSchedule, spec: ModelSpec):
    """Coefficients of ``A(t,T)``; solved c2, then c1, then c0."""
    a2, a1, _ = a_table
    S = schedule.values
    D = spec.tradable
    grid = schedule.grid
    b2, b1, varphi, kappa = forward_measure_terms(S, D, a2, a1, spec.mu, spec.F)
    S2 = S @ S
    c2 = riccati_backward(grid, b2, -kappa, -S2, "c2")
    u = b1 - np.einsum("kij,kj->ki", c2, varphi)
    B = -np.swapaxes(kappa, 1, 2) - c2 @ S2
    c1 = linear_backward(grid, u, B, "c1")

    def rhs(varphi, c2, c1, S2):
        return (-np.einsum("ki,ki->k", varphi, c1) - 0.5 * np.einsum("kij,kji->k", c2, S2)
                - 0.5 * np.einsum("ki,kij,kj->k", c1, S2, c1))

    f = rhs(varphi, c2, c1, S2)
    fm = rhs(_mids(varphi), _mids(c2), _mids(c1), _mids(S) @ _mids(S))
    c0 = quadrature_backward(grid, f, fm, "c0")
    return c2, c1, c0


def build_mc_coeffs(S, D, a2, a1, c2, c1, mu, F):
    """Drift coefficients of the state under the forward measure and the
    Girsanov kernel ``(G, K)`` relating it to the physical measure."""
    n = S.shape[-1]
    M = np.eye(n) - D
    Sc1 = np.einsum("kij,kj->ki", S, c1)
    DSa1 = np.einsum("ij,kjl,kl->ki", D, S, a1)
    psi = Sc1 - DSa1
    PsiTilde = S @ c2 - D @ S @ a2
    Psi = M + PsiTilde
    phi = mu - np.einsum("kij,kj->ki", S @ D @ S, a1) + np.einsum("kij,kj->ki", S, Sc1)
    Phi = F + S @ D @ S @ a2 + S @ D - S @ S @ c2
    G = Sc1 - DSa1
    K = PsiTilde - D
    return psi, Psi, PsiTilde, phi, Phi, G, K


def solve_beta(c_table, schedule: SigmaSchedule, spec: ModelSpec, sigma_y, mc=None):
    """Exponential-affine coefficients for the index-linear example.

    Returns ``(beta1, beta0, beta0_index)``.  ``(beta1, beta0)`` give
    ``P(t,T) = E^{A_T}[exp(int sigma_y'(psi + Psi z) ds)]``.  The expectation of
    ``Y_T / Y_t`` itself also picks up the covariance between the index noise
    and the filter, which shifts the drift of ``z`` by ``Sigma sigma_y``;
    ``beta0_index`` carries that correction and ``beta1`` is unchanged.
    """
    if mc is None:
        raise ValueError("forward-measure coefficients required")
    psi, Psi, _, phi, Phi, _, _ = mc
    S = schedule.values
    grid = schedule.grid
    sy = np.asarray(sigma_y, dtype=float)
    u = -np.einsum("kji,j->ki", Psi, sy)
    B = np.swapaxes(Phi, 1, 2)
    beta1 = linear_backward(grid, u, B, "beta1")
    S2 = S @ S

    def rhs(phi, b1, S2, psi, shift):
        return (-np.einsum("ki,ki->k", phi + shift, b1)
                - 0.5 * np.einsum("ki,kij,kj->k", b1, S2, b1) - psi @ sy)

    Sm = _mids(S)
    args = (phi, beta1, S2, psi)
    margs = (_mids(phi), _mids(beta1), Sm @ Sm, _mids(psi))
    beta0 = quadrature_backward(grid, rhs(*args, 0.0), rhs(*margs, 0.0), "beta0")
    beta0_index = quadrature_backward(grid, rhs(*args, S @ sy), rhs(*margs, Sm @ sy),
                                      "beta0_index")
    return beta1, beta0, beta0_index


def index_row(spec: ModelSpec):
    """``(index, sigma_y, beta)`` when the payoff is linear in an index whose
    volatility row is ``y**beta * sigma_y``; ``None`` otherwise."""
    pay, vol = spec.payoff, spec.volatility
    if not isinstance(pay, IndexLinearPayoff) or not isinstance(vol, PowerRowVolatility):
        return None
    i = pay.index
    return i, np.array(vol.vectors[i]), float(vol.powers[i])


def solve_coefficients(spec: ModelSpec, step=None, schedule=None, sigma_y=None) -> CoefficientTable:
    """Full backward pipeline: Sigma -> a -> (b, varphi, kappa) -> c -> mc coefficients -> beta."""
    if schedule is None:
        schedule = solve_kalman_sigma(spec, step)
    S = schedule.values
    D = spec.tradable
    a2, a1, a0 = solve_a(schedule, spec)
    b2, b1, varphi, kappa = forward_measure_terms(S, D, a2, a1, spec.mu, spec.F)
    c2, c1, c0 = solve_c((a2, a1, a0), schedule, spec)
    mc = build_mc_coeffs(S, D, a2, a1, c2, c1, spec.mu, spec.F)
    psi, Psi, PsiTilde, phi, Phi, G, K = mc

    info = index_row(spec)
    index = None
    solvable = False
    if sigma_y is None and info is not None:
        index, sigma_y, power = info
        solvable = power == 1.0
    beta1 = beta0 = beta0_index = None
    if sigma_y is not None:
        sigma_y = np.asarray(sigma_y, dtype=float)
        beta1, beta0, beta0_index = solve_beta((c2, c1, c0), schedule, spec, sigma_y, mc)

    table = CoefficientTable(
        grid=schedule.grid, d=spec.d, Sigma=S, Xi=_sym_xi(S, D),
        a2=a2, a1=a1, a0=a0, b2=b2, b1=b1, varphi=varphi, kappa=kappa,
        c2=c2, c1=c1, c0=c0, psi=psi, Psi=Psi, PsiTilde=PsiTilde, phi=phi, Phi=Phi,
        G=G, K=K, sigma_y=sigma_y, beta1=beta1, beta0=beta0, beta0_index=beta0_index,
        index=index, solvable=solvable)
    for f in fields(table):
        v = getattr(table, f.name)
        if isinstance(v, np.ndarray):
            v.setflags(write=False)
    return table


# --------------------------------------------------------------------------
# semi-closed evaluations
# --------------------------------------------------------------------------

def _quad(z, M2, v1, s0):
    z = np.asarray(z, dtype=float)
    return ((0.5 * (z @ M2) + v1) * z).sum(axis=-1) + s0


def _nodes(table, t, *names):
    return [table.at(nm, t) for nm in names]


def eval_VL(table: CoefficientTable, t, zhat):
    a2, a1, a0 = _nodes(table, t, "a2", "a1", "a0")
    return _quad(zhat, a2, a1, a0)


def eval_V2(table, t, zhat):
    return np.exp(eval_VL(table, t, zhat))


def eval_logA(table, t, zhat):
    c2, c1, c0 = _nodes(table, t, "c2", "c1", "c0")
    return _quad(zhat, c2, c1, c0)


def eval_A(table, t, zhat):
    return np.exp(eval_logA(table, t, zhat))


def _need_beta(table):
    if table.beta1 is None:
        raise ConfigMismatch("coefficient table has no index-linear (beta) tables")


def eval_P(table, t, zhat):
    """``P(t,T) = E^{A_T}[exp(int_t^T sigma_y'(psi + Psi z) ds) | z_t = zhat]``."""
    _need_beta(table)
    b1, b0 = _nodes(table, t, "beta1", "beta0")
    return np.exp(np.asarray(zhat, dtype=float) @ b1 + b0)


def _require_solvable(table):
    _need_beta(table)
    if not table.solvable:
        raise ConfigMismatch("closed forms need an index-linear payoff with log-normal index")


def eval_V1_solvable(table, t, y, zhat):
    """``V1 = A(t,T) E^{A_T}[Y_T | y, zhat]`` for the log-normal index."""
    _require_solvable(table)
    b1, b0 = _nodes(table, t, "beta1", "beta0_index")
    z = np.asarray(zhat, dtype=float)
    return np.asarray(y) * eval_A(table, t, z) * np.exp(z @ b1 + b0)


def eval_Z1_solvable(table, t, y, zhat, v1=None):
    """Martingale integrand ``(Z1, Gamma1)`` of ``V1`` as an n-vector.

    ``v1`` may pass an already evaluated ``V1`` at the same point.
    """
    _require_solvable(table)
    z = np.asarray(zhat, dtype=float)
    S, c1, c2, b1 = _nodes(table, t, "Sigma", "c1", "c2", "beta1")
    if v1 is None:
        v1 = eval_V1_solvable(table, t, y, z)
    inner = c1 + b1 + z @ c2.T
    return np.asarray(v1)[..., None] * (table.sigma_y + inner @ S.T)


# --------------------------------------------------------------------------
# nested time integrals
# --------------------------------------------------------------------------

BRACKETS = (
    "one1", "one2", "one3",
    "psi1", "psi2", "psiw",
    "Pt1", "Pt2", "Ptw",
    "phi1", "phi2", "phi3", "phiw2",
    "Phi1", "Phi2", "Phi3", "Phiw2",
    "Sig1", "Sig2",
    "Pt_phi", "Pt_Phi", "Phi_phi2", "Phi_Phi2",
)


@dataclass(frozen=True)
class Brackets:
    """Nested integrals over ``[t, T]`` evaluated at one left endpoint ``t``.

    Suffix ``1`` is ``[f]``, ``2`` is ``[[f]]``, ``3`` is ``[[[f]]]``; ``psiw``
    is ``[(s-t) psi]`` and ``phiw2`` is ``[[(u-t) phi]]``; ``Pt_phi`` is
    ``[PsiTilde [phi]]`` and ``Phi_phi2`` is ``[[Phi [phi]]]``.
    """

    t: float
    tau: float
    one1: float
    one2: float
    one3: float
    psi1: np.ndarray
    psi2: np.ndarray
    psiw: np.ndarray
    Pt1: np.ndarray
    Pt2: np.ndarray
    Ptw: np.ndarray
    phi1: np.ndarray
    phi2: np.ndarray
    phi3: np.ndarray
    phiw2: np.ndarray
    Phi1: np.ndarray
    Phi2: np.ndarray
    Phi3: np.ndarray
    Phiw2: np.ndarray
    Sig1: np.ndarray
    Sig2: np.ndarray
    Pt_phi: np.ndarray
    Pt_Phi: np.ndarray
    Phi_phi2: np.ndarray
    Phi_Phi2: np.ndarray


class _Cumulative:
    """Iterated cumulative trapezoid integrals of one integrand from 0."""

    def __init__(self, grid, f):
        self.grid = grid
        self.c0 = cumulative_trapezoid(f, grid, axis=0, initial=0.0)
        self.c1 = cumulative_trapezoid(self.c0, grid, axis=0, initial=0.0)
        self.c2 = cumulative_trapezoid(self.c1, grid, axis=0, initial=0.0)

    def _tau(self, ndim):
        tau = self.grid[-1] - self.grid
        return tau.reshape((-1,) + (1,) * (ndim - 1))

    def single(self):
        return self.c0[-1] - self.c0

    def double(self):
        tau = self._tau(self.c0.ndim)
        return (self.c1[-1] - self.c1) - tau * self.c0

    def triple(self):
        tau = self._tau(self.c0.ndim)
        return (self.c2[-1] - self.c2) - tau * self.c1 - 0.5 * tau ** 2 * self.c0


def _tcol(grid, ndim):
    return grid.reshape((-1,) + (1,) * (ndim - 1))


class IntegralTable:
    """Every nested bracket needed by the third-order expansion, tabulated as
    a function of the left endpoint on the coefficient grid."""

    def __init__(self, grid, values):
        self.grid = grid
        self.values = values
        self.lookups = 0

    def __getitem__(self, name):
        return self.values[name]

    def at(self, t) -> Brackets:
        self.lookups += 1
        t = float(t)
        vals = {k: interp_nodes(self.grid, v, t) for k, v in self.values.items()}
        vals = {k: (float(v) if np.ndim(v) == 0 else v) for k, v in vals.items()}
        return Brackets(t=t, tau=self.grid[-1] - t, **vals)


def nested_brackets(grid, f):
    """``([f], [[f]], [[[f]]], [(s-t) f], [[(u-t) f]])`` as functions of ``t``."""
    base = _Cumulative(grid, f)
    tf = _tcol(grid, np.ndim(f)) * f
    weighted = _Cumulative(grid, tf)
    t = _tcol(grid, np.ndim(f))
    return (base.single(), base.double(), base.triple(),
            weighted.single() - t * base.single(),
            weighted.double() - t * base.double())


def product_brackets(grid, h, f):
    """``[h [f]_t^s]_t^T`` and ``[[h [f]_t^u]_t^s]_t^T`` for matrix-valued ``h``."""
    inner = cumulative_trapezoid(f, grid, axis=0, initial=0.0)
    prod = np.einsum("kij,kj...->ki...", h, inner)
    P = _Cumulative(grid, prod)
    Hc = _Cumulative(grid, h)
    single = P.single() - np.einsum("kij,kj...->ki...", Hc.single(), inner)
    double = P.double() - np.einsum("kij,kj...->ki...", Hc.double(), inner)
    return single, double


def build_integral_table(table: CoefficientTable) -> IntegralTable:
    grid = table.grid
    v = {}
    one = nested_brackets(grid, np.ones(len(grid)))
    v["one1"], v["one2"], v["one3"] = one[0], one[1], one[2]
    s, dd, _, w, _ = nested_brackets(grid, table.psi)
    v["psi1"], v["psi2"], v["psiw"] = s, dd, w
    s, dd, _, w, _ = nested_brackets(grid, table.PsiTilde)
    v["Pt1"], v["Pt2"], v["Ptw"] = s, dd, w
    s, dd, tr, _, w2 = nested_brackets(grid, table.phi)
    v["phi1"], v["phi2"], v["phi3"], v["phiw2"] = s, dd, tr, w2
    s, dd, tr, _, w2 = nested_brackets(grid, table.Phi)
    v["Phi1"], v["Phi2"], v["Phi3"], v["Phiw2"] = s, dd, tr, w2
    s, dd, _, _, _ = nested_brackets(grid, table.Sigma)
    v["Sig1"], v["Sig2"] = s, dd
    v["Pt_phi"], _ = product_brackets(grid, table.PsiTilde, table.phi)
    v["Pt_Phi"], _ = product_brackets(grid, table.PsiTilde, table.Phi)
    _, v["Phi_phi2"] = product_brackets(grid, table.Phi, table.phi)
    _, v["Phi_Phi2"] = product_brackets(grid, table.Phi, table.Phi)
    for arr in v.values():
        arr.setflags(write=False)
    return IntegralTable(grid, v)
