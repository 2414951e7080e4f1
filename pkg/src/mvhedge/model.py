"""Market model: dimensions, filter parameters, volatility and payoff maps.

State coordinates are ordered ``(S_1..S_d, Y_{d+1}..Y_n)``.  The volatility
map returns the full ``n x n`` matrix whose first ``d`` rows are ``(sigma, 0)``
and whose last ``m`` rows are ``(sigma_bar, rho)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .errors import SingularBlock

BAYESIAN = "bayesian"
KALMAN_BUCY = "kalman"
FILTER_KINDS = (BAYESIAN, KALMAN_BUCY)


def _frozen(a, dtype=float):
    arr = np.array(a, dtype=dtype, copy=True)
    arr.setflags(write=False)
    return arr


def tradable_projector(d: int, n: int) -> np.ndarray:
    """Diagonal matrix with ones on the first ``d`` entries."""
    p = np.zeros((n, n))
    p[np.arange(d), np.arange(d)] = 1.0
    return p


def nontradable_projector(d: int, n: int) -> np.ndarray:
    return np.eye(n) - tradable_projector(d, n)


# --------------------------------------------------------------------------
# volatility maps
# --------------------------------------------------------------------------

class VolatilityMap:
    """Evaluation contract for a time-homogeneous volatility ``gamma(x)``.

    ``evaluate(x, order)`` accepts ``x`` of shape ``(n,)`` or ``(N, n)`` and
    returns a tuple ``(g, dg, d2g)`` truncated at ``order`` where
    ``g[..., i, j] = gamma_ij``, ``dg[..., k, i, j] = d gamma_ij / d x_k`` and
    ``d2g[..., k, l, i, j]`` the second derivatives.
    """

    kind = "abstract"

    def evaluate(self, x, order=0):
        raise NotImplementedError

    def __call__(self, x):
        return self.evaluate(x, 0)[0]

    def apply(self, x, v):
        """``gamma(x) v`` for a batch of states and vectors."""
        g = self.evaluate(x, 0)[0]
        return np.einsum("...ij,...j->...i", g, v)

    def absorb(self, X):
        """Project simulated states back onto the state space (identity by default)."""
        return X

    def row_structure(self):
        """Constant row vectors ``V`` when ``gamma(x) = diag(s(x)) V``, else ``None``."""
        return None

    def flow_generator(self, x, v):
        """``J[..., k, j] = sum_l d_k gamma_jl(x) v_l``, the increment matrix of the flows."""
        dg = self.evaluate(x, 1)[1]
        return np.einsum("...kjl,...l->...kj", dg, v)


@dataclass(frozen=True, eq=False)
class PowerRowVolatility(VolatilityMap):
    """Rows of the form ``gamma_i(x) = x_i ** p_i * v_i``.

    ``p_i = 0`` gives a constant row, ``p_i = 1`` a log-normal row and a
    fractional power a CEV row.  Coordinates at or below zero are treated as
    absorbed when ``p_i > 0``: the row and its derivatives vanish there.
    """

    vectors: np.ndarray
    powers: np.ndarray
    kind: str = "Composite"

    def __post_init__(self):
        v = _frozen(self.vectors)
        p = _frozen(self.powers)
        if v.ndim != 2 or v.shape[0] != v.shape[1]:
            raise ValueError("volatility vectors must be a square matrix")
        if p.shape != (v.shape[0],):
            raise ValueError("one power per row required")
        object.__setattr__(self, "vectors", v)
        object.__setattr__(self, "powers", p)

    @property
    def n(self):
        return self.vectors.shape[0]

    def row_scales(self, x, order=0):
        """Return ``s_i = x_i**p_i`` and, if asked, ``s_i'`` and ``s_i''``."""
        x = np.asarray(x, dtype=float)
        out = [np.empty_like(x) for _ in range(order + 1)]
        for i, p in enumerate(self.powers):
            xi = x[..., i]
            if p == 0.0:
                out[0][..., i] = 1.0
                for r in range(1, order + 1):
                    out[r][..., i] = 0.0
                continue
            pos = xi > 0.0
            if p == 1.0:
                out[0][..., i] = np.where(pos, xi, 0.0)
                if order >= 1:
                    out[1][..., i] = pos
                if order >= 2:
                    out[2][..., i] = 0.0
                continue
            xs = np.where(pos, xi, 1.0)
            out[0][..., i] = np.where(pos, xs ** p, 0.0)
            if order >= 1:
                out[1][..., i] = np.where(pos, p * xs ** (p - 1.0), 0.0)
            if order >= 2:
                out[2][..., i] = np.where(pos, p * (p - 1.0) * xs ** (p - 2.0), 0.0)
        return out

    def row_structure(self):
        return self.vectors

    def absorb(self, X):
        # an Euler step may overshoot zero; the true process stops there
        cols = np.flatnonzero(self.powers > 0.0)
        if cols.size and (X[..., cols] < 0.0).any():
            X = X.copy()
            X[..., cols] = np.maximum(X[..., cols], 0.0)
        return X

    def apply(self, x, v):
        return self.row_scales(x)[0] * (np.asarray(v) @ self.vectors.T)

    def flow_generator(self, x, v):
        # only the diagonal survives: d_k gamma_j = delta_kj s_j' v_j
        ds = self.row_scales(x, 1)[1]
        diag = ds * (np.asarray(v) @ self.vectors.T)
        J = np.zeros(diag.shape + (self.n,))
        idx = np.arange(self.n)
        J[..., idx, idx] = diag
        return J

    def evaluate(self, x, order=0):
        x = np.asarray(x, dtype=float)
        n = self.n
        scales = self.row_scales(x, order)
        g = scales[0][..., :, None] * self.vectors
        out = [g]
        if order >= 1:
            eye = np.eye(n)
            # dg[k, i, j] = delta_ki s_i' v_ij
            dg = eye[:, :, None] * (scales[1][..., None, :, None] * self.vectors)
            out.append(dg)
        if order >= 2:
            diag3 = np.zeros((n, n, n))
            diag3[np.arange(n), np.arange(n), np.arange(n)] = 1.0
            d2g = diag3[:, :, :, None] * (scales[2][..., None, None, :, None] * self.vectors)
            out.append(d2g)
        return tuple(out)


def constant_volatility(matrix) -> PowerRowVolatility:
    m = np.asarray(matrix, dtype=float)
    return PowerRowVolatility(m, np.zeros(m.shape[0]), kind="Constant")


def loglinear_volatility(matrix) -> PowerRowVolatility:
    m = np.asarray(matrix, dtype=float)
    return PowerRowVolatility(m, np.ones(m.shape[0]), kind="LogLinear")


def cev_index_volatility(base, sigma_y, beta, index, base_powers=None) -> PowerRowVolatility:
    """Index row ``(Y^I)**beta * sigma_y``; other rows taken from ``base``.

    ``base_powers`` gives the powers of the remaining rows (default: 1, i.e.
    log-normal tradables; constant rows need an explicit 0).
    """
    if not 0.0 <= beta <= 1.0:
        raise ValueError("CEV exponent must lie in [0, 1]")
    v = np.array(base, dtype=float)
    n = v.shape[0]
    p = np.ones(n) if base_powers is None else np.array(base_powers, dtype=float)
    v[index] = np.asarray(sigma_y, dtype=float)
    p[index] = beta
    return PowerRowVolatility(v, p, kind="CEVIndex")


# --------------------------------------------------------------------------
# payoffs
# --------------------------------------------------------------------------

class PayoffMap:
    """Terminal liability ``H(x)`` with derivatives up to third order.

    ``evaluate(x, order)`` returns ``(H, dH, d2H, d3H)`` truncated at
    ``order``; arrays carry a leading batch axis when ``x`` is 2-D.
    """

    kind = "abstract"
    # highest derivative order that can be non-zero
    degree = 3

    def evaluate(self, x, order=0):
        raise NotImplementedError

    def __call__(self, x):
        return self.evaluate(x, 0)[0]


def _zeros_tail(x, n, order, start):
    batch = np.shape(x)[:-1]
    return [np.zeros(batch + (n,) * k) for k in range(start, order + 1)]


@dataclass(frozen=True)
class IndexLinearPayoff(PayoffMap):
    """``H = X^index``."""

    index: int
    kind: str = "IndexLinear"
    degree = 1

    def evaluate(self, x, order=0):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        out = [x[..., self.index].copy()]
        if order >= 1:
            dh = np.zeros(x.shape)
            dh[..., self.index] = 1.0
            out.append(dh)
        out += _zeros_tail(x, n, order, 2)
        return tuple(out)


@dataclass(frozen=True)
class ConstantPayoff(PayoffMap):
    value: float = 0.0
    kind: str = "Constant"
    degree = 0

    def evaluate(self, x, order=0):
        x = np.asarray(x, dtype=float)
        out = [np.full(x.shape[:-1], float(self.value))]
        out += _zeros_tail(x, x.shape[-1], order, 1)
        return tuple(out)


@dataclass(frozen=True)
class PowerIndexPayoff(PayoffMap):
    """``H = scale * (X^index) ** exponent`` for a positive integer exponent."""

    index: int
    exponent: int = 2
    scale: float = 1.0
    kind: str = "Smooth"

    def evaluate(self, x, order=0):
        x = np.asarray(x, dtype=float)
        n = x.shape[-1]
        y = x[..., self.index]
        k = self.exponent
        coeffs = [1.0, k, k * (k - 1), k * (k - 1) * (k - 2)]
        out = [self.scale * y ** k]
        for r in range(1, order + 1):
            t = np.zeros(x.shape[:-1] + (n,) * r)
            idx = (Ellipsis,) + (self.index,) * r
            t[idx] = self.scale * coeffs[r] * y ** (k - r) if k >= r else 0.0
            out.append(t)
        return tuple(out)


@dataclass(frozen=True, eq=False)
class SmoothPayoff(PayoffMap):
    """User-registered smooth payoff.

    Each callable maps a batch ``(N, n)`` to ``(N,)``, ``(N, n)``,
    ``(N, n, n)`` and ``(N, n, n, n)`` respectively.
    """

    value: Callable
    grad: Callable
    hess: Optional[Callable] = None
    third: Optional[Callable] = None
    name: str = "smooth"
    kind: str = "Smooth"

    def evaluate(self, x, order=0):
        x = np.asarray(x, dtype=float)
        single = x.ndim == 1
        xb = np.atleast_2d(x)
        fns = [self.value, self.grad, self.hess, self.third]
        out = []
        for r in range(order + 1):
            if fns[r] is None:
                raise ValueError(f"payoff '{self.name}' lacks derivative order {r}")
            v = np.asarray(fns[r](xb), dtype=float)
            out.append(v[0] if single else v)
        return tuple(out)


# --------------------------------------------------------------------------
# model specification
# --------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class ModelSpec:
    d: int
    m: int
    z0: np.ndarray
    Sigma0: np.ndarray
    mu: np.ndarray
    F: np.ndarray
    delta: np.ndarray
    volatility: VolatilityMap
    payoff: PayoffMap
    T: float
    x0: np.ndarray
    filter_kind: str = KALMAN_BUCY
    name: str = field(default="model", compare=False)

    def __post_init__(self):
        for name in ("z0", "Sigma0", "mu", "F", "delta", "x0"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "T", float(self.T))

    @property
    def n(self):
        return self.d + self.m

    @property
    def tradable(self):
        return tradable_projector(self.d, self.n)

    @property
    def nontradable(self):
        return nontradable_projector(self.d, self.n)

    def replace(self, **changes) -> "ModelSpec":
        from dataclasses import replace
        return replace(self, **changes)


def bayesian_model(d, m, z0, Sigma0, volatility, payoff, T, x0, name="bayesian"):
    n = d + m
    return ModelSpec(d=d, m=m, z0=z0, Sigma0=Sigma0, mu=np.zeros(n), F=np.zeros((n, n)),
                     delta=np.zeros((n, n)), volatility=volatility, payoff=payoff, T=T,
                     x0=x0, filter_kind=BAYESIAN, name=name)


def validate(spec: ModelSpec) -> list:
    """Return the list of violated invariants; an empty list means valid."""
    bad = []
    d, m = spec.d, spec.m
    if d < 1:
        bad.append("d ≥ 1 required")
    if m < 0:
        bad.append("m ≥ 0 required")
    n = d + m
    if not spec.T > 0:
        bad.append("horizon T > 0 required")
    if spec.filter_kind not in FILTER_KINDS:
        bad.append(f"filter_kind must be one of {FILTER_KINDS}")

    shapes = {"z0": (n,), "mu": (n,), "F": (n, n), "Sigma0": (n, n), "x0": (n,)}
    for name, shape in shapes.items():
        if getattr(spec, name).shape != shape:
            bad.append(f"{name} must have shape {shape}")
    if spec.delta.ndim != 2 or spec.delta.shape[0] != n:
        bad.append(f"delta must have {n} rows")
    if bad:
        return bad

    for name in ("z0", "mu", "F", "Sigma0", "delta", "x0"):
        if not np.all(np.isfinite(getattr(spec, name))):
            bad.append(f"{name} has non-finite entries")

    S0 = spec.Sigma0
    if np.max(np.abs(S0 - S0.T), initial=0.0) != 0.0:
        bad.append("Sigma0 not symmetric")
    elif np.all(np.isfinite(S0)) and np.linalg.eigvalsh(S0).min() <= 0.0:
        bad.append("Sigma0 not positive definite")

    if spec.filter_kind == BAYESIAN and (np.any(spec.mu) or np.any(spec.F) or np.any(spec.delta)):
        bad.append("Bayesian filter requires mu = F = delta = 0")

    try:
        g = spec.volatility.evaluate(spec.x0, 0)[0]
    except Exception as exc:  # pragma: no cover - reported, not raised
        bad.append(f"volatility evaluation failed: {exc}")
        return bad
    if g.shape != (n, n):
        bad.append(f"volatility must return an {n}x{n} matrix")
        return bad
    if np.any(g[:d, d:] != 0.0):
        bad.append("volatility rows 1..d must have zero non-tradable block")
    try:
        check_blocks(g, d)
    except SingularBlock as exc:
        bad.append(str(exc))
    return bad


def check_blocks(g, d, tol=1e-14):
    """Raise :class:`SingularBlock` if the sigma or rho sub-block is singular."""
    n = g.shape[-1]
    sig = g[:d, :d]
    if abs(np.linalg.det(sig)) <= tol:
        raise SingularBlock("tradable volatility block sigma is singular")
    if n > d:
        rho = g[d:, d:]
        if abs(np.linalg.det(rho)) <= tol:
            raise SingularBlock("non-tradable volatility block rho is singular")


def eval_gamma(spec: ModelSpec, x, order=2):
    """Volatility matrix and its derivatives at a single point ``x``."""
    x = np.asarray(x, dtype=float)
    if x.shape != (spec.n,) or not np.all(np.isfinite(x)):
        raise ValueError("x must be a finite vector of length n")
    out = spec.volatility.evaluate(x, order)
    check_blocks(out[0], spec.d)
    return out
