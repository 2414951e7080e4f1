"""Replay of the optimal wealth process and the hedging report.

With ``q = (zeta1 + V1 zhat)_d`` and ``Z2 + V2 theta = V2 (Z_L + theta)``,
``Z_L = (Sigma (a1 + a2 zhat))_d``, the optimal wealth follows

    dW = [q / V2 - W (Z_L + theta)]' (dN + theta dt).

Only innovation increments enter, so the tradable volatility is needed
solely to report the positions ``pi*``.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from ..coeffs import eval_V1_solvable, eval_V2, eval_Z1_solvable, _require_solvable
from ..errors import NumericOverflow
from .paths import DEFAULT_DT, PHYSICAL, Engine, assemble, map_chunks, mean_se, pair_units
from .rng import CHUNK, STREAM_MAIN, ChunkNoise, chunk_layout

HIST_BINS = 200
HIST_WIDTH = 5.0


class ClosedFormProvider:
    """``(V1, zeta1)`` of the log-normal index example from the coefficient tables."""

    def __init__(self, coeffs):
        _require_solvable(coeffs)
        self.coeffs = coeffs
        self.index = coeffs.index

    def __call__(self, t, X, z):
        y = X[..., self.index]
        v1 = eval_V1_solvable(self.coeffs, t, y, z)
        return v1, eval_Z1_solvable(self.coeffs, t, y, z, v1)


def _hedge_ratio(sig, num, v2, t):
    """Positions in the tradables: ``sig'^-1 num / V2`` per initial capital."""
    try:
        with np.errstate(over="ignore", invalid="ignore"):
            pi = np.linalg.solve(sig.T, num.T).T / v2
    except np.linalg.LinAlgError:
        pi = np.full(num.shape, np.nan)
    if not np.isfinite(pi).all():
        raise NumericOverflow(0, t)
    return pi


def _checkpoint_steps(K):
    return sorted({0, K // 2, K})


def physical_run(spec, coeffs, provider, ws, n_paths, dt=DEFAULT_DT, seed=0, antithetic=True,
                 workers=1, track_pi=False):
    """Simulate under the physical measure, accumulating the ``V0`` integrand
    and, when ``ws`` is given, the optimal wealth for each initial capital."""
    engine = Engine(spec, coeffs, PHYSICAL, dt)
    t, K, d = engine.times, engine.n_steps, spec.d
    a2, a1, a0 = (coeffs.at(k, t) for k in ("a2", "a1", "a0"))
    ws = None if ws is None else np.atleast_1d(np.asarray(ws, dtype=float))
    cps = _checkpoint_steps(K)
    layout = chunk_layout(n_paths)

    def run(chunk, size):
        noise = ChunkNoise(seed, chunk, size, spec.n, STREAM_MAIN, antithetic)
        st = engine.start(noise.lanes, spec.x0, spec.z0)
        integ = np.zeros(noise.lanes)
        rec = {}
        W = None if ws is None else np.tile(ws, (noise.lanes, 1))
        pis = [] if (track_pi and chunk == 0 and W is not None) else None
        try:
            for k in range(K):
                z = st.z
                V1, zeta = provider(t[k], st.X, z)
                V2 = np.exp(((0.5 * (z @ a2[k]) + a1[k]) * z).sum(axis=1) + a0[k])
                q = (zeta + V1[:, None] * z)[:, :d]
                if W is not None and k in cps:
                    rec[k] = (W.copy(), V1, V2, integ.copy())
                dn = noise.draw(engine.sqdt)
                if W is not None:
                    th = z[:, :d]
                    ZL = ((a1[k] + z @ a2[k].T) @ engine.S[k].T)[:, :d]
                    inc = dn[:, :d] + th * engine.dt
                    if pis is not None:
                        num = q[0][None, :] - W[0][:, None] * (V2[0] * (ZL[0] + th[0]))[None, :]
                        pis.append(_hedge_ratio(spec.volatility(st.X[0])[:d, :d], num, V2[0], t[k]))
                    W = (W + ((q / V2[:, None]) * inc).sum(axis=1)[:, None]
                         - W * ((ZL + th) * inc).sum(axis=1)[:, None])
                integ += (q * q).sum(axis=1) / V2 * engine.dt
                engine.step(k, st, dn)
        except NumericOverflow as exc:
            raise NumericOverflow(chunk * CHUNK + exc.path % size, exc.t) from None
        H = spec.payoff(st.X)
        out = {"v0": H ** 2 - integ, "H": H}
        if W is not None:
            rec[K] = (W, H, np.ones_like(H), integ)
            out["W"] = W
            for j, k in enumerate(cps):
                Wk, V1k, V2k, Ik = rec[k]
                out[f"m{j}"] = (Wk ** 2 * V2k[:, None] - 2 * Wk * V1k[:, None]
                                + (H ** 2 - (integ - Ik))[:, None])
            out["pi"] = None
        if pis is not None:
            out["pi"] = np.array(pis)
        return out

    results = map_chunks(run, layout, workers)
    pi = results[0].get("pi") if ws is not None else None
    for r in results:
        r.pop("pi", None)
    res = assemble(results, layout, antithetic)
    res["pi"] = pi
    res["times"] = t
    res["checkpoints"] = t[cps]
    return res


@dataclass
class HedgeReport:
    w: float
    V2_0: float
    V1_0: float
    V0_0: float
    V0_se: float
    w_star: float
    predicted: float
    mse: float
    mse_se: float
    hist_edges: np.ndarray
    hist_counts: np.ndarray
    checkpoint_times: np.ndarray
    martingale_means: np.ndarray
    martingale_se: np.ndarray
    pi_times: Optional[np.ndarray] = None
    pi_path: Optional[np.ndarray] = None
    n_paths: int = 0
    dt: float = DEFAULT_DT
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def value(self, w):
        """``V(0, w) = w^2 V2 - 2 w V1 + V0``."""
        w = np.asarray(w, dtype=float)
        return w ** 2 * self.V2_0 - 2 * w * self.V1_0 + self.V0_0

    def to_dict(self):
        out = {}
        for k, v in asdict(self).items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return out

    def to_json(self, path=None):
        text = json.dumps(self.to_dict(), indent=2)
        if path is not None:
            with open(path, "w") as fh:
                fh.write(text + "\n")
        return text


def histogram(values, bins=HIST_BINS, width=HIST_WIDTH):
    """Counts on ``bins`` uniform bins over ``mean +- width * std``."""
    v = np.asarray(values, dtype=float)
    m, s = v.mean(), v.std()
    if not s > 0:
        s = 1e-12
    counts, edges = np.histogram(v, bins=bins, range=(m - width * s, m + width * s))
    return edges, counts


def replay_wealth(spec, coeffs, z1_provider, w, n_paths=100000, dt=DEFAULT_DT, seed=0,
                  antithetic=True, workers=1, V0=None, bins=HIST_BINS):
    """Simulate the optimal wealth from each initial capital in ``w``.

    ``V0`` may be supplied as ``(value, se)``; otherwise it is estimated from
    the same paths.  Returns one :class:`HedgeReport` per capital (a single
    report when ``w`` is a scalar).
    """
    scalar = np.ndim(w) == 0
    ws = np.atleast_1d(np.asarray(w, dtype=float))
    x0, z0 = spec.x0, spec.z0
    V1_0 = float(np.asarray(z1_provider(0.0, x0[None], z0[None])[0]).ravel()[0])
    V2_0 = float(eval_V2(coeffs, 0.0, z0))
    res = physical_run(spec, coeffs, z1_provider, ws, n_paths, dt, seed, antithetic, workers,
                       track_pi=True)
    if V0 is None:
        m, se = mean_se(pair_units(res["v0"], antithetic))
        V0 = (float(m), float(se))
    H, W = res["H"], res["W"]
    reports = []
    for j, wj in enumerate(ws):
        err = H - W[:, j]
        mse, mse_se = mean_se(pair_units(err ** 2, antithetic))
        edges, counts = histogram(err, bins)
        mT = res[f"m{len(res['checkpoints']) - 1}"][:, j]
        mm, ms = [], []
        for i in range(len(res["checkpoints"])):
            a, b = mean_se(pair_units(res[f"m{i}"][:, j] - mT, antithetic))
            mm.append(float(a))
            ms.append(float(b))
        rep = HedgeReport(
            w=float(wj), V2_0=V2_0, V1_0=V1_0, V0_0=V0[0], V0_se=V0[1], w_star=V1_0 / V2_0,
            predicted=float(wj ** 2 * V2_0 - 2 * wj * V1_0 + V0[0]), mse=float(mse),
            mse_se=float(mse_se), hist_edges=edges, hist_counts=counts,
            checkpoint_times=res["checkpoints"], martingale_means=np.array(mm),
            martingale_se=np.array(ms), pi_times=res["times"][:-1],
            pi_path=None if res["pi"] is None else res["pi"][:, j, :],
            n_paths=int(n_paths), dt=float(res["times"][1] - res["times"][0]), seed=int(seed))
        reports.append(rep)
    return reports[0] if scalar else reports
