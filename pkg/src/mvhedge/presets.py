"""Reference parameter sets: the three-factor index example and its CEV variants."""
from __future__ import annotations

import numpy as np

from .model import IndexLinearPayoff, ModelSpec, cev_index_volatility

Z0 = (0.3, 0.3, 0.1)
MU = (0.06, 0.06, 0.02)
F = ((0.2, 0.07, 0.05), (0.07, 0.2, 0.03), (0.05, 0.03, 0.2))
DELTA = ((0.3, 0.15, -0.1), (0.15, 0.3, -0.08), (-0.03, -0.07, 0.3))
SIGMA0 = ((0.2, 0.1, -0.01), (0.1, 0.2, -0.05), (-0.01, -0.05, 0.2))
SIGMA_Y = (-0.07, -0.12, 0.27)
# tradable rows (log-normal); they never enter V1, V2 or the hedge through the wealth path
STOCK_VOL = ((0.2, 0.0, 0.0), (0.05, 0.2, 0.0))


def index_example(T=0.5, beta=1.0, y0=1.0, s0=(1.0, 1.0), name=None) -> ModelSpec:
    """Two tradables and one non-tradable index ``Y`` with CEV exponent ``beta``; ``H = Y_T``."""
    base = np.zeros((3, 3))
    base[:2] = STOCK_VOL
    vol = cev_index_volatility(base, SIGMA_Y, beta, index=2, base_powers=(1.0, 1.0, 1.0))
    return ModelSpec(d=2, m=1, z0=Z0, Sigma0=SIGMA0, mu=MU, F=F, delta=DELTA,
                     volatility=vol, payoff=IndexLinearPayoff(2), T=T,
                     x0=(s0[0], s0[1], y0), name=name or f"index-beta{beta:g}")
