"""Monte Carlo engine: path simulation, estimators and wealth replay."""
from .estimators import (GirsanovReport, estimate_V0_nested, estimate_V0_particle, estimate_V0_physical,
                         estimate_V0_solvable, estimate_V1, estimate_Z1_delta,
                         estimate_Z1_flows, girsanov_check)
from .paths import DEFAULT_DT, FORWARD, PHYSICAL, Engine, PathEnsemble, simulate
from .wealth import ClosedFormProvider, HedgeReport, histogram, physical_run, replay_wealth

__all__ = [
    "DEFAULT_DT", "FORWARD", "PHYSICAL", "Engine", "PathEnsemble", "simulate",
    "estimate_V1", "estimate_Z1_flows", "estimate_Z1_delta", "estimate_V0_particle",
    "estimate_V0_physical", "estimate_V0_solvable", "estimate_V0_nested", "girsanov_check",
    "GirsanovReport",
    "ClosedFormProvider", "HedgeReport", "histogram", "physical_run", "replay_wealth",
]
