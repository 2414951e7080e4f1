"""TOML run configuration: ``[model]``, ``[numerics]`` and ``[outputs]``.

See the README for the full schema.  Every problem found while reading a
document is collected and reported in one :class:`ConfigInvalid`.
"""
from __future__ import annotations

import copy
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

try:  # Python >= 3.11
    import tomllib
except ModuleNotFoundError:  # pragma: no cover - depends on interpreter
    import tomli as tomllib

from .errors import ConfigInvalid
from .model import (BAYESIAN, KALMAN_BUCY, ConstantPayoff, IndexLinearPayoff, ModelSpec,
                    PowerIndexPayoff, PowerRowVolatility, validate)

FILTER_NAMES = {"kalman": KALMAN_BUCY, "kalmanbucy": KALMAN_BUCY, "kalman-bucy": KALMAN_BUCY,
                "bayesian": BAYESIAN}
PAYOFF_KINDS = ("index_linear", "constant", "power_index")
FORMATS = ("csv", "json")

NUMERIC_DEFAULTS = {
    "ode_step": None,
    "mc_paths": 100000,
    "mc_dt": 2e-3,
    "seed": 0,
    "antithetic": True,
    "particle_lambda": None,
    "expansion_order": 3,
    "workers": 1,
    "w": [0.0, 0.5, 1.0, 1.5, 2.0],
    "betas": None,
    "hist_bins": 200,
    "reversion": True,
}


@dataclass(frozen=True)
class Numerics:
    ode_step: Optional[float] = None
    mc_paths: int = 100000
    mc_dt: float = 2e-3
    seed: int = 0
    antithetic: bool = True
    particle_lambda: Optional[float] = None
    expansion_order: int = 3
    workers: int = 1
    w: tuple = (0.0, 0.5, 1.0, 1.5, 2.0)
    betas: Optional[tuple] = None
    hist_bins: int = 200
    reversion: bool = True


@dataclass(frozen=True)
class Outputs:
    directory: str = "out"
    formats: tuple = ("csv",)


@dataclass(frozen=True)
class RunConfig:
    model: ModelSpec
    numerics: Numerics = field(default_factory=Numerics)
    outputs: Outputs = field(default_factory=Outputs)
    index_row: Optional[int] = None
    raw: dict = field(default_factory=dict, repr=False, compare=False)

    def with_beta(self, beta) -> ModelSpec:
        """Model with the power of the swept index row replaced by ``beta``."""
        if self.index_row is None:
            raise ConfigInvalid("model.volatility.index_row is required for a beta sweep")
        vol = self.model.volatility
        p = np.array(vol.powers)
        p[self.index_row] = float(beta)
        kind = "CEVIndex" if beta != 1.0 else vol.kind
        return self.model.replace(volatility=PowerRowVolatility(vol.vectors, p, kind=kind),
                                  name=f"{self.model.name}-beta{float(beta):g}")


def _get(tab, key, errs, where, required=True, default=None):
    if key in tab:
        return tab[key]
    if required:
        errs.append(f"{where}.{key} is required")
    return default


def _array(value, errs, where, ndim):
    try:
        a = np.array(value, dtype=float)
    except (TypeError, ValueError):
        errs.append(f"{where} must be a numeric array")
        return None
    if a.ndim != ndim:
        errs.append(f"{where} must be {'a vector' if ndim == 1 else 'a matrix'}")
        return None
    return a


def _model(tab, errs):
    where = "model"
    d = _get(tab, "d", errs, where)
    m = _get(tab, "m", errs, where)
    T = _get(tab, "T", errs, where)
    for name, v in (("d", d), ("m", m)):
        if v is not None and not (isinstance(v, int) and not isinstance(v, bool)):
            errs.append(f"model.{name} must be an integer")
    if T is not None and not (isinstance(T, (int, float)) and T > 0):
        errs.append("model.T must be positive")
    fk = str(tab.get("filter", "kalman")).lower()
    if fk not in FILTER_NAMES:
        errs.append(f"model.filter must be one of {sorted(set(FILTER_NAMES))}")
    arrays = {}
    for name, ndim in (("x0", 1), ("z0", 1), ("Sigma0", 2), ("mu", 1), ("F", 2), ("delta", 2)):
        needed = not (FILTER_NAMES.get(fk) == BAYESIAN and name in ("mu", "F", "delta"))
        v = _get(tab, name, errs, where, required=needed)
        arrays[name] = None if v is None else _array(v, errs, f"model.{name}", ndim)

    vt = _get(tab, "volatility", errs, where)
    vol, index_row = None, None
    if isinstance(vt, dict):
        vecs = _get(vt, "vectors", errs, "model.volatility")
        vecs = None if vecs is None else _array(vecs, errs, "model.volatility.vectors", 2)
        pw = vt.get("powers")
        if vecs is not None:
            pw = np.ones(len(vecs)) if pw is None else _array(pw, errs, "model.volatility.powers", 1)
            if pw is not None:
                if np.any(pw < 0):
                    errs.append("model.volatility.powers must be non-negative")
                try:
                    vol = PowerRowVolatility(vecs, pw, kind=str(vt.get("kind", "Composite")))
                except ValueError as exc:
                    errs.append(f"model.volatility: {exc}")
        index_row = vt.get("index_row")
    elif vt is not None:
        errs.append("model.volatility must be a table")

    pt = _get(tab, "payoff", errs, where)
    payoff = None
    if isinstance(pt, dict):
        kind = pt.get("kind", "index_linear")
        try:
            if kind == "index_linear":
                payoff = IndexLinearPayoff(int(_get(pt, "index", errs, "model.payoff")))
            elif kind == "constant":
                payoff = ConstantPayoff(float(pt.get("value", 0.0)))
            elif kind == "power_index":
                payoff = PowerIndexPayoff(int(_get(pt, "index", errs, "model.payoff")),
                                          int(pt.get("exponent", 2)), float(pt.get("scale", 1.0)))
            else:
                errs.append(f"model.payoff.kind must be one of {PAYOFF_KINDS}")
        except TypeError:
            errs.append("model.payoff is incomplete")
    elif pt is not None:
        errs.append("model.payoff must be a table")
    if errs:
        return None, None
    n = d + m
    if index_row is not None and not (isinstance(index_row, int) and 0 <= index_row < n):
        errs.append("model.volatility.index_row must be a row index")
    if FILTER_NAMES[fk] == BAYESIAN:
        for name, shape in (("mu", (n,)), ("F", (n, n)), ("delta", (n, n))):
            if arrays[name] is None:
                arrays[name] = np.zeros(shape)
    spec = ModelSpec(d=d, m=m, T=float(T), filter_kind=FILTER_NAMES[fk], volatility=vol,
                     payoff=payoff, name=str(tab.get("name", "model")), **arrays)
    if hasattr(payoff, "index") and not 0 <= payoff.index < n:
        errs.append("model.payoff.index out of range")
        return None, None
    errs += [f"model: {msg}" for msg in validate(spec)]
    return spec, index_row


def _numerics(tab, errs):
    unknown = set(tab) - set(NUMERIC_DEFAULTS)
    if unknown:
        errs.append(f"numerics: unknown keys {sorted(unknown)}")
    v = {**NUMERIC_DEFAULTS, **{k: tab[k] for k in tab if k in NUMERIC_DEFAULTS}}
    for key in ("ode_step", "mc_dt"):
        if key == "ode_step" and v[key] is None:
            continue
        if not (isinstance(v[key], (int, float)) and not isinstance(v[key], bool) and v[key] > 0):
            errs.append(f"numerics.{key} must be positive")
    for key in ("mc_paths", "workers", "hist_bins"):
        if not (isinstance(v[key], int) and not isinstance(v[key], bool) and v[key] > 0):
            errs.append(f"numerics.{key} must be a positive integer")
    if not (isinstance(v["seed"], int) and v["seed"] >= 0):
        errs.append("numerics.seed must be a non-negative integer")
    lam = v["particle_lambda"]
    if lam is not None and not (isinstance(lam, (int, float)) and lam > 0):
        errs.append("numerics.particle_lambda must be positive")
    o = v["expansion_order"]
    if not (isinstance(o, int) and 0 <= o <= 3):
        errs.append("numerics.expansion_order must be in 0..3")
    for key in ("antithetic", "reversion"):
        if not isinstance(v[key], bool):
            errs.append(f"numerics.{key} must be a boolean")
    try:
        w = tuple(float(x) for x in np.atleast_1d(v["w"]))
    except (TypeError, ValueError):
        errs.append("numerics.w must be a list of numbers")
        w = ()
    betas = v["betas"]
    if betas is not None:
        try:
            betas = tuple(float(b) for b in np.atleast_1d(betas))
            if any(not 0.0 <= b <= 1.0 for b in betas):
                errs.append("numerics.betas must lie in [0, 1]")
        except (TypeError, ValueError):
            errs.append("numerics.betas must be a list of numbers")
    if errs:
        return None
    return Numerics(ode_step=None if v["ode_step"] is None else float(v["ode_step"]), mc_paths=v["mc_paths"], mc_dt=float(v["mc_dt"]),
                    seed=v["seed"], antithetic=v["antithetic"],
                    particle_lambda=None if lam is None else float(lam),
                    expansion_order=o, workers=v["workers"], w=w, betas=betas,
                    hist_bins=v["hist_bins"], reversion=v["reversion"])


def _outputs(tab, errs):
    directory = str(tab.get("directory", "out"))
    formats = tuple(str(f).lower() for f in np.atleast_1d(tab.get("formats", ["csv"])))
    bad = [f for f in formats if f not in FORMATS]
    if bad:
        errs.append(f"outputs.formats: unsupported {bad}; choose from {FORMATS}")
    return Outputs(directory=directory, formats=formats)


def from_dict(doc: dict) -> RunConfig:
    """Build and validate a :class:`RunConfig` from a parsed document."""
    errs = []
    for sec in doc:
        if sec not in ("model", "numerics", "outputs"):
            errs.append(f"unknown section [{sec}]")
    if not isinstance(doc.get("model"), dict):
        raise ConfigInvalid("missing [model] section")
    model_errs = []
    spec, index_row = _model(doc["model"], model_errs)
    errs += model_errs
    num = _numerics(doc.get("numerics", {}), errs)
    out = _outputs(doc.get("outputs", {}), errs)
    if errs:
        raise ConfigInvalid("invalid configuration:\n  " + "\n  ".join(errs))
    return RunConfig(model=spec, numerics=num, outputs=out, index_row=index_row,
                     raw=copy.deepcopy(doc))


def set_path(doc: dict, dotted: str, value):
    """Assign ``value`` at ``section.key[.sub]`` inside a parsed document."""
    keys = dotted.split(".")
    cur = doc
    for k in keys[:-1]:
        cur = cur.setdefault(k, {})
        if not isinstance(cur, dict):
            raise ConfigInvalid(f"cannot set {dotted}: {k} is not a table")
    cur[keys[-1]] = value


def parse_value(text: str):
    """Parse a TOML literal (number, bool, array, quoted string); bare words stay strings."""
    try:
        return tomllib.loads(f"v = {text}")["v"]
    except tomllib.TOMLDecodeError:
        return text


def load_document(path) -> dict:
    try:
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    except OSError as exc:
        raise ConfigInvalid(f"cannot read config {path}: {exc}") from None
    except tomllib.TOMLDecodeError as exc:
        raise ConfigInvalid(f"malformed config {path}: {exc}") from None


def load_config(path, overrides=None) -> RunConfig:
    """Read ``path`` and apply ``{dotted.key: value}`` overrides before validation."""
    doc = load_document(path)
    for k, v in (overrides or {}).items():
        set_path(doc, k, v)
    return from_dict(doc)
