"""Command-line front end.

    mvhedge solve   CONFIG   coefficient tables and a value summary
    mvhedge hedge   CONFIG   predicted vs simulated hedging error per initial capital
    mvhedge hist    CONFIG   histograms of H - W_T per capital (and per beta)
    mvhedge table1  CONFIG   expansion orders 0..3 of V1 and V0 per beta
    mvhedge check   CONFIG   Monte Carlo self-consistency checks

Flags override the matching config fields; ``--set section.key=value``
reaches any other field.  Exit codes: 0 success, 1 failed check or other
library error, 2 invalid configuration, 3 Riccati blow-up, 4 non-finite
simulation state.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time

import numpy as np

from . import __version__
from .coeffs import eval_A, eval_P, eval_V1_solvable, eval_V2, solve_coefficients
from .config import load_config, parse_value
from .errors import ConfigInvalid, MVHedgeError
from .expand import ExpansionContext, ExpansionProvider, expansion_v0, v1_terms
from .mc import (ClosedFormProvider, estimate_V0_particle, estimate_V0_solvable,
                 estimate_Z1_delta, estimate_Z1_flows, girsanov_check, physical_run,
                 replay_wealth, simulate)
from .mc.paths import FORWARD, mean_se, pair_units
from .mc.wealth import histogram

HEDGE_COLUMNS = ["w", "predicted", "predicted_se", "simulated", "simulated_se", "difference",
                 "z_score", "V2_0", "V1_0", "V0_0"]
MARTINGALE_COLUMNS = ["w", "t", "mean_minus_terminal", "se"]
HIST_COLUMNS = ["bin_left", "bin_right", "count"]
HIST_SUMMARY_COLUMNS = ["beta", "w", "mean", "variance", "mse", "mse_se", "file"]
TABLE1_COLUMNS = ["beta", "order", "V1", "V0", "V0_se", "V2_0", "V1_exact"]
CHECK_COLUMNS = ["check", "estimate_a", "se_a", "estimate_b", "se_b", "z_score", "passed"]
SUMMARY_COLUMNS = ["quantity", "value"]


def _fmt(v):
    if v is None or (isinstance(v, float) and np.isnan(v)):
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(bool(v)).lower()
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_csv(path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])
    return path


def write_json(path, obj):
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return path


def _tag(v):
    return f"{float(v):g}".replace("-", "m")


class Run:
    """Resolved configuration plus shared helpers for one command."""

    def __init__(self, cfg, log=None):
        self.cfg = cfg
        self.num = cfg.numerics
        self.out = cfg.outputs.directory
        self.log = log or (lambda msg: print(msg, file=sys.stderr))
        os.makedirs(self.out, exist_ok=True)

    def path(self, name):
        return os.path.join(self.out, name)

    def wants(self, fmt):
        return fmt in self.cfg.outputs.formats

    def coeffs(self, spec):
        return solve_coefficients(spec, self.num.ode_step)

    def provider(self, spec, coeffs, order=None):
        """Closed form on solvable models, otherwise the expansion at ``order``."""
        if coeffs.solvable:
            return ClosedFormProvider(coeffs), "closed-form"
        order = self.num.expansion_order if order is None else order
        ctx = ExpansionContext(spec, coeffs, reversion=self.num.reversion)
        return ExpansionProvider(ctx, order), f"expansion-{order}"

    def betas(self):
        if self.num.betas is None:
            return [None]
        return list(self.num.betas)

    def spec_for(self, beta):
        return self.cfg.model if beta is None else self.cfg.with_beta(beta)


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_solve(run: Run):
    spec = run.cfg.model
    t0 = time.perf_counter()
    c = run.coeffs(spec)
    elapsed = time.perf_counter() - t0
    z0, x0 = spec.z0, spec.x0
    V2 = float(eval_V2(c, 0.0, z0))
    A = float(eval_A(c, 0.0, z0))
    summary = [("T", spec.T), ("grid_points", len(c.grid)), ("V2_0", V2), ("A_0", A)]
    if c.solvable:
        y0 = float(x0[c.index])
        P = float(eval_P(c, 0.0, z0))
        V1 = float(eval_V1_solvable(c, 0.0, y0, z0))
        summary += [("P_0", P), ("AP_0", A * P * y0), ("V1_0", V1), ("V1_source", "closed-form"),
                    ("w_star", V1 / V2), ("w_star_AP", A * P * y0 / V2)]
    else:
        ctx = ExpansionContext(spec, c, reversion=run.num.reversion)
        V1 = float(sum(v1_terms(ctx, 0.0, x0, z0, run.num.expansion_order)))
        summary += [("V1_0", V1), ("V1_source", f"expansion-{run.num.expansion_order}"),
                    ("w_star", V1 / V2)]
    summary.append(("solve_seconds", round(elapsed, 3)))
    c.to_csv(run.path("coefficients.csv"))
    write_csv(run.path("summary.csv"), SUMMARY_COLUMNS, summary)
    if run.wants("json"):
        write_json(run.path("summary.json"), {k: v for k, v in summary if k != "solve_seconds"})
    for k, v in summary:
        print(f"{k:>14s}  {_fmt(v)}")
    return 0


def cmd_hedge(run: Run):
    spec = run.cfg.model
    num = run.num
    c = run.coeffs(spec)
    prov, source = run.provider(spec, c)
    run.log(f"hedge: {len(num.w)} capitals, {num.mc_paths} paths, provider {source}")
    reps = replay_wealth(spec, c, prov, list(num.w), n_paths=num.mc_paths, dt=num.mc_dt,
                         seed=num.seed, antithetic=num.antithetic, workers=num.workers,
                         bins=num.hist_bins)
    rows, mrows = [], []
    for r in reps:
        diff = r.predicted - r.mse
        se = r.V0_se + r.mse_se
        rows.append([r.w, r.predicted, r.V0_se, r.mse, r.mse_se, diff,
                     abs(diff) / se if se > 0 else 0.0, r.V2_0, r.V1_0, r.V0_0])
        for t, m, s in zip(r.checkpoint_times, r.martingale_means, r.martingale_se):
            mrows.append([r.w, t, m, s])
    write_csv(run.path("hedge.csv"), HEDGE_COLUMNS, rows)
    write_csv(run.path("martingale.csv"), MARTINGALE_COLUMNS, mrows)
    if run.wants("json"):
        write_json(run.path("hedge.json"), [r.to_dict() for r in reps])
    for row in rows:
        print("w={:<6g} predicted={:.5f}  simulated={:.5f} +- {:.5f}".format(row[0], row[1], row[3], row[4]))
    return 0


def cmd_hist(run: Run):
    num = run.num
    summary = []
    for beta in run.betas():
        spec = run.spec_for(beta)
        c = run.coeffs(spec)
        prov, source = run.provider(spec, c)
        btag = "model" if beta is None else _tag(beta)
        run.log(f"hist: beta={btag}, provider {source}")
        res = physical_run(spec, c, prov, np.asarray(num.w), num.mc_paths, num.mc_dt, num.seed,
                           num.antithetic, num.workers)
        for j, w in enumerate(num.w):
            err = res["H"] - res["W"][:, j]
            edges, counts = histogram(err, num.hist_bins)
            name = f"hist_beta{btag}_w{_tag(w)}.csv"
            write_csv(run.path(name), HIST_COLUMNS,
                      [[edges[i], edges[i + 1], int(counts[i])] for i in range(len(counts))])
            mse, mse_se = mean_se(pair_units(err ** 2, num.antithetic))
            summary.append([beta, w, float(err.mean()), float(err.var(ddof=1)), float(mse),
                            float(mse_se), name])
    write_csv(run.path("hist_summary.csv"), HIST_SUMMARY_COLUMNS, summary)
    for r in summary:
        print(f"beta={_fmt(r[0]) or 'model':<6s} w={r[1]:<6g} variance={r[3]:.5f}  -> {r[6]}")
    return 0


def cmd_table1(run: Run, with_v0=True):
    num = run.num
    rows = []
    for beta in run.betas():
        spec = run.spec_for(beta)
        c = run.coeffs(spec)
        x0, z0 = spec.x0, spec.z0
        ctx = ExpansionContext(spec, c, reversion=num.reversion)
        terms = v1_terms(ctx, 0.0, x0, z0, 3)
        V2 = float(eval_V2(c, 0.0, z0))
        exact = float(eval_V1_solvable(c, 0.0, float(x0[c.index]), z0)) if c.solvable else None
        cum = 0.0
        for k in range(4):
            cum += float(terms[k])
            v0 = se = None
            if with_v0:
                run.log(f"table1: beta={beta}, order {k}")
                v0, se = expansion_v0(spec, c, ctx, k, num.mc_paths, num.mc_dt, num.seed,
                                      num.antithetic, num.workers)
            rows.append([beta if beta is not None else float(spec.volatility.powers[c.index]
                                                           if c.index is not None else np.nan),
                         k, cum, v0, se, V2, exact])
    write_csv(run.path("table1.csv"), TABLE1_COLUMNS, rows)
    for r in rows:
        print("beta={:<5g} order={}  V1={:.5f}  V0={}".format(
            r[0], r[1], r[2], "-" if r[3] is None else f"{r[3]:.4f} +- {r[4]:.4f}"))
    return 0


def cmd_check(run: Run, k_se=3.0):
    spec = run.cfg.model
    num = run.num
    c = run.coeffs(spec)
    n = min(num.mc_paths, 20000)
    rows = []

    def add(name, a, sa, b, sb):
        z = abs(a - b) / np.hypot(sa, sb) if np.hypot(sa, sb) > 0 else 0.0
        rows.append([name, a, sa, b, sb, z, bool(z <= k_se)])

    run.log("check: Girsanov consistency")
    g = girsanov_check(spec, c, n_paths=n, dt=num.mc_dt, seed=num.seed, workers=num.workers)
    add("girsanov", g.physical, g.physical_se, g.reweighted, g.reweighted_se)
    add("density_mean", g.density_mean, g.density_se, 1.0, 0.0)

    run.log("check: flows vs finite differences")
    ens = simulate(spec, c, FORWARD, n, num.mc_dt, num.seed, with_flows=True,
                   antithetic=num.antithetic, workers=num.workers, track_density=False)
    fm, fs = estimate_Z1_flows(ens, c, spec.payoff)
    dm, ds = estimate_Z1_delta(spec, c, n_paths=max(n // 4, 1000), dt=num.mc_dt,
                               seed=num.seed + 1, antithetic=num.antithetic, workers=num.workers)
    for i in range(spec.n):
        add(f"zeta1_{i}", float(fm[i]), float(fs[i]), float(dm[i]), float(ds[i]))

    run.log("check: particle V0 vs physical route")
    pm, ps = estimate_V0_particle(spec, c, lam=num.particle_lambda, n_paths=n, dt=num.mc_dt,
                                  seed=num.seed + 2, antithetic=num.antithetic,
                                  workers=num.workers)
    if c.solvable:
        qm, qs = estimate_V0_solvable(spec, c, n, num.mc_dt, num.seed + 3, num.antithetic,
                                      num.workers)
        add("V0_particle_vs_closed_form", pm, ps, qm, qs)
    else:
        rows.append(["V0_particle", pm, ps, None, None, None, None])
    write_csv(run.path("check.csv"), CHECK_COLUMNS, rows)
    failed = [r[0] for r in rows if r[6] is False]
    for r in rows:
        status = "-" if r[6] is None else ("PASS" if r[6] else "FAIL")
        print(f"{status:4s}  {r[0]}")
    return 1 if failed else 0


# --------------------------------------------------------------------------
# argument handling
# --------------------------------------------------------------------------

FLAG_FIELDS = {
    "seed": "numerics.seed", "paths": "numerics.mc_paths", "dt": "numerics.mc_dt",
    "ode_step": "numerics.ode_step", "order": "numerics.expansion_order",
    "workers": "numerics.workers", "lam": "numerics.particle_lambda",
    "bins": "numerics.hist_bins", "out": "outputs.directory", "T": "model.T",
}


def build_parser():
    p = argparse.ArgumentParser(prog="mvhedge", description="Mean-variance hedging under partial "
                                "observation: ODE coefficients, Monte Carlo and expansions.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)
    helps = {"solve": "solve the Riccati chain and summarize V2, A, V1",
             "hedge": "simulate the optimal wealth and compare with the predicted error",
             "hist": "histograms of the terminal hedging error",
             "table1": "expansion orders 0..3 of V1 and V0",
             "check": "Monte Carlo self-consistency checks"}
    for name, text in helps.items():
        s = sub.add_parser(name, help=text)
        s.add_argument("config", help="TOML run configuration")
        s.add_argument("--seed", type=int)
        s.add_argument("--paths", type=int, help="base paths (antithetic lanes double this)")
        s.add_argument("--dt", type=float, help="Monte Carlo time step")
        s.add_argument("--ode-step", dest="ode_step", type=float)
        s.add_argument("--order", type=int, help="expansion order 0..3")
        s.add_argument("--workers", type=int)
        s.add_argument("--lambda", dest="lam", type=float, help="particle interaction intensity")
        s.add_argument("--bins", type=int)
        s.add_argument("--T", type=float, help="horizon")
        s.add_argument("--out", help="output directory")
        s.add_argument("--w", type=float, nargs="+", help="initial capitals")
        s.add_argument("--betas", type=float, nargs="+", help="index-row exponents to sweep")
        s.add_argument("--antithetic", dest="antithetic", action="store_true", default=None)
        s.add_argument("--no-antithetic", dest="antithetic", action="store_false")
        s.add_argument("--reversion", dest="reversion", action="store_true", default=None)
        s.add_argument("--no-reversion", dest="reversion", action="store_false")
        s.add_argument("--set", dest="sets", action="append", default=[], metavar="KEY=VALUE",
                       help="override any config field, e.g. model.z0=[0,0,0]")
        if name == "table1":
            s.add_argument("--no-v0", dest="with_v0", action="store_false",
                           help="skip the Monte Carlo V0 column")
    return p


def overrides_from(args):
    ov = {}
    for item in args.sets:
        if "=" not in item:
            raise ConfigInvalid(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        ov[k.strip()] = parse_value(v.strip())
    for attr, key in FLAG_FIELDS.items():
        v = getattr(args, attr, None)
        if v is not None:
            ov[key] = v
    if args.w is not None:
        ov["numerics.w"] = list(args.w)
    if args.betas is not None:
        ov["numerics.betas"] = list(args.betas)
    if args.antithetic is not None:
        ov["numerics.antithetic"] = args.antithetic
    if args.reversion is not None:
        ov["numerics.reversion"] = args.reversion
    return ov


COMMANDS = {"solve": cmd_solve, "hedge": cmd_hedge, "hist": cmd_hist, "table1": cmd_table1,
            "check": cmd_check}


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, overrides_from(args))
        run = Run(cfg)
        if args.command == "table1":
            return cmd_table1(run, with_v0=args.with_v0)
        return COMMANDS[args.command](run)
    except MVHedgeError as exc:
        print(f"mvhedge: error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
