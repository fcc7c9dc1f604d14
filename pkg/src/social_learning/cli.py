"""Command-line experiment runner.

Verbs: ``run`` (trace CSV + summary JSON), ``sweep`` (one key over a grid,
long-format CSV), ``reproduce-paper`` (regenerates the reference numbers,
PASS/FAIL per item) and ``validate``. Exit codes: 0 success, 1 a reference
check failed, 2 invalid input, 3 no convergence.
"""

from __future__ import annotations

import argparse
import csv
import json
import math
import os
import sys
import time

import numpy as np

from . import __version__
from . import scenario as scn
from .dynamics import (
    best_response_step,
    clique_map_derivative,
    contraction_constant,
    covariance_step,
    kalman_oracle,
    network_penultimate_trajectory,
    penultimate_trajectory,
)
from .errors import ParameterError, SocialLearningError
from .estimation import fused_variance
from .model import CovarianceState, ModelParams, initial_state, uniform_clique_rule
from .montecarlo import SimulationConfig, simulate, unbiasedness_check
from .steady_state import (
    QUOTED_ALPHA_INF,
    QUOTED_ALPHA_N2,
    SteadyStateReport,
    best_response_steady_state,
    clique_fixed_variance,
    clique_fixed_variance_iterative,
    fixed_response_steady_state,
    large_n_limits,
    network_steady_state,
    optimal_clique_alpha,
    penultimate_steady_state,
    penultimate_steady_variance,
    steady_state_cubic_roots,
)

EXIT_OK, EXIT_CHECK, EXIT_INVALID, EXIT_NOT_CONVERGED = 0, 1, 2, 3
# above this n a fixed uniform clique uses the closed form instead of the dense iteration
DENSE_FIXED_N = 64
INT_KEYS = {"params.n", "horizon", "max_iters", "seed", "trajectories"}
SWEEPABLE = {"params.n", "params.sigma", "params.tau", "rule.alpha", "horizon", "tolerance",
             "max_iters", "seed", "trajectories"}


def _log(args, msg):
    if not args.quiet:
        print(msg)


def _header(sc):
    return f"# social-learning {__version__} seed={sc.seed} scenario={sc.name}\n"


def _num(x):
    return scn.fmt_float(x) if isinstance(x, float) else str(x)


def write_csv(path, comment, header, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(comment)
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow([_num(v) for v in row])


def write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True)
        fh.write("\n")


# --- computations ---------------------------------------------------------------------------


def trace_rows(sc):
    """Rows ``(t, beta, c_00, ..., c_(n-1)(n-1), max_offdiag)`` for ``t = 0..horizon``."""
    params, graph = sc.params(), sc.graph()
    state = initial_state(params)
    covs = [state.c]
    if sc.model == "penultimate":
        covs += [step.next.c for step in network_penultimate_trajectory(params, graph, sc.horizon)]
    else:
        rule = sc.rule()
        for _ in range(sc.horizon):
            state = covariance_step(state, rule, params) if rule is not None \
                else best_response_step(state, graph, params).next
            covs.append(state.c)
    rows = []
    for t, c in enumerate(covs):
        cs = CovarianceState(c, t, validate=False)
        rows.append([t, float(cs.beta), *(float(v) for v in np.diag(c)), float(cs.max_offdiag())])
    return rows


def _clique_fixed_report(sc, params):
    tau = float(params.tau[0])
    a, n = sc.alpha, sc.n
    c_ii = clique_fixed_variance(n, a, params.sigma, tau)
    check = clique_fixed_variance_iterative(n, a, params.sigma, tau)
    c_off = c_ii - a * a * tau * tau
    return SteadyStateReport(
        beta_star=c_off + a * a * tau * tau / n, c_star=None, c_diag=np.full(n, c_ii), iterations=0,
        rate_estimate=(1 - a) ** 2, method="closed-form", residual=abs(check - c_ii),
    )


def steady_report(sc):
    params, graph = sc.params(), sc.graph()
    complete = graph.is_complete
    if sc.model == "best" and complete:
        return best_response_steady_state(params, tol=sc.tolerance, max_iters=sc.max_iters)
    if sc.model == "penultimate" and complete:
        return penultimate_steady_state(params, tol=sc.tolerance, max_iters=sc.max_iters)
    if sc.model == "fixed":
        if sc.rule_kind == "uniform" and params.is_uniform and sc.n > DENSE_FIXED_N:
            return _clique_fixed_report(sc, params)
        return fixed_response_steady_state(sc.rule(), params, tol=sc.tolerance, max_iters=sc.max_iters)
    return network_steady_state(params, graph, sc.model, tol=sc.tolerance, max_iters=sc.max_iters)


def target_variance(params):
    """Per-agent ``sigma^2 tau_i^2 / (sigma^2 + tau_i^2)``."""
    return fused_variance(params.sigma2, params.tau2)


def comparison(sc):
    """Steady per-agent variances of all three dynamics on the scenario's graph."""
    params, graph = sc.params(), sc.graph()
    out = {"target_c_ii": [float(v) for v in np.atleast_1d(target_variance(params))]}
    for model in ("best", "penultimate"):
        rep = steady_report(scn.Scenario(**{**_fields(sc), "model": model, "rule_kind": None, "alpha": None,
                                            "rule_a": None, "rule_p": None}))
        out[model] = {"c_ii": [float(v) for v in rep.c_diag], "converged": rep.converged}
    if sc.model == "fixed":
        rep = steady_report(sc)
        out["fixed"] = {"c_ii": [float(v) for v in rep.c_diag], "converged": rep.converged}
    if graph.is_complete and params.is_uniform:
        alpha, c = optimal_clique_alpha(sc.n, params.sigma, float(params.tau[0]))
        out["best_uniform_fixed"] = {"alpha": alpha, "c_ii": c}
        out["best_minus_best_uniform_fixed"] = out["best"]["c_ii"][0] - c
    return out


def _fields(sc):
    return {f: getattr(sc, f) for f in sc.__dataclass_fields__}


def monte_carlo(sc):
    params, graph = sc.params(), sc.graph()
    cfg = SimulationConfig(params, graph, sc.model, rule=sc.rule(), horizon=sc.horizon,
                           trajectories=sc.trajectories, seed=sc.seed, noise=sc.noise)
    res = simulate(cfg)
    unb = unbiasedness_check(cfg)
    last = res.moments[-1]
    return {
        "trajectories": sc.trajectories,
        "rounds": len(res.rounds),
        "concordance_3se": res.concordance(3.0),
        "max_abs_z": float(np.max(np.abs(res.z_scores()))),
        "unbiased": unb.passed,
        "unbiased_max_abs_z": unb.max_abs_z,
        "final_empirical_c_ii": [float(v) for v in np.diag(last.cov_error)],
        "final_analytic_c_ii": [float(v) for v in np.diag(res.analytic[-1])],
    }


def _report_dict(rep):
    d = rep.summary()
    if len(d["c_ii"]) > 16:
        c = np.asarray(d.pop("c_ii"))
        d.update(c_ii_min=float(c.min()), c_ii_max=float(c.max()), c_ii_mean=float(c.mean()))
    return d


# --- verbs --------------------------------------------------------------------------------


def _load(args):
    sc = scn.load(args.scenario)
    for flag, key in (("seed", "seed"), ("tol", "tolerance"), ("max_iters", "max_iters")):
        val = getattr(args, flag, None)
        if val is not None:
            sc = sc.with_value(key, scn.fmt_float(val) if isinstance(val, float) else str(val))
    return sc


def cmd_validate(args):
    sc = _load(args)
    _log(args, f"ok: {sc.name} (n={sc.n}, model={sc.model})")
    return EXIT_OK


def cmd_run(args):
    sc = _load(args)
    os.makedirs(args.out, exist_ok=True)
    summary = {"scenario": sc.name, "seed": sc.seed, "version": __version__, "model": sc.model, "n": sc.n}
    code = EXIT_OK
    if "trace" in sc.outputs:
        rows = trace_rows(sc)
        header = ["t", "beta", *(f"c_ii_{i}" for i in range(sc.n)), "max_offdiag"]
        path = os.path.join(args.out, f"{sc.name}_trace.csv")
        write_csv(path, _header(sc), header, rows)
        summary["trace"] = {"file": os.path.basename(path), "final_beta": rows[-1][1]}
        _log(args, f"trace: {path} (beta({sc.horizon}) = {rows[-1][1]:.12g})")
    if "steady-state" in sc.outputs:
        rep = steady_report(sc)
        summary["steady_state"] = _report_dict(rep)
        _log(args, f"steady state: converged={rep.converged} beta*={rep.beta_star:.12g} "
                   f"max C_ii={float(np.max(rep.c_diag)):.12g} iterations={rep.iterations}")
        if not rep.converged:
            code = EXIT_NOT_CONVERGED
    if "comparison" in sc.outputs:
        summary["comparison"] = comparison(sc)
    if "monte-carlo" in sc.outputs:
        summary["monte_carlo"] = monte_carlo(sc)
        _log(args, f"monte carlo: concordance {summary['monte_carlo']['concordance_3se']:.3f}")
    path = os.path.join(args.out, f"{sc.name}_summary.json")
    write_json(path, summary)
    _log(args, f"summary: {path}")
    return code


def parse_grid(text):
    """``lo:hi:step`` inclusive of ``hi`` (up to rounding)."""
    try:
        lo, hi, step = (float(v) for v in text.split(":"))
    except ValueError:
        raise ParameterError(f"grid must be lo:hi:step, got {text!r}") from None
    if step <= 0 or hi < lo:
        raise ParameterError(f"grid needs step > 0 and hi >= lo, got {text!r}")
    count = int(math.floor((hi - lo) / step + 1e-9)) + 1
    return [float(np.round(lo + k * step, 12)) for k in range(count)]


def _grid_text(key, v):
    if key in INT_KEYS:
        if v != int(v):
            raise ParameterError(f"{key} needs integer grid values, got {v}")
        return str(int(v))
    return scn.fmt_float(v)


def cmd_sweep(args):
    sc = _load(args)
    key = args.param
    if key not in SWEEPABLE:
        raise ParameterError(f"cannot sweep {key!r}; sweepable keys: {', '.join(sorted(SWEEPABLE))}")
    if key == "params.n" and sc.graph_kind != "complete":
        raise ParameterError("params.n cannot be swept on a graph read from a file")
    values = parse_grid(args.grid) if args.grid else [float(v) for v in scn._split_list(args.values)]
    os.makedirs(args.out, exist_ok=True)
    rows = []
    code = EXIT_OK
    for v in values:
        point = sc.with_value(key, _grid_text(key, v))
        params = point.params()
        rep = steady_report(point)
        c = np.asarray(rep.c_diag)
        target = np.atleast_1d(target_variance(params))
        gap = float(np.max(c - target))
        bound = ""
        if point.model == "penultimate" and params.is_uniform and point.graph_kind == "complete":
            s, t2 = params.sigma2, float(params.tau2[0])
            bound = t2 ** 3 / (point.n * (s + t2) ** 2) if s > 0 else ""
        rows.append([_grid_text(key, v), point.n, float(rep.beta_star), float(c.mean()), float(c.min()),
                     float(c.max()), float(target.max()), gap, bound, rep.iterations, float(rep.residual),
                     int(rep.converged)])
        if not rep.converged:
            code = EXIT_NOT_CONVERGED
    header = ["value", "n", "beta_star", "c_ii_mean", "c_ii_min", "c_ii_max", "target", "gap", "gap_bound",
              "iterations", "residual", "converged"]
    path = os.path.join(args.out, f"{sc.name}_sweep.csv")
    write_csv(path, _header(sc).rstrip("\n") + f" param={key}\n", header, rows)
    if rows:
        best = min(rows, key=lambda r: r[5])
        _log(args, f"sweep: {path} ({len(rows)} points; min C_ii {best[5]:.12g} at {key}={best[0]})")
    return code


# --- reference numbers -------------------------------------------------------------------


def reference_checks():
    """``(item, achieved, expected, tol)`` for every reproduced number; booleans use tol None."""
    items = []
    unit2 = ModelParams.uniform(2, 1.0, 1.0)
    br = best_response_steady_state(unit2)
    items.append(("best-response n=2 C_ii", br.c_diag[0], 0.58578, 1e-4))
    items.append(("best-response n=2 C_ii exact 2-sqrt2", br.c_diag[0], 2 - math.sqrt(2), 1e-9))
    items.append(("best-response n=2 beta* = sqrt2-1", br.beta_star, math.sqrt(2) - 1, 1e-9))
    cub = steady_state_cubic_roots(unit2, br.beta_star)
    items.append(("cubic positive root n=2", cub.positive_root, math.sqrt(2) - 1, 1e-9))
    fr = fixed_response_steady_state(
        uniform_clique_rule(unit2, QUOTED_ALPHA_N2), unit2, tol=1e-14)
    items.append((f"fixed uniform n=2 alpha={QUOTED_ALPHA_N2} C_ii", fr.c_diag[0], 0.58472, 1e-5))
    items.append(("fixed uniform n=2 beats best response", bool(fr.c_diag[0] < br.c_diag[0]), True, None))
    lim = large_n_limits(numeric_ns=(10 ** 6,))
    items.append(("best-response limit C_ii", lim.c_best_limit, 0.55496, 5e-6))
    items.append(("best-response limit beta closed form", lim.beta_limit, lim.beta_closed_form, 1e-12))
    items.append((f"fixed uniform limit alpha={QUOTED_ALPHA_INF} C_ii", lim.c_fixed_limit, 0.55017, 5e-6))
    items.append(("best-response n=1e6 vs limit", lim.numeric_best[10 ** 6], lim.c_best_limit, 1e-5))
    items.append(("fixed uniform n=1e6 vs limit", lim.numeric_fixed[10 ** 6], lim.c_fixed_limit, 1e-5))
    for n in (2, 4, 8):
        p = ModelParams.uniform(n, 1.0, 1.0)
        pen = penultimate_trajectory(p, 8)
        oracle = kalman_oracle(p, t=8)
        items.append((f"penultimate perfect n={n} t=8 |Var - oracle|", float(np.max(np.abs(pen - oracle))), 0.0,
                      1e-10))
    for n in (2, 4, 8):
        p = ModelParams.uniform(n, 1.0, 1.0)
        items.append((f"penultimate steady n={n} vs oracle fixed point",
                      float(fused_variance(penultimate_steady_variance(p) + 1.0, 1.0)),
                      float(kalman_oracle(p, t=25)[-1, 0]), 1e-10))
    betas = np.linspace(0.0, 100.0, 2001)
    for n, tau in ((2, 1.0), (5, 0.5), (20, 2.0), (50, 1.0)):
        p = ModelParams.uniform(n, 1.0, tau)
        bound = contraction_constant(p)
        worst = float(np.max(np.abs(clique_map_derivative(betas, p))))
        items.append((f"contraction n={n} tau={tau} sup|f'| <= bound", bool(worst <= bound + 1e-6), True, None))
        rate = best_response_steady_state(p).rate_estimate
        items.append((f"contraction n={n} tau={tau} observed rate <= bound", bool(rate <= bound + 1e-6), True, None))
    return items


def cmd_reproduce(args):
    t0 = time.perf_counter()
    items = reference_checks()
    rows = []
    failed = 0
    for name, got, want, tol in items:
        ok = got == want if tol is None else abs(float(got) - float(want)) <= tol
        failed += not ok
        rows.append(["PASS" if ok else "FAIL", name, got, want, "" if tol is None else tol])
        _log(args, f"{'PASS' if ok else 'FAIL'}  {name}: achieved {got} expected {want}"
                   + ("" if tol is None else f" tol {tol:g}"))
    note = steady_state_cubic_roots(ModelParams.uniform(2, 1.0, 1.0)).discrepancy_report()
    if note:
        _log(args, f"note (n=2, sigma=tau=1): {note}")
    _log(args, f"{len(items) - failed}/{len(items)} passed in {time.perf_counter() - t0:.2f} s")
    if args.out:
        os.makedirs(args.out, exist_ok=True)
        write_csv(os.path.join(args.out, "reference_checks.csv"),
                  f"# social-learning {__version__} reference checks\n",
                  ["status", "item", "achieved", "expected", "tol"],
                  [[s, n, _cell(g), _cell(w), t] for s, n, g, w, t in rows])
    return EXIT_CHECK if failed else EXIT_OK


def _cell(v):
    return str(v) if isinstance(v, (bool, np.bool_)) else float(v)


# --- entry point ---------------------------------------------------------------------------


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", default=".", help="output directory (default: current)")
    common.add_argument("--seed", type=int, help="override the scenario seed")
    common.add_argument("--tol", type=float, help="override the convergence tolerance")
    common.add_argument("--max-iters", dest="max_iters", type=int, help="override the iteration cap")
    common.add_argument("--quiet", action="store_true", help="suppress progress output")

    parser = argparse.ArgumentParser(prog="social-learning", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="verb", required=True)

    p = sub.add_parser("run", parents=[common], help="run a scenario")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("sweep", parents=[common], help="sweep one scenario key over a grid")
    p.add_argument("scenario")
    p.add_argument("--param", required=True, help="dotted key, e.g. rule.alpha or params.n")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--grid", help="lo:hi:step, inclusive")
    g.add_argument("--values", help="comma-separated values")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("reproduce-paper", parents=[common], help="regenerate and check the reference numbers")
    p.set_defaults(func=cmd_reproduce, out=None)

    p = sub.add_parser("validate", parents=[common], help="parse and validate a scenario")
    p.add_argument("scenario")
    p.set_defaults(func=cmd_validate)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SocialLearningError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
