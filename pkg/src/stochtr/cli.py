"""Command-line driver.

    stochtr run --problem quadratic --dim 5 --sigma 0.1 --sigma-g 0.1 \\
        --epsilon 0.1 --epsilon 0.01 --reps 20 --out results/
    stochtr renewal --p 0.75 --steps 1000000
    stochtr validate --out results/
    stochtr constants --cond 10

Exit codes: 0 all enabled validations passed, 1 a validation failed,
2 configuration error, 3 I/O error.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys

import numpy as np

from . import harness
from .errors import ConfigurationError, DomainError, StochTRError
from .renewal import (
    DriftSpec, StopRule, WalkConfig, interarrival_experiment, replicate_stop_times,
    theoretical_stop_bound,
)
from .trust_region import PotentialSpec, StormConfig, drift_constants

log = logging.getLogger("stochtr")

# flag dest -> (section, field) in the plan
_STORM_KEYS = {"gamma": "gamma", "eta1": "eta1", "eta2": "eta2", "delta0": "delta0",
               "delta_max": "delta_max", "kappa_ef": "kappa_ef", "kappa_eg": "kappa_eg",
               "kappa_bhm": "kappa_bhm", "kappa_fcd": "kappa_fcd", "eps_f": "eps_F",
               "max_iters": "max_iters"}
_PROBLEM_KEYS = {"problem": "name", "dim": "dim", "cond": "cond", "sigma": "sigma",
                 "sigma_g": "sigma_g", "n_samples": "n_samples", "subsample": "subsample_size",
                 "budget_cap": "budget_cap"}
DEFAULT_BETA = 1 - 1e-7
DEFAULT_ALPHA = 0.9


def _add_problem_args(p):
    g = p.add_argument_group("problem")
    g.add_argument("--problem", default="quadratic", choices=("quadratic", "rosenbrock", "logistic"))
    g.add_argument("--dim", type=int, default=2)
    g.add_argument("--cond", type=float, default=10.0)
    g.add_argument("--sigma", type=float, default=0.0)
    g.add_argument("--sigma-g", type=float, default=0.0)
    g.add_argument("--n-samples", type=int, default=200, help="logistic rows")
    g.add_argument("--subsample", type=int, default=20, help="logistic minibatch size")
    g.add_argument("--budget-cap", type=int, default=None, help="max draws per oracle query")


def _add_storm_args(p):
    g = p.add_argument_group("algorithm")
    for flag in ("gamma", "eta1", "eta2", "delta0", "delta-max", "kappa-ef", "kappa-eg",
                 "kappa-bhm", "kappa-fcd", "eps-f"):
        g.add_argument(f"--{flag}", type=float, default=None)
    g.add_argument("--max-iters", type=int, default=None)
    g.add_argument("--alpha", type=float, default=None,
                   help="model accuracy probability (default: 1 if noiseless)")
    g.add_argument("--beta", type=float, default=None,
                   help="estimate accuracy probability (default: 1 if noiseless)")
    g.add_argument("--rule", choices=("chebyshev", "subgaussian"), default="chebyshev")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochtr", description=__doc__.split("\n")[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a replicated experiment plan")
    run.add_argument("--config", help="flat key=value file; flags override its values")
    _add_problem_args(run)
    _add_storm_args(run)
    run.add_argument("--epsilon", type=float, action="append", default=None)
    run.add_argument("--reps", type=int, default=1)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--nu", type=float, default=None, help="extra potential weight for the bound")
    run.add_argument("--failure-prob", type=float, default=0.0, help="query corruption probability")
    run.add_argument("--corruption-shift", type=float, default=1e6)
    run.add_argument("--workers", type=int, default=1)
    run.add_argument("--trace", action="store_true", help="write traces.csv")
    run.add_argument("--timing", action="store_true", help="record wall_ns (breaks byte identity)")
    run.add_argument("--no-instrument", action="store_true", help="skip accuracy-event classification")
    run.add_argument("--out", default=None, metavar="DIR")

    ren = sub.add_parser("renewal", help="renewal-process validations only")
    ren.add_argument("--p", type=float, action="append", default=None)
    ren.add_argument("--steps", type=int, default=1_000_000)
    ren.add_argument("--gamma", type=float, default=2.0)
    ren.add_argument("--levels", type=int, default=2, help="grid levels above the threshold")
    ren.add_argument("--stop-reps", type=int, default=0,
                     help="also check the stopping-time bound with this many replications")
    ren.add_argument("--seed", type=int, default=0)

    val = sub.add_parser("validate", help="recompute the summary from an existing run")
    val.add_argument("--out", required=True, metavar="DIR")

    con = sub.add_parser("constants", help="print drift constants for a configuration")
    _add_problem_args(con)
    _add_storm_args(con)
    return ap


def _parse_value(action, raw: str):
    if action.nargs == 0:
        return raw.strip().lower() in ("1", "true", "yes", "on")
    if isinstance(action, argparse._AppendAction):
        return [action.type(x) for x in raw.replace(",", " ").split()]
    return action.type(raw) if action.type else raw


def load_config(path: str, parser: argparse.ArgumentParser) -> dict:
    """Read ``key = value`` lines; keys may be dotted (``problem.sigma``) or dashed."""
    actions = {a.dest: a for a in parser._actions}
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigurationError(f"{path}:{n}: expected key = value")
            key, raw = (s.strip() for s in line.split("=", 1))
            key = key.replace("-", "_")
            if key == "problem.name":
                key = "problem"
            key = key.rsplit(".", 1)[-1]
            key = {"eps_F": "eps_f", "replications": "reps", "master_seed": "seed",
                   "epsilon_grid": "epsilon", "subsample_size": "subsample"}.get(key, key)
            if key in ("sigma2", "sigma_g2"):
                # variances given directly
                key, raw = key[:-1], repr(math.sqrt(float(raw)))
            if key not in actions or key in ("config", "help"):
                raise ConfigurationError(f"{path}:{n}: unknown key {key!r}")
            # appended flags would add to a list default instead of replacing it
            dest = "epsilon_file" if key == "epsilon" else key
            out[dest] = _parse_value(actions[key], raw)
    return out


def _storm_config(args) -> StormConfig:
    kw = {field: getattr(args, dest) for dest, field in _STORM_KEYS.items()
          if getattr(args, dest, None) is not None}
    return StormConfig(**kw)


def _problem_config(args) -> harness.ProblemConfig:
    kw = {field: getattr(args, dest) for dest, field in _PROBLEM_KEYS.items()}
    return harness.ProblemConfig(**kw)


def _probabilities(args, problem, storm):
    noisy = problem.sigma > 0 or problem.sigma_g > 0 or (
        problem.name == "logistic" and problem.subsample_size < problem.n_samples)
    alpha = args.alpha if args.alpha is not None else (DEFAULT_ALPHA if noisy else 1.0)
    beta = args.beta if args.beta is not None else (DEFAULT_BETA if noisy else 1.0)
    return alpha, beta


def plan_from_args(args) -> harness.ExperimentPlan:
    problem = _problem_config(args)
    storm = _storm_config(args)
    alpha, beta = _probabilities(args, problem, storm)
    grid = args.epsilon or getattr(args, "epsilon_file", None) or (1e-1, 1e-2, 1e-3)
    grid = tuple(sorted(set(grid), reverse=True))
    return harness.ExperimentPlan(
        problem=problem, storm=storm, alpha=alpha, beta=beta, rule=args.rule,
        epsilon_grid=grid, replications=args.reps, master_seed=args.seed,
        output_path=args.out, trace=args.trace, instrument=not args.no_instrument,
        nu=args.nu, failure_prob=args.failure_prob, corruption_shift=args.corruption_shift,
        workers=args.workers, record_timing=args.timing,
    )


def print_summary(s: harness.SummaryStats, out=None):
    out = sys.stdout if out is None else out
    print(f"{'epsilon':>10} {'n':>4} {'timeouts':>8} {'mean T':>10} {'median':>8} {'se':>8}", file=out)
    for d in s.per_eps:
        flag = " (censored: lower bound)" if d["censored"] else ""
        print(f"{d['epsilon']:>10.3g} {d['n']:>4d} {d['timeouts']:>8d} {d['mean']:>10.3f} "
              f"{d['median']:>8.1f} {d['se']:>8.3f}{flag}", file=out)
    if s.slope is None:
        print("slope: not reported (fewer than 3 well-completed epsilon values)", file=out)
    else:
        print(f"slope of log mean T vs log eps: {s.slope:.3f} +- {s.slope_se:.3f}", file=out)
    for d in s.bound_report:
        print(f"bound at eps={d['epsilon']:.3g}: {d['bound']:.4g}"
              f"{' EXCEEDED' if d['exceeded'] else ''}", file=out)
    if s.drift_table:
        bad = sum(not d["passed"] for d in s.drift_table)
        print(f"drift bins: {len(s.drift_table)} checked, {bad} failed", file=out)
    if s.interarrival:
        ia = s.interarrival
        print(f"interarrival: mean {ia['mean']:.4f} (se {ia['se']:.4f}, n {ia['n']}) "
              f"bound {ia['bound']:.4f}", file=out)
    if s.guarantees is not None:
        print(f"guarantee checks: {s.guarantees}", file=out)
    for k, v in s.validations.items():
        print(f"validation {k}: {'skipped' if v is None else ('PASS' if v else 'FAIL')}", file=out)


def cmd_run(args) -> int:
    plan = plan_from_args(args)
    s = harness.run_plan(plan)
    print_summary(s)
    return harness.EXIT_OK if s.passed else harness.EXIT_FAILED


def cmd_validate(args) -> int:
    _, s = harness.revalidate(args.out)
    print_summary(s)
    return harness.EXIT_OK if s.passed else harness.EXIT_FAILED


# Synthetic (Phi, Delta) configurations that satisfy the drift assumption by construction.
STOP_CASES = (
    ("two-point, h=d^2", 0.75, dict(theta=1.0, phi0=20.0), "two_point"),
    ("deterministic, h=d^2", 0.8, dict(theta=0.5, phi0=10.0), "deterministic"),
    ("two-point, h=d", 0.9, dict(theta=0.25, phi0=5.0), "two_point_linear"),
)


def stop_time_cases(gamma=2.0, delta_eps=1.0, levels=2, seed=0):
    from .renewal import DeterministicIncrements, TwoPointIncrements

    for name, p, kw, kind in STOP_CASES:
        h = (lambda d: d) if kind == "two_point_linear" else (lambda d: d * d)
        inc = DeterministicIncrements() if kind == "deterministic" else TwoPointIncrements()
        cfg = WalkConfig.from_gamma(p, gamma, delta_eps, i0=levels, imax=levels, seed=seed)
        yield name, cfg, DriftSpec(kw["theta"], h, kw["phi0"]), inc


def cmd_renewal(args) -> int:
    ok = True
    for p in args.p or (0.6, 0.75, 0.9):
        cfg = WalkConfig.from_gamma(p, args.gamma, 1.0, i0=0, imax=args.levels)
        st = interarrival_experiment(cfg, args.steps, np.random.default_rng(args.seed))
        ok &= st.passed
        print(f"p={p}: mean tau {st.mean:.5f} se {st.stderr:.5f} bound {st.bound:.5f} "
              f"n {st.count} {'PASS' if st.passed else 'FAIL'}")
    if args.stop_reps > 0:
        for name, cfg, drift, inc in stop_time_cases(args.gamma, seed=args.seed):
            T = replicate_stop_times(cfg, drift, args.stop_reps, StopRule(0.0), inc)
            done = T[T >= 0]
            mean = done.mean()
            se = done.std(ddof=1) / math.sqrt(done.size)
            bound = theoretical_stop_bound(cfg.p, drift, cfg.delta_eps, cfg.delta0)
            passed = bool(mean <= bound + 3 * se and done.size == T.size)
            ok &= passed
            print(f"stop time [{name}]: mean {mean:.3f} se {se:.3f} bound {bound:.3f} "
                  f"timeouts {T.size - done.size} {'PASS' if passed else 'FAIL'}")
    return harness.EXIT_OK if ok else harness.EXIT_FAILED


def cmd_constants(args) -> int:
    problem = _problem_config(args).build()
    storm = _storm_config(args)
    dc = drift_constants(storm, problem.lipschitz_L)
    pot = PotentialSpec.default(storm)
    for k, v in vars(dc).items():
        print(f"{k} = {v!r}")
    print(f"nu_default = {pot.nu!r}")
    print(f"eps_F = {storm.eps_F!r}")
    for msg in pot.violations(storm, dc.C1):
        print(f"potential violation: {msg}")
    alpha, beta = _probabilities(args, _problem_config(args), storm)
    feasible = dc.alpha_beta_ok(alpha, beta)
    print(f"alpha = {alpha!r}, beta = {beta!r}: {'feasible' if feasible else 'infeasible'}")
    if beta < 1:
        print(f"alpha_min(beta) = {dc.alpha_min(beta)!r}")
    return harness.EXIT_OK if feasible else harness.EXIT_FAILED


COMMANDS = {"run": cmd_run, "renewal": cmd_renewal, "validate": cmd_validate,
            "constants": cmd_constants}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if getattr(args, "config", None):
            sub = parser._subparsers._group_actions[0].choices[args.command]
            sub.set_defaults(**load_config(args.config, sub))
            args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except (ConfigurationError, DomainError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return harness.EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return harness.EXIT_IO
    except StochTRError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return harness.EXIT_FAILED


if __name__ == "__main__":
    sys.exit(main())
