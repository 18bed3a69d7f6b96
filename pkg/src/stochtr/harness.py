"""Replicated STORM experiments over an epsilon grid, with CSV output and validations.

Every (epsilon, replication) cell is independent and seeded from
``(master_seed, epsilon index, replication)``, so results do not depend on the
worker count. Rows are written in sorted cell order after all cells finish.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
from scipy import stats

from .errors import ConfigurationError, DomainError
from .oracles import AccuracyTargets, CorruptionSpec, corrupt
from .problems import make_problem
from .renewal import measure_interarrivals, theoretical_interarrival_bound
from .trust_region import (
    GuaranteeReport, PotentialSpec, StormConfig, drift_constants, first_order_bound,
    guarantee_checks, potential_value, run_storm,
)

log = logging.getLogger(__name__)

RUN_COLUMNS = ("epsilon", "rep", "T_eps", "timeout", "f_final", "grad_norm_final",
               "total_oracle_value_samples", "total_oracle_grad_samples", "wall_ns")
TRACE_COLUMNS = ("epsilon", "rep", "k", "delta", "rho", "success", "model_decrease",
                 "f_true", "grad_norm_true", "phi", "v_k", "i_k", "j_k")
VALIDATIONS = ("cauchy", "guarantees", "drift", "interarrival", "bound")

MIN_BIN = 200
SLOPE_MIN_POINTS = 3
SLOPE_MIN_COMPLETE = 0.9
BIN_DIGITS = 10

EXIT_OK, EXIT_FAILED, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3


@dataclass(frozen=True)
class ProblemConfig:
    name: str = "quadratic"
    dim: int = 2
    cond: float = 10.0
    sigma: float = 0.0
    sigma_g: float = 0.0
    seed: int = 0
    n_samples: int = 200
    subsample_size: int = 20
    budget_cap: int | None = None

    def build(self):
        return make_problem(self.name, dim=self.dim, cond=self.cond, sigma=self.sigma,
                            sigma_g=self.sigma_g, seed=self.seed, n_samples=self.n_samples,
                            subsample_size=self.subsample_size, budget_cap=self.budget_cap)


@dataclass(frozen=True)
class ExperimentPlan:
    problem: ProblemConfig = field(default_factory=ProblemConfig)
    storm: StormConfig = field(default_factory=StormConfig)
    alpha: float = 1.0
    beta: float = 1.0
    rule: str = "chebyshev"
    epsilon_grid: tuple = (1e-1, 1e-2, 1e-3)
    replications: int = 1
    master_seed: int = 0
    output_path: str | None = None
    trace: bool = False
    instrument: bool = True
    nu: float | None = None
    failure_prob: float = 0.0
    corruption_shift: float = 1e6
    workers: int = 1
    record_timing: bool = False
    snap_radii: bool = True
    validations: tuple = VALIDATIONS

    def __post_init__(self):
        grid = tuple(float(e) for e in self.epsilon_grid)
        object.__setattr__(self, "epsilon_grid", grid)
        if not grid or any(not e > 0 for e in grid):
            raise ConfigurationError("epsilon grid must be nonempty and positive")
        if any(a <= b for a, b in zip(grid, grid[1:])):
            raise ConfigurationError("epsilon grid must be strictly descending")
        if self.replications < 1:
            raise ConfigurationError("replications must be at least 1")
        unknown = set(self.validations) - set(VALIDATIONS)
        if unknown:
            raise ConfigurationError(f"unknown validations {sorted(unknown)}")

    def targets(self) -> AccuracyTargets:
        return AccuracyTargets.for_config(self.storm, self.alpha, self.beta, self.rule)

    def config_for(self, epsilon: float) -> StormConfig:
        if not self.snap_radii:
            return self.storm
        return self.storm.snapped(epsilon / (20.0 * self.storm.kappa_eg))

    def check(self, lipschitz: float):
        """Raise ConfigurationError unless the accuracy targets make the potential drift down."""
        self.targets()
        dc = drift_constants(self.storm, lipschitz)
        if not dc.alpha_beta_ok(self.alpha, self.beta):
            raise ConfigurationError(
                f"alpha={self.alpha}, beta={self.beta} fail the drift conditions "
                f"(beta >= {dc.beta_min:.10g}, alpha >= {dc.alpha_min(self.beta):.10g})")
        if self.nu is not None:
            PotentialSpec(self.nu, dc.zeta)
        return dc

    def to_json(self) -> dict:
        d = asdict(self)
        d["epsilon_grid"] = list(self.epsilon_grid)
        d["validations"] = list(self.validations)
        return d

    @classmethod
    def from_json(cls, d: dict) -> ExperimentPlan:
        d = dict(d)
        d["problem"] = ProblemConfig(**d["problem"])
        d["storm"] = StormConfig(**d["storm"])
        d["epsilon_grid"] = tuple(d["epsilon_grid"])
        d["validations"] = tuple(d["validations"])
        return cls(**d)


@dataclass
class CellResult:
    eps_index: int
    rep: int
    run_row: dict
    trace: dict
    guarantees: GuaranteeReport


def cell_seed(master_seed: int, eps_index: int, rep: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([master_seed, eps_index, rep])


def run_cell(plan: ExperimentPlan, eps_index: int, rep: int, problem=None) -> CellResult:
    problem = plan.problem.build() if problem is None else problem
    eps = plan.epsilon_grid[eps_index]
    cfg = plan.config_for(eps)
    oracle = problem.oracle
    if plan.failure_prob > 0:
        oracle = corrupt(oracle, CorruptionSpec(plan.failure_prob, shift=plan.corruption_shift))
    potential = PotentialSpec.default(cfg)
    rng = np.random.Generator(np.random.PCG64(cell_seed(plan.master_seed, eps_index, rep)))
    t0 = time.perf_counter_ns()
    res = run_storm(oracle, problem.x0, cfg, eps, plan.targets(), referee=problem,
                    potential=potential, rng=rng, instrument=plan.instrument)
    wall = time.perf_counter_ns() - t0 if plan.record_timing else 0
    recs = res.records
    row = {
        "epsilon": eps, "rep": rep,
        "T_eps": res.T_eps if res.T_eps is not None else cfg.max_iters,
        "timeout": int(res.timeout), "f_final": res.f_final,
        "grad_norm_final": res.grad_norm_final,
        "total_oracle_value_samples": res.value_samples,
        "total_oracle_grad_samples": res.grad_samples, "wall_ns": wall,
    }

    def col(name, default=math.nan):
        return np.array([default if getattr(r, name) is None else getattr(r, name)
                         for r in recs], dtype=float)

    phi = col("phi")
    trace = {
        "k": np.arange(len(recs)), "delta": col("delta_before"), "rho": col("rho"),
        "success": col("success"), "model_decrease": col("model_decrease"),
        "f_true": col("f_true_before"), "grad_norm_true": col("grad_norm_true"),
        "phi": phi, "v_k": col("phi_next") - phi,
        "i_k": col("model_good", -1), "j_k": col("estimates_good", -1),
    }
    if recs:
        trace["final_delta"] = res.state.radius
    return CellResult(eps_index, rep, row, trace, guarantee_checks(recs, cfg))


def _cell_worker(args):
    plan, ie, rep = args
    return run_cell(plan, ie, rep)


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    x = float(v)
    if math.isnan(x):
        return ""
    if x.is_integer() and abs(x) < 2**53:
        return str(int(x))
    return repr(x)


def _write_csv(path: Path, columns, rows):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])


def _read_csv(path: Path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def _trace_rows(cell: CellResult, eps: float):
    t = cell.trace
    for i in range(len(t["k"])):
        row = {c: t[c][i] for c in TRACE_COLUMNS[2:]}
        row["k"] = int(t["k"][i])
        for flag in ("success", "i_k", "j_k"):
            row[flag] = None if t[flag][i] < 0 else int(t[flag][i])
        row["epsilon"], row["rep"] = eps, cell.rep
        yield row


@dataclass
class SummaryStats:
    per_eps: list = field(default_factory=list)
    slope: float | None = None
    slope_se: float | None = None
    drift_table: list = field(default_factory=list)
    interarrival: dict = field(default_factory=dict)
    guarantees: GuaranteeReport | None = None
    bound_report: list = field(default_factory=list)
    validations: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(v is not False for v in self.validations.values())

    def rows(self):
        """Long-format rows ``(section, key, field, value)`` for summary.csv."""
        for d in self.per_eps:
            for k, v in d.items():
                if k != "epsilon":
                    yield ("per_eps", _fmt(d["epsilon"]), k, _fmt(v))
        yield ("slope", "", "slope", _fmt(self.slope))
        yield ("slope", "", "slope_se", _fmt(self.slope_se))
        for d in self.drift_table:
            for k, v in d.items():
                if k != "delta":
                    yield ("drift", _fmt(d["delta"]), k, _fmt(v))
        for k, v in self.interarrival.items():
            yield ("interarrival", "", k, _fmt(v))
        for d in self.bound_report:
            for k, v in d.items():
                if k != "epsilon":
                    yield ("bound", _fmt(d["epsilon"]), k, _fmt(v))
        if self.guarantees is not None:
            for f in fields(self.guarantees):
                yield ("guarantees", "", f.name, _fmt(getattr(self.guarantees, f.name)))
        for k, v in self.validations.items():
            yield ("validation", k, "passed", "" if v is None else _fmt(bool(v)))


def _mean_se(x):
    x = np.asarray(x, dtype=float)
    if x.size == 0:
        return math.nan, math.nan
    se = x.std(ddof=1) / math.sqrt(x.size) if x.size > 1 else 0.0
    return float(x.mean()), float(se)


def per_eps_stats(plan: ExperimentPlan, run_rows) -> list[dict]:
    out = []
    for eps in plan.epsilon_grid:
        rows = [r for r in run_rows if math.isclose(float(r["epsilon"]), eps, rel_tol=1e-12)]
        done = np.array([float(r["T_eps"]) for r in rows if not int(r["timeout"])])
        n_to = sum(int(r["timeout"]) for r in rows)
        mean, se = _mean_se(done)
        out.append({
            "epsilon": eps, "n": len(rows), "timeouts": n_to,
            "timeout_frac": n_to / len(rows) if rows else math.nan,
            "mean": mean, "median": float(np.median(done)) if done.size else math.nan,
            "std": float(done.std(ddof=1)) if done.size > 1 else 0.0, "se": se,
            "censored": int(n_to > 0),
        })
    return out


def slope_fit(per_eps: list[dict]):
    """Log-log regression of mean T_eps on eps, or ``(None, None)`` when too few points qualify."""
    pts = [(d["epsilon"], d["mean"]) for d in per_eps
           if d["n"] and 1 - d["timeout_frac"] >= SLOPE_MIN_COMPLETE and d["mean"] > 0]
    if len(pts) < SLOPE_MIN_POINTS:
        return None, None
    e, m = np.log(np.array(pts)).T
    fit = stats.linregress(e, m)
    return float(fit.slope), float(fit.stderr)


def drift_table(deltas, vs, theta: float, min_count: int = MIN_BIN) -> list[dict]:
    """Mean potential change per radius value, against ``-theta * delta**2``."""
    deltas = np.asarray(deltas, dtype=float)
    vs = np.asarray(vs, dtype=float)
    keep = np.isfinite(deltas) & np.isfinite(vs)
    keys = np.array([float(f"{d:.{BIN_DIGITS}g}") for d in deltas[keep]])
    vs = vs[keep]
    table = []
    for key in np.unique(keys):
        v = vs[keys == key]
        if v.size < min_count:
            continue
        mean, se = _mean_se(v)
        limit = -theta * key * key
        table.append({"delta": float(key), "n": int(v.size), "mean_v": mean, "se": se,
                      "limit": limit, "passed": int(mean <= limit + 3 * se)})
    return sorted(table, key=lambda d: -d["delta"])


def interarrival_summary(traces, p: float) -> dict:
    """Pooled interarrival times of ``Delta_k >= Delta_eps`` across STORM traces.

    ``traces`` yields ``(delta array, delta_eps, stop_time)``.
    """
    taus = []
    for deltas, d_eps, stop in traces:
        if len(deltas) == 0:
            continue
        tr = measure_interarrivals(deltas, d_eps, stop_time=stop)
        taus.append(tr.interarrivals)
    tau = np.concatenate(taus) if taus else np.empty(0)
    mean, se = _mean_se(tau)
    bound = theoretical_interarrival_bound(p)
    return {"n": int(tau.size), "mean": mean, "se": se, "bound": bound,
            "passed": int(tau.size == 0 or mean <= bound + 3 * se)}


def validate_bound(stats_: SummaryStats, plan: ExperimentPlan, problem=None) -> list[dict]:
    """Compare each empirical mean T_eps with the first-order complexity bound.

    The bound is reported at the default potential weight and, if the plan sets
    one, at ``plan.nu``. Flags an epsilon whose mean exceeds the default bound
    by more than three standard errors.
    """
    if plan.alpha * plan.beta <= 0.5:
        raise DomainError("alpha * beta must exceed 1/2")
    problem = plan.problem.build() if problem is None else problem
    f0 = float(problem.f_exact(problem.x0))
    report = []
    for d in stats_.per_eps:
        cfg = plan.config_for(d["epsilon"])
        pot = PotentialSpec.default(cfg)
        args = (plan.alpha, plan.beta)
        rest = (cfg.kappa_eg, cfg.kappa_ef, cfg.delta0, d["epsilon"])
        bound = first_order_bound(*args, potential_value(f0, cfg.delta0, pot), *rest)
        entry = {"epsilon": d["epsilon"], "mean": d["mean"], "se": d["se"], "bound": bound}
        if plan.nu is not None:
            user = PotentialSpec(plan.nu, pot.zeta)
            entry["bound_user_nu"] = first_order_bound(
                *args, potential_value(f0, cfg.delta0, user), *rest)
        entry["exceeded"] = int(bool(d["mean"] > bound + 3 * (d["se"] or 0.0)))
        report.append(entry)
    return report


def summarize(plan: ExperimentPlan, run_rows, trace_rows=None, guarantees=None,
              cells=None, problem=None) -> SummaryStats:
    """Aggregate run rows (and traces, when available) into SummaryStats.

    Traces come either from in-memory ``cells`` or from ``trace_rows`` read back
    from traces.csv.
    """
    problem = plan.problem.build() if problem is None else problem
    dc = drift_constants(plan.storm, problem.lipschitz_L)
    s = SummaryStats(guarantees=guarantees)
    s.per_eps = per_eps_stats(plan, run_rows)
    s.slope, s.slope_se = slope_fit(s.per_eps)
    enabled = set(plan.validations)

    series = []  # (eps, deltas, v_k, final delta)
    if cells is not None:
        for c in cells:
            t = c.trace
            series.append((plan.epsilon_grid[c.eps_index], t["delta"], t["v_k"],
                           t.get("final_delta")))
    elif trace_rows:
        groups = {}
        for r in trace_rows:
            groups.setdefault((float(r["epsilon"]), int(r["rep"])), []).append(r)
        for (eps, _), rows in sorted(groups.items()):
            rows.sort(key=lambda r: int(r["k"]))
            flt = lambda c: np.array([float(r[c]) if r[c] != "" else math.nan for r in rows])
            series.append((eps, flt("delta"), flt("v_k"), None))

    have_traces = bool(series)
    if have_traces:
        deltas = np.concatenate([d for _, d, _, _ in series])
        vs = np.concatenate([v for _, _, v, _ in series])
        s.drift_table = drift_table(deltas, vs, dc.theta)

        def radius_traces():
            for eps, d, _, final in series:
                d_eps = eps / dc.zeta
                full = d if final is None else np.append(d, final)
                yield full, d_eps, len(full) - 1

        s.interarrival = interarrival_summary(radius_traces(), plan.alpha * plan.beta)

    s.bound_report = validate_bound(s, plan, problem)

    v = {}
    if "cauchy" in enabled:
        v["cauchy"] = None if guarantees is None else guarantees.cauchy_violations == 0
    if "guarantees" in enabled:
        v["guarantees"] = None if guarantees is None else (
            guarantees.success_guarantee_violations == 0 and guarantees.decrease_violations == 0)
    if "drift" in enabled:
        v["drift"] = (all(d["passed"] for d in s.drift_table)
                      if have_traces and s.drift_table else None)
    if "interarrival" in enabled:
        v["interarrival"] = bool(s.interarrival["passed"]) if have_traces else None
    if "bound" in enabled:
        v["bound"] = not any(d["exceeded"] for d in s.bound_report)
    s.validations = v
    return s


def run_plan(plan: ExperimentPlan) -> SummaryStats:
    """Run every (epsilon, replication) cell and write CSV artifacts if ``output_path`` is set."""
    problem = plan.problem.build()
    plan.check(problem.lipschitz_L)
    jobs = [(ie, r) for ie in range(len(plan.epsilon_grid)) for r in range(plan.replications)]
    if plan.workers > 1:
        with ProcessPoolExecutor(plan.workers) as ex:
            cells = list(ex.map(_cell_worker, [(plan, ie, r) for ie, r in jobs],
                                chunksize=max(1, len(jobs) // (4 * plan.workers))))
    else:
        cells = [run_cell(plan, ie, r, problem) for ie, r in jobs]
    cells.sort(key=lambda c: (c.eps_index, c.rep))
    guarantees = GuaranteeReport()
    for c in cells:
        guarantees = guarantees.merge(c.guarantees)
    run_rows = [c.run_row for c in cells]
    summary = summarize(plan, run_rows, guarantees=guarantees, cells=cells, problem=problem)
    if plan.output_path is not None:
        out = Path(plan.output_path)
        out.mkdir(parents=True, exist_ok=True)
        _write_csv(out / "runs.csv", RUN_COLUMNS, run_rows)
        if plan.trace:
            with open(out / "traces.csv", "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(TRACE_COLUMNS)
                for c in cells:
                    for row in _trace_rows(c, plan.epsilon_grid[c.eps_index]):
                        w.writerow([_fmt(row[k]) for k in TRACE_COLUMNS])
        write_summary(out / "summary.csv", summary)
        with open(out / "plan.json", "w") as fh:
            json.dump(plan.to_json(), fh, indent=2, sort_keys=True)
        log.info("wrote results to %s", out)
    return summary


def write_summary(path: Path, summary: SummaryStats):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("section", "key", "field", "value"))
        w.writerows(summary.rows())


def load_guarantees(path: Path) -> GuaranteeReport | None:
    if not path.exists():
        return None
    vals = {r["field"]: int(r["value"]) for r in _read_csv(path) if r["section"] == "guarantees"}
    if not vals:
        return None
    return GuaranteeReport(**vals)


def revalidate(directory) -> tuple[ExperimentPlan, SummaryStats]:
    """Recompute statistics from a finished run directory.

    Cauchy and guarantee counts cannot be rebuilt from the CSV columns; they are
    carried over from the existing summary.csv.
    """
    d = Path(directory)
    with open(d / "plan.json") as fh:
        plan = ExperimentPlan.from_json(json.load(fh))
    runs = _read_csv(d / "runs.csv")
    traces = _read_csv(d / "traces.csv") if (d / "traces.csv").exists() else None
    guarantees = load_guarantees(d / "summary.csv")
    return plan, summarize(plan, runs, traces, guarantees)

