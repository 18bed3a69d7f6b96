import csv
import json
import math
import types

import numpy as np
import pytest

from stochtr import cli, harness
from stochtr.errors import ConfigurationError, DomainError
from stochtr.harness import (
    ExperimentPlan, ProblemConfig, SummaryStats, drift_table, per_eps_stats, revalidate,
    run_plan, slope_fit, validate_bound,
)
from stochtr.trust_region import PotentialSpec, first_order_bound, potential_value

GRID = (1e-1, 1e-2, 1e-3)


def plan(tmp_path=None, **kw):
    base = dict(epsilon_grid=GRID, replications=1, trace=True)
    if tmp_path is not None:
        base["output_path"] = str(tmp_path)
    base.update(kw)
    return ExperimentPlan(**base)


def noisy(**kw):
    return plan(problem=ProblemConfig(dim=3, sigma=0.1, sigma_g=0.1), alpha=0.9,
                beta=1 - 1e-7, **kw)


class TestPlan:
    @pytest.mark.parametrize("grid", [(), (1e-2, 1e-1), (1e-1, 1e-1), (1e-1, -1.0)])
    def test_grid_validation(self, grid):
        with pytest.raises(ConfigurationError):
            plan(epsilon_grid=grid)

    def test_replications(self):
        with pytest.raises(ConfigurationError):
            plan(replications=0)

    def test_unknown_validation(self):
        with pytest.raises(ConfigurationError):
            plan(validations=("cauchy", "magic"))

    def test_infeasible_probabilities(self):
        p = plan(problem=ProblemConfig(sigma=0.1), alpha=0.9, beta=0.99)
        with pytest.raises(ConfigurationError, match="drift conditions"):
            run_plan(p)

    def test_json_roundtrip(self):
        p = noisy(nu=0.99)
        assert ExperimentPlan.from_json(json.loads(json.dumps(p.to_json()))) == p

    def test_radii_snapped_to_threshold_grid(self):
        p = plan()
        for eps in GRID:
            cfg = p.config_for(eps)
            j = math.log2(cfg.delta0 * 200 / eps)
            assert j == pytest.approx(round(j), abs=1e-9)

    def test_cell_seeds_differ(self):
        a = harness.cell_seed(0, 0, 1).generate_state(2)
        b = harness.cell_seed(0, 1, 0).generate_state(2)
        assert not np.array_equal(a, b)


class TestRunPlan:
    def test_noiseless_deterministic(self, tmp_path):
        s1 = run_plan(plan(tmp_path / "a"))
        s2 = run_plan(plan(tmp_path / "b"))
        assert [d["mean"] for d in s1.per_eps] == [d["mean"] for d in s2.per_eps]
        assert s1.passed
        for name in ("runs.csv", "traces.csv", "summary.csv"):
            assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()

    def test_csv_schema(self, tmp_path):
        run_plan(plan(tmp_path))
        with open(tmp_path / "runs.csv") as fh:
            rows = list(csv.reader(fh))
        assert tuple(rows[0]) == harness.RUN_COLUMNS and len(rows) == 1 + len(GRID)
        with open(tmp_path / "traces.csv") as fh:
            assert tuple(next(csv.reader(fh))) == harness.TRACE_COLUMNS

    def test_noisy_byte_identical(self, tmp_path):
        run_plan(noisy(output_path=str(tmp_path / "a"), replications=3))
        run_plan(noisy(output_path=str(tmp_path / "b"), replications=3))
        assert (tmp_path / "a" / "runs.csv").read_bytes() == (tmp_path / "b" / "runs.csv").read_bytes()

    def test_workers_do_not_change_results(self, tmp_path):
        run_plan(noisy(output_path=str(tmp_path / "a"), replications=2, workers=1))
        run_plan(noisy(output_path=str(tmp_path / "b"), replications=2, workers=2))
        assert (tmp_path / "a" / "runs.csv").read_bytes() == (tmp_path / "b" / "runs.csv").read_bytes()

    def test_bound_respected(self):
        s = run_plan(plan())
        assert all(d["mean"] <= d["bound"] for d in s.bound_report)

    def test_corruption_counts(self):
        s = run_plan(noisy(epsilon_grid=(1e-1,), replications=3, failure_prob=0.05))
        assert s.per_eps[0]["timeouts"] == 0

    def test_revalidate_matches(self, tmp_path):
        s = run_plan(noisy(output_path=str(tmp_path), replications=2))
        p, r = revalidate(tmp_path)
        assert p.replications == 2
        assert [d["mean"] for d in r.per_eps] == [d["mean"] for d in s.per_eps]
        assert r.guarantees == s.guarantees
        assert r.drift_table == s.drift_table
        assert r.validations["bound"] == s.validations["bound"]


class TestStatistics:
    def rows(self, eps, Ts, timeouts=()):
        return [{"epsilon": eps, "T_eps": t, "timeout": int(i in timeouts)}
                for i, t in enumerate(Ts)]

    def test_per_eps_censoring(self):
        p = plan(epsilon_grid=(1e-1,))
        d = per_eps_stats(p, self.rows(0.1, [4, 6, 100], timeouts=(2,)))[0]
        assert d["mean"] == 5.0 and d["timeouts"] == 1 and d["censored"] == 1
        assert d["timeout_frac"] == pytest.approx(1 / 3)

    def test_slope_recovers_power_law(self):
        per = [{"epsilon": e, "mean": 3 * e**-2, "n": 5, "timeout_frac": 0.0}
               for e in (1e-1, 1e-2, 1e-3)]
        slope, se = slope_fit(per)
        assert slope == pytest.approx(-2.0) and se == pytest.approx(0.0, abs=1e-9)

    def test_slope_needs_three_complete(self):
        per = [{"epsilon": e, "mean": 1 / e, "n": 10, "timeout_frac": f}
               for e, f in ((1e-1, 0.0), (1e-2, 0.0), (1e-3, 0.2))]
        assert slope_fit(per) == (None, None)

    def test_drift_table_bins(self):
        rng = np.random.default_rng(0)
        d = np.repeat([1.0, 0.5, 0.25], [300, 300, 50])
        v = -d**2 + 0.01 * rng.standard_normal(d.size)
        t = drift_table(d, v, theta=0.5)
        assert [b["delta"] for b in t] == [1.0, 0.5]
        assert all(b["passed"] for b in t)
        t = drift_table(d, v + 2.0, theta=0.5)
        assert not any(b["passed"] for b in t)


class TestValidateBound:
    def stats(self, eps, mean, se=0.0):
        return SummaryStats(per_eps=[{"epsilon": eps, "mean": mean, "se": se}])

    def test_exact_oracle_formula(self):
        p = plan(epsilon_grid=(1e-2,))
        prob = p.problem.build()
        cfg = p.config_for(1e-2)
        phi0 = potential_value(float(prob.f_exact(prob.x0)), cfg.delta0,
                               PotentialSpec.default(cfg))
        want = 20 * phi0 * 10 * 1600 * 10 / 1e-4 + 20 * cfg.delta0 * 10 / 1e-2 + 1
        rep = validate_bound(self.stats(1e-2, 30.0), p, prob)
        assert rep[0]["bound"] == pytest.approx(want, rel=1e-12)
        assert rep[0]["exceeded"] == 0

    def test_flags_excess(self):
        p = plan(epsilon_grid=(1e-2,))
        rep = validate_bound(self.stats(1e-2, 1e30, 1.0), p)
        assert rep[0]["exceeded"] == 1

    def test_trivial_case(self):
        prob = types.SimpleNamespace(f_exact=lambda x: 0.0, x0=np.zeros(2))
        p = plan(epsilon_grid=(1e6,))
        rep = validate_bound(self.stats(1e6, 0.0), p, prob)
        assert rep[0]["bound"] >= 1.0 and rep[0]["exceeded"] == 0

    def test_user_nu_reported(self):
        p = plan(epsilon_grid=(1e-2,), nu=0.999)
        rep = validate_bound(self.stats(1e-2, 10.0), p)
        assert rep[0]["bound_user_nu"] != rep[0]["bound"]

    def test_domain(self):
        p = types.SimpleNamespace(alpha=0.7, beta=0.7)
        with pytest.raises(DomainError):
            validate_bound(self.stats(1e-2, 1.0), p)

    def test_ratio_near_four(self):
        a = first_order_bound(0.9, 0.99, 1.0, 10, 10, 1e-3, 1e-5)
        b = first_order_bound(0.9, 0.99, 1.0, 10, 10, 1e-3, 5e-6)
        assert b / a == pytest.approx(4.0, rel=1e-3)


class TestCli:
    def test_run_and_validate(self, tmp_path, capsys):
        out = str(tmp_path / "r")
        code = cli.main(["run", "--epsilon", "0.1", "--epsilon", "0.01", "--trace", "--out", out])
        assert code == 0
        assert "validation bound: PASS" in capsys.readouterr().out
        assert cli.main(["validate", "--out", out]) == 0

    def test_infeasible_exit_2(self, capsys):
        code = cli.main(["run", "--sigma", "0.1", "--alpha", "0.9", "--beta", "0.99"])
        assert code == harness.EXIT_CONFIG
        assert "configuration error" in capsys.readouterr().err

    def test_bad_config_value_exit_2(self):
        assert cli.main(["run", "--gamma", "0.5"]) == harness.EXIT_CONFIG

    def test_missing_dir_exit_3(self, tmp_path):
        assert cli.main(["validate", "--out", str(tmp_path / "nope")]) == harness.EXIT_IO

    def test_config_file_and_override(self, tmp_path):
        cfg = tmp_path / "plan.cfg"
        cfg.write_text("problem.name = quadratic\nproblem.dim = 3\n"
                       "oracle.sigma2 = 0.01\nreps = 2\nepsilon = 0.1, 0.01\n"
                       "storm.eta2 = 0.04  # comment\n")
        parser = cli.build_parser()
        vals = cli.load_config(str(cfg), parser._subparsers._group_actions[0].choices["run"])
        assert vals["dim"] == 3 and vals["sigma"] == pytest.approx(0.1)
        assert vals["epsilon_file"] == [0.1, 0.01] and vals["eta2"] == 0.04
        sub = parser._subparsers._group_actions[0].choices["run"]
        sub.set_defaults(**vals)
        args = parser.parse_args(["run", "--config", str(cfg), "--dim", "4", "--epsilon", "0.5"])
        p = cli.plan_from_args(args)
        assert p.problem.dim == 4 and p.epsilon_grid == (0.5,)
        assert p.replications == 2 and p.storm.eta2 == 0.04
        assert p.alpha == cli.DEFAULT_ALPHA

    def test_config_unknown_key(self, tmp_path):
        cfg = tmp_path / "bad.cfg"
        cfg.write_text("flux = 3\n")
        assert cli.main(["run", "--config", str(cfg)]) == harness.EXIT_CONFIG

    def test_renewal(self, capsys):
        assert cli.main(["renewal", "--p", "0.75", "--steps", "20000"]) == 0
        assert "PASS" in capsys.readouterr().out

    def test_renewal_domain_error(self):
        assert cli.main(["renewal", "--p", "0.4", "--steps", "100"]) == harness.EXIT_CONFIG

    def test_constants(self, capsys):
        assert cli.main(["constants", "--cond", "10"]) == 0
        out = capsys.readouterr().out
        assert "theta = 6.25e-05" in out and "ab_rhs = 10.75" in out

    def test_constants_infeasible(self):
        assert cli.main(["constants", "--sigma", "0.1", "--beta", "0.9"]) == harness.EXIT_FAILED
