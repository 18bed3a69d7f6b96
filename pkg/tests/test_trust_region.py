import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stochtr.errors import ConfigurationError, DomainError, NumericError, PreconditionError
from stochtr.oracles import AccuracyTargets, gaussian_oracle
from stochtr.problems import make_noisy_quadratic
from stochtr.trust_region import (
    IterationRecord, PotentialSpec, QuadraticModel, StormConfig, StormState, cauchy_bound,
    cauchy_step, drift_constants, first_order_bound, guarantee_checks, potential_value,
    rho_ratio, run_storm, storm_iterate,
)

# Minimizer along -g/|g| and the model decrease there, from a grid scan of
# 2e5 points on [0, radius] refined by bounded scalar minimization.
LINE_SEARCH = [
    ((1, 0), np.eye(2), 2.0, 1.0, 0.5),
    ((1, 0), -np.eye(2), 1.0, 1.0, 1.5),
    ((3, 4), np.eye(2), 10.0, 5.0, 12.5),
    ((3, 4), np.diag([1.0, 10.0]), 1.0, 0.739644981389067, 1.8491124260355025),
    ((3, 4), np.array([[2.0, 1.0], [1.0, 3.0]]), 0.7, 0.7, 2.6179999718354847),
]


def model(g, H=None, center=(0.0, 0.0), value=0.0):
    return QuadraticModel(np.array(center, float), value, np.array(g, float), H)


class TestCauchyStep:
    def test_stationary(self):
        step, dec = cauchy_step(model((0, 0), np.eye(2)), 1.0)
        assert not np.any(step) and dec == 0.0

    @pytest.mark.parametrize("g, H, r, t, dec", LINE_SEARCH)
    def test_matches_line_search(self, g, H, r, t, dec):
        step, d = cauchy_step(model(g, H), r)
        assert np.linalg.norm(step) == pytest.approx(t, rel=1e-6)
        assert d == pytest.approx(dec, rel=1e-7)

    def test_identity_example(self):
        step, dec = cauchy_step(model((1, 0), np.eye(2)), 2.0)
        np.testing.assert_allclose(step, [-1.0, 0.0])
        assert dec == pytest.approx(0.5)
        assert dec >= cauchy_bound([1, 0], 1.0, 2.0, 0.5) == pytest.approx(0.25)

    def test_zero_hessian_goes_to_boundary(self):
        step, dec = cauchy_step(model((0, 2)), 0.3)
        np.testing.assert_allclose(step, [0.0, -0.3])
        assert dec == pytest.approx(0.6)

    def test_nonfinite(self):
        with pytest.raises(NumericError):
            cauchy_step(model((np.nan, 0)), 1.0)

    def test_radius_must_be_positive(self):
        with pytest.raises(PreconditionError):
            cauchy_step(model((1, 0)), 0.0)

    @given(st.lists(st.floats(-100, 100), min_size=3, max_size=3),
           st.lists(st.floats(-1, 1), min_size=6, max_size=6),
           st.floats(1e-4, 1e3), st.floats(0.01, 1.0))
    def test_decrease_property(self, g, h, r, kfcd):
        H = np.zeros((3, 3))
        H[np.triu_indices(3)] = h
        H = H + np.triu(H, 1).T
        m = model(g, H, center=(0.0, 0.0, 0.0))
        step, dec = cauchy_step(m, r)
        assert np.linalg.norm(step) <= r * (1 + 1e-12)
        assert dec >= 0
        assert dec == pytest.approx(m(np.zeros(3)) - m(step), rel=1e-9, abs=1e-9)
        need = cauchy_bound(m.gradient, m.hessian_norm(), r, kfcd)
        assert dec >= need * (1 - 1e-10)


class TestRho:
    def test_perfect_agreement(self):
        assert rho_ratio(3.0, 2.5, 0.5) == 1.0

    def test_no_progress(self):
        assert rho_ratio(1.0, 1.0, 0.5) == 0.0

    def test_zero_decrease_rejects(self):
        assert rho_ratio(2.0, 1.0, 0.0) == -math.inf

    def test_nonfinite(self):
        with pytest.raises(NumericError):
            rho_ratio(math.inf, 0.0, 1.0)

    def test_negative_decrease(self):
        with pytest.raises(PreconditionError):
            rho_ratio(1.0, 0.0, -1.0)


def state(delta=0.5, x=(0.0, 0.0), cfg=None):
    cfg = cfg or StormConfig(delta0=0.5, delta_max=10.0)
    return StormState(np.array(x, float), delta, 0, cfg)


class TestStormIterate:
    def test_success_expands(self):
        st0 = state()
        m = model((1, 0))
        _, dec = cauchy_step(m, 0.5)
        new, rec = storm_iterate(st0, m, (1.0, 1.0 - 0.5 * dec))
        assert rec.success and rec.rho == pytest.approx(0.5)
        assert new.radius == 1.0
        np.testing.assert_allclose(new.iterate, [-0.5, 0.0])

    def test_low_rho_shrinks(self):
        m = model((1, 0))
        _, dec = cauchy_step(m, 0.5)
        new, rec = storm_iterate(state(), m, (1.0, 1.0 - 0.05 * dec))
        assert not rec.success
        assert new.radius == 0.25 and np.array_equal(new.iterate, [0.0, 0.0])

    def test_small_gradient_rejects_despite_rho(self):
        m = model((0.01, 0))
        _, dec = cauchy_step(m, 0.5)
        new, rec = storm_iterate(state(), m, (1.0, 1.0 - 0.9 * dec))
        assert rec.rho == pytest.approx(0.9) and not rec.success
        assert new.radius == 0.25

    def test_cap(self):
        cfg = StormConfig(delta0=1.0, delta_max=3.0)
        m = model((1, 0))
        new, _ = storm_iterate(state(2.0, cfg=cfg), m, (1.0, 0.0))
        assert new.radius == 2.0 == cfg.radius_cap

    def test_callable_estimates_see_trial_point(self):
        seen = []

        def est(x, y):
            seen.append(y.copy())
            return 1.0, 0.0

        new, _ = storm_iterate(state(), model((0, 2)), est)
        np.testing.assert_allclose(seen[0], [0.0, -0.5])
        np.testing.assert_allclose(new.iterate, seen[0])

    def test_hessian_cap_enforced(self):
        with pytest.raises(PreconditionError):
            storm_iterate(state(), model((1, 0), 2 * np.eye(2)), (1.0, 0.0))

    @given(st.lists(st.booleans(), min_size=1, max_size=40))
    def test_radius_stays_on_grid(self, outcomes):
        cfg = StormConfig(delta0=1.0, delta_max=8.0)
        s = state(1.0, cfg=cfg)
        m = model((1, 0))
        for ok in outcomes:
            x_prev = s.iterate
            s, rec = storm_iterate(s, m, (1.0, 0.0) if ok else (1.0, 1.0))
            j = math.log2(s.radius)
            assert j == round(j) and 0 < s.radius <= 8.0
            assert rec.success == ok
            assert (not np.array_equal(s.iterate, x_prev)) == ok


class TestQuadraticModel:
    def test_shape(self):
        with pytest.raises(PreconditionError):
            model((1, 0), np.eye(3))

    def test_symmetry(self):
        with pytest.raises(PreconditionError):
            model((1, 0), np.array([[1.0, 1.0], [0.0, 1.0]]))

    def test_value(self):
        m = QuadraticModel(np.zeros(2), 1.0, np.array([1.0, 0.0]), np.eye(2))
        assert m(np.array([1.0, 1.0])) == pytest.approx(3.0)


class TestConfig:
    def test_defaults(self):
        c = StormConfig()
        assert (c.gamma, c.eta1, c.eta2, c.kappa_fcd) == (2.0, 0.1, 0.05, 0.5)
        assert c.eps_F == pytest.approx(1.5625e-5)

    @pytest.mark.parametrize("kw", [dict(gamma=1.0), dict(eta1=1.0), dict(eta2=0.0),
                                    dict(delta0=9.0), dict(kappa_fcd=1.5),
                                    dict(kappa_bhm=0.5), dict(eps_F=0.01)])
    def test_rejects(self, kw):
        with pytest.raises(ConfigurationError):
            StormConfig(**kw)

    def test_simplified_invariants(self):
        with pytest.raises(ConfigurationError):
            StormConfig(gamma=3.0, delta_max=20.0, simplified=True)
        with pytest.raises(ConfigurationError):
            StormConfig(kappa_bhm=121.0, simplified=True)

    def test_snapping(self):
        c = StormConfig(delta0=1.0, delta_max=8.0).snapped(3e-3)
        i0 = math.log2(c.delta0 / 3e-3)
        imax = math.log2(c.delta_max / 3e-3)
        assert i0 == pytest.approx(round(i0)) and imax == pytest.approx(round(imax))
        assert c.delta_max <= 8.0 and c.delta0 > c.delta_max / 2**imax


class TestPotential:
    def test_arithmetic(self):
        assert potential_value(2.0, 1.0, PotentialSpec(0.5, 200.0)) == 1.5
        assert potential_value(0.0, 0.0, PotentialSpec(0.5, 200.0)) == 0.0

    def test_default_weight(self):
        p = PotentialSpec.default(StormConfig())
        assert p.nu == pytest.approx(0.999844, abs=1e-6)
        assert p.zeta == 200.0
        assert p.violations(StormConfig()) == []

    def test_small_weight_flagged(self):
        assert PotentialSpec(0.5, 200.0).violations(StormConfig())

    def test_negative_f(self):
        with pytest.raises(PreconditionError):
            potential_value(-1.0, 1.0, PotentialSpec(0.5, 200.0))


class TestDriftConstants:
    def test_examples(self):
        d = drift_constants(StormConfig(eps_F=0.0), 10.0)
        assert d.theta == pytest.approx(1 / 16000)
        assert d.zeta == 200.0
        assert d.C1 == 0.1
        assert d.C2 == pytest.approx(6.25e-5)
        assert d.ab_rhs == pytest.approx(10.75)
        assert d.C3 == pytest.approx(1.075)
        assert d.beta_min == pytest.approx((88000 + 10 + 0.4) / (88000 + 10 + 0.45))

    def test_default_eps_keeps_c2_positive(self):
        assert drift_constants(StormConfig(), 10.0).C2 == pytest.approx(3.125e-5)

    def test_regime_errors_list_violations(self):
        with pytest.raises(ConfigurationError, match="eta2 > 0.03"):
            drift_constants(StormConfig(eta2=0.01), 10.0)
        with pytest.raises(ConfigurationError, match="kappa_ef == kappa_eg"):
            drift_constants(StormConfig(kappa_ef=20.0), 10.0)

    def test_alpha_beta_condition(self):
        d = drift_constants(StormConfig(), 10.0)
        assert d.alpha_beta_ok(1.0, 1.0)
        assert d.alpha_beta_ok(0.9, 1 - 1e-7)
        assert not d.alpha_beta_ok(0.9, 0.99)
        b = 1 - 1e-7
        a = d.alpha_min(b)
        assert d.alpha_beta_ok(a * (1 + 1e-9), b) and not d.alpha_beta_ok(a * (1 - 1e-6), b)


class TestFirstOrderBound:
    def test_quadratic_in_inverse_epsilon(self):
        a = first_order_bound(1.0, 1.0, 1.0, 10.0, 10.0, 1.0, 1e-4)
        b = first_order_bound(1.0, 1.0, 1.0, 10.0, 10.0, 1.0, 0.5e-4)
        assert b / a == pytest.approx(4.0, rel=1e-3)

    def test_value(self):
        # theta = 1/16000, ab/(2ab-1) = 1
        assert first_order_bound(1.0, 1.0, 2.0, 10.0, 10.0, 1.0, 0.1) == pytest.approx(
            20 * 2 * 10 * 16000 / 0.01 + 20 * 10 / 0.1 + 1)

    @pytest.mark.parametrize("a, b", [(0.5, 1.0), (0.7, 0.7)])
    def test_domain(self, a, b):
        with pytest.raises(DomainError):
            first_order_bound(a, b, 1.0, 10.0, 10.0, 1.0, 0.1)


def half_norm_sq():
    f = lambda x: 0.5 * np.sum(np.asarray(x) ** 2, axis=-1)
    g = lambda x: np.asarray(x, float)
    return gaussian_oracle(f, g, 0.0, 0.0, 2), f, g


class _Referee:
    def __init__(self, f, g):
        self.f_exact, self.grad_exact = f, g


class TestRunStorm:
    def test_deterministic_monotone(self):
        oracle, f, g = half_norm_sq()
        cfg = StormConfig(delta0=0.25, delta_max=4.0)
        res = run_storm(oracle, [1.0, 0.0], cfg, 1e-3, AccuracyTargets(1.0, 1.0),
                        referee=_Referee(f, g), seed=0)
        assert res.T_eps is not None and not res.timeout
        fs = [r.f_true_before for r in res.records] + [res.f_final]
        assert np.all(np.diff(fs) <= 0)
        for r in res.records:
            if r.success:
                assert r.f_true_after < r.f_true_before
            assert r.cauchy_ok and r.model_good and r.estimates_good
        assert res.grad_norm_final <= 1e-3
        assert guarantee_checks(res.records, cfg).ok

    def test_deterministic_trace_by_hand(self):
        # exact gradient, H = 0: step -delta*g/|g|, rho = 1 - delta/(2|x|)
        oracle, f, g = half_norm_sq()
        cfg = StormConfig(delta0=0.25, delta_max=4.0)
        res = run_storm(oracle, [1.0, 0.0], cfg, 1e-3, AccuracyTargets(1.0, 1.0),
                        referee=_Referee(f, g), seed=0)
        r0, r1 = res.records[:2]
        assert r0.rho == pytest.approx(1 - 0.25 / 2) and r0.success
        np.testing.assert_allclose(r0.x_after, [0.75, 0.0])
        assert r1.delta_before == 0.5
        np.testing.assert_allclose(r1.x_after, [0.25, 0.0])

    def test_already_stationary(self):
        oracle, f, g = half_norm_sq()
        res = run_storm(oracle, [1e-3, 0.0], StormConfig(), 0.1, AccuracyTargets(1.0, 1.0),
                        referee=_Referee(f, g))
        assert res.T_eps == 0 and res.records == []

    def test_no_referee_runs_to_cap(self):
        oracle, _, _ = half_norm_sq()
        res = run_storm(oracle, [1.0, 0.0], StormConfig(max_iters=7), 1e-3,
                        AccuracyTargets(1.0, 1.0))
        assert res.T_eps is None and len(res.records) == 7 and not res.timeout

    def test_timeout_keeps_trace(self):
        oracle, f, g = half_norm_sq()
        res = run_storm(oracle, [100.3, 0.0], StormConfig(max_iters=3), 1e-9,
                        AccuracyTargets(1.0, 1.0), referee=_Referee(f, g))
        assert res.timeout and len(res.records) == 3

    def test_epsilon_positive(self):
        oracle, _, _ = half_norm_sq()
        with pytest.raises(PreconditionError):
            run_storm(oracle, [1.0, 0.0], StormConfig(), 0.0, AccuracyTargets(1.0, 1.0))

    def test_seed_determinism(self):
        p = make_noisy_quadratic(3, 10.0, 0.1, 0.1)
        t = AccuracyTargets(0.9, 1 - 1e-7)
        cfg = StormConfig(max_iters=500)
        a = run_storm(p.oracle, p.x0, cfg, 1e-2, t, referee=p, seed=42)
        b = run_storm(p.oracle, p.x0, cfg, 1e-2, t, referee=p, seed=42)
        assert a.T_eps == b.T_eps
        for ra, rb in zip(a.records, b.records):
            assert np.array_equal(ra.x_after, rb.x_after) and ra.rho == rb.rho

    def test_noisy_mean_decreases_with_looser_tolerance(self):
        p = make_noisy_quadratic(3, 10.0, 0.1, 0.1)
        t = AccuracyTargets(0.9, 1 - 1e-7)
        cfg = StormConfig(max_iters=2000)
        means = []
        for eps in (1e-1, 1e-3):
            T = [run_storm(p.oracle, p.x0, cfg, eps, t, referee=p, seed=s).T_eps
                 for s in range(30)]
            assert None not in T
            means.append(np.mean(T))
        assert means[0] < means[1]


def record(**kw):
    base = dict(k=0, x_before=np.zeros(1), x_after=np.zeros(1), delta_before=0.01,
                delta_after=0.02, model_decrease=1.0, rho=1.0, success=True,
                grad_norm_model=10.0, cauchy_bound=0.5, f0_est=1.0, fs_est=0.0,
                f_true_before=1.0, f_true_after=0.5, model_good=True, estimates_good=True)
    base.update(kw)
    return IterationRecord(**base)


class TestGuaranteeChecks:
    def test_clean(self):
        rep = guarantee_checks([record()], StormConfig())
        assert rep.ok and rep.checked_success_guarantee == 1 and rep.checked_decrease == 1

    def test_rejected_good_iteration_flagged(self):
        rep = guarantee_checks([record(success=False, f_true_after=1.0)], StormConfig())
        assert rep.success_guarantee_violations == 1 and not rep.ok

    def test_insufficient_decrease_flagged(self):
        rep = guarantee_checks([record(f_true_after=1.0, delta_before=0.1)], StormConfig())
        assert rep.decrease_violations == 1

    def test_cauchy_flagged(self):
        rep = guarantee_checks([record(model_decrease=0.1)], StormConfig())
        assert rep.cauchy_violations == 1

    def test_large_radius_not_checked(self):
        rep = guarantee_checks([record(delta_before=1.0, success=False)], StormConfig())
        assert rep.checked_success_guarantee == 0 and rep.ok

    def test_merge(self):
        a = guarantee_checks([record()], StormConfig())
        assert a.merge(a).checked_decrease == 2
