"""Stochastic trust-region iteration with probabilistic models and estimates.

Each iteration builds a random quadratic model around the iterate, takes the
Cauchy step inside the trust region, estimates the objective at both ends of
the step and accepts only when the estimated reduction ratio is at least
``eta1`` *and* the model gradient is not too small relative to the radius.
The radius expands by ``gamma`` on success and shrinks by ``gamma`` otherwise,
so it always stays on the grid ``delta0 * gamma**j``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ConfigurationError, DomainError, NumericError, PreconditionError

# Relative slack when comparing quantities that are analytically equal.
ASSERT_RTOL = 1e-10


@dataclass(frozen=True)
class StormConfig:
    gamma: float = 2.0
    eta1: float = 0.1
    eta2: float = 0.05
    delta0: float = 1.0
    delta_max: float = 8.0
    kappa_fcd: float = 0.5
    kappa_ef: float = 10.0
    kappa_eg: float = 10.0
    kappa_bhm: float = 1.0
    eps_F: float | None = None
    max_iters: int = 10_000
    simplified: bool = False

    def __post_init__(self):
        if self.eps_F is None:
            # half the largest value that keeps the guaranteed decrease positive
            object.__setattr__(self, "eps_F", 0.125 * self.eta1 * self.eta2 * self.kappa_fcd
                               * min(self.eta2 / max(self.kappa_bhm, 1.0), 1.0))
        errs = []
        if not self.gamma > 1:
            errs.append("gamma > 1")
        if not 0 < self.eta1 < 1:
            errs.append("0 < eta1 < 1")
        if not self.eta2 > 0:
            errs.append("eta2 > 0")
        if not 0 < self.delta0 < self.delta_max:
            errs.append("0 < delta0 < delta_max")
        if not 0 < self.kappa_fcd <= 1:
            errs.append("0 < kappa_fcd <= 1")
        if not (self.kappa_ef > 0 and self.kappa_eg > 0):
            errs.append("kappa_ef, kappa_eg > 0")
        if not self.kappa_bhm >= 1:
            errs.append("kappa_bhm >= 1")
        if not 0 <= self.eps_F <= 0.25 * self.eta1 * self.eta2 * (1 + 1e-12):
            errs.append("0 <= eps_F <= eta1*eta2/4")
        if self.max_iters < 1:
            errs.append("max_iters >= 1")
        if self.simplified:
            if self.kappa_bhm > 12 * self.kappa_ef:
                errs.append("kappa_bhm <= 12*kappa_ef")
            if self.gamma > 2:
                errs.append("gamma <= 2")
        if errs:
            raise ConfigurationError("StormConfig violates: " + "; ".join(errs))

    @property
    def radius_cap(self) -> float:
        """Largest grid radius ``delta0 * gamma**j`` not exceeding ``delta_max``."""
        j = math.floor(math.log(self.delta_max / self.delta0) / math.log(self.gamma) + 1e-9)
        return self.delta0 * self.gamma**j

    def snapped(self, delta_eps: float) -> StormConfig:
        """Copy with ``delta0`` and ``delta_max`` moved onto ``delta_eps * gamma**i``.

        ``delta0`` goes to the nearest grid point (at least ``gamma*delta_eps``),
        ``delta_max`` to the largest grid point not above it, but never below
        ``gamma*delta0``.
        """
        lg = math.log(self.gamma)
        i0 = max(1, round(math.log(self.delta0 / delta_eps) / lg))
        imax = max(i0 + 1, math.floor(math.log(self.delta_max / delta_eps) / lg + 1e-9))
        return replace(self, delta0=delta_eps * self.gamma**i0,
                       delta_max=delta_eps * self.gamma**imax)


@dataclass
class QuadraticModel:
    """``m(center + s) = value + gradient @ s + 0.5 * s @ hessian @ s``."""

    center: np.ndarray
    value: float
    gradient: np.ndarray
    hessian: np.ndarray | None = None

    def __post_init__(self):
        self.center = np.asarray(self.center, dtype=float)
        self.gradient = np.asarray(self.gradient, dtype=float)
        n = self.gradient.shape[0]
        if self.hessian is None:
            self.hessian = np.zeros((n, n))
        else:
            self.hessian = np.asarray(self.hessian, dtype=float)
            H = self.hessian
            if H.shape != (n, n):
                raise PreconditionError(f"hessian must be {n}x{n}, got {H.shape}")
            if not np.allclose(H, H.T, rtol=1e-12, atol=1e-12 * (1 + np.abs(H).max())):
                raise PreconditionError("hessian must be symmetric")

    def __call__(self, s):
        s = np.asarray(s, dtype=float)
        Hs = s @ self.hessian
        return self.value + s @ self.gradient + 0.5 * np.sum(Hs * s, axis=-1)

    def hessian_norm(self) -> float:
        if not np.any(self.hessian):
            return 0.0
        return float(np.linalg.norm(self.hessian, 2))

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.value) and np.all(np.isfinite(self.gradient))
                    and np.all(np.isfinite(self.hessian)))


@dataclass
class StormState:
    iterate: np.ndarray
    radius: float
    iteration: int
    config: StormConfig


@dataclass
class IterationRecord:
    k: int
    x_before: np.ndarray
    x_after: np.ndarray
    delta_before: float
    delta_after: float
    model_decrease: float
    rho: float
    success: bool
    grad_norm_model: float
    cauchy_bound: float
    f0_est: float
    fs_est: float
    n_value_samples: int = 0
    n_grad_samples: int = 0
    f_true_before: float | None = None
    f_true_after: float | None = None
    grad_norm_true: float | None = None
    model_good: bool | None = None
    estimates_good: bool | None = None
    phi: float | None = None
    phi_next: float | None = None

    @property
    def v(self):
        if self.phi is None or self.phi_next is None:
            return None
        return self.phi_next - self.phi

    @property
    def cauchy_ok(self) -> bool:
        return self.model_decrease >= self.cauchy_bound - ASSERT_RTOL * abs(self.cauchy_bound)


def cauchy_bound(gradient, hessian_norm, radius, kappa_fcd) -> float:
    """Required model decrease ``kappa_fcd/2 * |g| * min(|g|/|H|, radius)``."""
    g = float(np.linalg.norm(gradient))
    reach = radius if hessian_norm == 0 else min(g / hessian_norm, radius)
    return 0.5 * kappa_fcd * g * reach


def cauchy_step(model: QuadraticModel, radius: float):
    """Minimizer of the model along ``-g`` inside the ball; returns ``(step, decrease)``."""
    if not radius > 0:
        raise PreconditionError("radius must be positive")
    if not model.is_finite():
        raise NumericError("model coefficients must be finite")
    g = model.gradient
    gnorm = float(np.linalg.norm(g))
    if gnorm == 0.0:
        return np.zeros_like(g), 0.0
    curv = float(g @ model.hessian @ g)
    t = radius if curv <= 0 else min(gnorm**3 / curv, radius)
    step = (-t / gnorm) * g
    decrease = -(float(g @ step) + 0.5 * float(step @ model.hessian @ step))
    return step, max(decrease, 0.0)


def rho_ratio(f0_est: float, fs_est: float, model_decrease: float) -> float:
    """Estimated over predicted reduction; ``-inf`` when nothing was predicted."""
    if not (math.isfinite(f0_est) and math.isfinite(fs_est) and math.isfinite(model_decrease)):
        raise NumericError("estimates and model decrease must be finite")
    if model_decrease < 0:
        raise PreconditionError("model decrease must be nonnegative")
    if model_decrease == 0:
        return -math.inf
    return (f0_est - fs_est) / model_decrease


def storm_iterate(state: StormState, model: QuadraticModel, estimates):
    """One acceptance test and radius update.

    ``estimates`` is either a pair ``(f0, fs)`` or a callable
    ``(x, x_plus_s) -> (f0, fs)`` evaluated once the step is known.
    Returns ``(new_state, record)``; referee fields of the record stay empty.
    """
    cfg = state.config
    x, delta = state.iterate, state.radius
    if model.hessian_norm() > cfg.kappa_bhm * (1 + ASSERT_RTOL):
        raise PreconditionError("model Hessian norm exceeds kappa_bhm")
    step, dec = cauchy_step(model, delta)
    trial = x + step
    if callable(estimates):
        f0, fs = estimates(x, trial)
    else:
        f0, fs = estimates
    rho = rho_ratio(float(f0), float(fs), dec)
    gnorm = float(np.linalg.norm(model.gradient))
    success = rho >= cfg.eta1 and gnorm >= cfg.eta2 * delta
    if success:
        x_new, delta_new = trial, min(cfg.gamma * delta, cfg.radius_cap)
    else:
        x_new, delta_new = x, delta / cfg.gamma
    rec = IterationRecord(
        k=state.iteration, x_before=x, x_after=x_new, delta_before=delta,
        delta_after=delta_new, model_decrease=dec, rho=rho, success=success,
        grad_norm_model=gnorm,
        cauchy_bound=cauchy_bound(model.gradient, model.hessian_norm(), delta, cfg.kappa_fcd),
        f0_est=float(f0), fs_est=float(fs),
    )
    return StormState(x_new, delta_new, state.iteration + 1, cfg), rec


@dataclass(frozen=True)
class PotentialSpec:
    """Weight ``nu`` of the objective in the potential, and the ratio ``zeta``."""

    nu: float
    zeta: float

    def __post_init__(self):
        if not 0 < self.nu < 1:
            raise ConfigurationError("nu must lie in (0, 1)")
        if not self.zeta > 0:
            raise ConfigurationError("zeta must be positive")

    @classmethod
    def default(cls, config: StormConfig) -> PotentialSpec:
        return cls(nu=320.0 / (320.0 + config.eta2), zeta=20.0 * config.kappa_eg)

    def violations(self, config: StormConfig, C1: float = 0.1) -> list[str]:
        """Inequalities this choice breaks; equality in the ``nu`` bound is allowed."""
        out = []
        g2 = config.gamma**2
        need = max(4 * g2 / (self.zeta * C1),
                   4 * g2 / (config.eta1 * config.eta2 * config.kappa_fcd),
                   g2 / config.kappa_ef)
        if self.nu / (1 - self.nu) < need * (1 - 1e-12):
            out.append(f"nu/(1-nu) = {self.nu / (1 - self.nu):.6g} < {need:.6g}")
        zmin = config.kappa_eg + max(config.eta2, config.kappa_bhm,
                                     8 * config.kappa_ef / (config.kappa_fcd * (1 - config.eta1)))
        if self.zeta < zmin:
            out.append(f"zeta = {self.zeta:.6g} < {zmin:.6g}")
        return out


def potential_value(f_true: float, delta: float, potential: PotentialSpec) -> float:
    """``nu * f + (1 - nu) * delta**2``."""
    if f_true < 0:
        raise PreconditionError("objective must be nonnegative for the potential")
    if delta < 0:
        raise PreconditionError("radius must be nonnegative")
    return potential.nu * f_true + (1.0 - potential.nu) * delta * delta


@dataclass(frozen=True)
class DriftConstants:
    theta: float
    zeta: float
    C1: float
    C1_max: float
    C2: float
    C3: float
    beta_min: float
    ab_rhs: float
    lipschitz: float

    def alpha_beta_ok(self, alpha: float, beta: float) -> bool:
        """Both probability conditions for the potential to drift down."""
        if not (0 < alpha <= 1 and 0 < beta <= 1) or alpha * beta <= 0.5:
            return False
        if beta < self.beta_min:
            return False
        denom = (1 - alpha) * (1 - beta)
        return denom == 0 or (alpha * beta - 0.5) / denom >= self.ab_rhs

    def alpha_min(self, beta: float) -> float:
        """Smallest ``alpha`` meeting the product condition for this ``beta``."""
        r = self.ab_rhs * (1 - beta)
        return (0.5 + r) / (beta + r)


def regime_violations(config: StormConfig) -> list[str]:
    out = []
    if config.kappa_ef != config.kappa_eg:
        out.append("kappa_ef == kappa_eg")
    if config.kappa_eg < 10:
        out.append("kappa_eg >= 10")
    if not math.isclose(config.eta1, 0.1):
        out.append("eta1 == 0.1")
    if not math.isclose(config.kappa_fcd, 0.5):
        out.append("kappa_fcd == 0.5")
    if config.gamma > 2:
        out.append("gamma <= 2")
    if not config.eta2 > 0.03:
        out.append("eta2 > 0.03")
    if config.eta2 > config.kappa_eg:
        out.append("eta2 <= kappa_eg")
    if config.kappa_bhm > 12 * config.kappa_ef:
        out.append("kappa_bhm <= 12*kappa_ef")
    return out


def drift_constants(config: StormConfig, lipschitz: float) -> DriftConstants:
    """Constants of the expected-decrease argument in the simplified regime.

    Raises ConfigurationError listing every regime inequality that fails.
    """
    bad = regime_violations(config)
    if bad:
        raise ConfigurationError("simplified constant regime needs: " + "; ".join(bad))
    L = float(lipschitz)
    keg, kef = config.kappa_eg, config.kappa_ef
    zeta = 20.0 * keg
    eta1, eta2, kfcd, kbhm = config.eta1, config.eta2, config.kappa_fcd, config.kappa_bhm
    C1_max = kfcd / 4 * max(kbhm / (kbhm + keg), 8 * kef / (8 * kef + kfcd * keg))
    C2 = 0.5 * eta1 * eta2 * kfcd * min(eta2 / kbhm, 1.0) - 2 * config.eps_F
    return DriftConstants(
        theta=1.0 / (1600.0 * keg),
        zeta=zeta,
        C1=0.1,
        C1_max=C1_max,
        C2=C2,
        C3=1.0 + 3.0 * L / (2.0 * zeta),
        beta_min=(8800 * keg + L + 8 * eta2) / (8800 * keg + L + 9 * eta2),
        ab_rhs=10.0 + 30.0 * L / (40.0 * keg),
        lipschitz=L,
    )


def first_order_bound(alpha: float, beta: float, phi0: float, kappa_eg: float,
                      kappa_ef: float, delta0: float, epsilon: float) -> float:
    """Upper bound on the expected number of iterations to reach ``|grad f| <= epsilon``.

    ``ab/(2ab-1) * (20*phi0*kappa_eg/(theta*eps**2) + 20*delta0*kappa_eg/eps + 1)``
    with ``theta = 1/(1600*kappa_ef)`` and ``ab = alpha*beta``.
    """
    ab = alpha * beta
    if not ab > 0.5:
        raise DomainError(f"bound needs alpha*beta > 1/2, got {ab}")
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    theta = 1.0 / (1600.0 * kappa_ef)
    return ab / (2 * ab - 1) * (20 * phi0 * kappa_eg / (theta * epsilon**2)
                                + 20 * delta0 * kappa_eg / epsilon + 1)


@dataclass
class StormResult:
    state: StormState
    records: list[IterationRecord]
    T_eps: int | None
    timeout: bool
    f_final: float | None = None
    grad_norm_final: float | None = None
    value_samples: int = 0
    grad_samples: int = 0
    box_exits: int = 0
    extra: dict = field(default_factory=dict)


def run_storm(oracle, x0, config: StormConfig, epsilon: float, targets, *,
              referee=None, potential: PotentialSpec | None = None, seed=None,
              rng=None, model_builder=None, estimate_builder=None,
              instrument: bool = True) -> StormResult:
    """Iterate until the referee gradient norm drops to ``epsilon`` or ``max_iters``.

    Without a referee there is no way to detect stationarity, so the loop runs
    to ``max_iters`` and ``T_eps`` is ``None``. With one, every record carries
    true objective values, the potential and (if ``instrument``) the model and
    estimate accuracy events.
    """
    from . import oracles as _or

    if not epsilon > 0:
        raise PreconditionError("epsilon must be positive")
    rng = np.random.default_rng(seed) if rng is None else rng
    model_builder = _or.build_saa_model if model_builder is None else model_builder
    estimate_builder = _or.build_estimates if estimate_builder is None else estimate_builder
    potential = PotentialSpec.default(config) if potential is None else potential
    box = getattr(referee, "domain_box", None)

    state = StormState(np.array(x0, dtype=float), config.delta0, 0, config)
    records: list[IterationRecord] = []
    nv = ng = exits = 0
    f_cur = g_cur = None
    if referee is not None:
        f_cur = float(referee.f_exact(state.iterate))
        g_cur = float(np.linalg.norm(referee.grad_exact(state.iterate)))
        if g_cur <= epsilon:
            return StormResult(state, records, 0, False, f_cur, g_cur)

    T_eps = None
    for _ in range(config.max_iters):
        x, delta = state.iterate, state.radius
        model, counts = model_builder(oracle, x, delta, targets, rng)
        est = {}

        def estimates(xa, xb):
            f0, fs, n = estimate_builder(oracle, xa, xb, delta, targets, rng)
            est["n"] = n
            est["s"] = xb - xa
            return f0, fs

        state, rec = storm_iterate(state, model, estimates)
        rec.n_value_samples = counts.value + 2 * est["n"]
        rec.n_grad_samples = counts.gradient
        nv += rec.n_value_samples
        ng += rec.n_grad_samples
        if referee is not None:
            f_new = float(referee.f_exact(state.iterate)) if rec.success else f_cur
            g_new = (float(np.linalg.norm(referee.grad_exact(state.iterate)))
                     if rec.success else g_cur)
            rec.f_true_before, rec.f_true_after = f_cur, f_new
            rec.grad_norm_true = g_cur
            if f_cur >= 0 and f_new >= 0:
                rec.phi = potential_value(f_cur, delta, potential)
                rec.phi_next = potential_value(f_new, state.radius, potential)
            if instrument:
                rec.model_good, rec.estimates_good = _or.classify_events(
                    model, x, est["s"], (rec.f0_est, rec.fs_est), delta, referee, targets)
            if box is not None and rec.success:
                lo, hi = box
                if np.any(state.iterate < lo) or np.any(state.iterate > hi):
                    exits += 1
            f_cur, g_cur = f_new, g_new
            records.append(rec)
            if g_cur <= epsilon:
                T_eps = state.iteration
                break
        else:
            records.append(rec)
    timeout = referee is not None and T_eps is None
    return StormResult(state, records, T_eps, timeout, f_cur, g_cur, nv, ng, exits)


@dataclass
class GuaranteeReport:
    checked_success_guarantee: int = 0
    success_guarantee_violations: int = 0
    checked_decrease: int = 0
    decrease_violations: int = 0
    cauchy_violations: int = 0

    @property
    def ok(self) -> bool:
        return (self.success_guarantee_violations == 0 and self.decrease_violations == 0
                and self.cauchy_violations == 0)

    def merge(self, other: GuaranteeReport) -> GuaranteeReport:
        return GuaranteeReport(*(a + b for a, b in zip(
            (self.checked_success_guarantee, self.success_guarantee_violations,
             self.checked_decrease, self.decrease_violations, self.cauchy_violations),
            (other.checked_success_guarantee, other.success_guarantee_violations,
             other.checked_decrease, other.decrease_violations, other.cauchy_violations))))


def guarantee_checks(records, config: StormConfig, rtol: float = 1e-8) -> GuaranteeReport:
    """Count iterations that contradict the success and decrease guarantees.

    Success guarantee: a fully linear model with accurate estimates and
    ``delta <= min(1/kappa_bhm, 1/eta2, kappa_fcd*(1-eta1)/(8*kappa_ef)) * |g|``
    must be accepted. Decrease guarantee: an accepted step with accurate
    estimates lowers the true objective by at least ``C2 * delta**2``; it is
    only checked when ``eps_F`` is small enough for ``C2`` to be positive.
    """
    rep = GuaranteeReport()
    small = min(1.0 / config.kappa_bhm, 1.0 / config.eta2,
                config.kappa_fcd * (1 - config.eta1) / (8 * config.kappa_ef))
    C2 = (0.5 * config.eta1 * config.eta2 * config.kappa_fcd
          * min(config.eta2 / config.kappa_bhm, 1.0) - 2 * config.eps_F)
    for r in records:
        if not r.cauchy_ok:
            rep.cauchy_violations += 1
        if r.model_good is None or r.estimates_good is None:
            continue
        if (r.model_good and r.estimates_good and config.eps_F <= config.kappa_ef
                and r.delta_before <= small * r.grad_norm_model):
            rep.checked_success_guarantee += 1
            if not r.success:
                rep.success_guarantee_violations += 1
        if C2 > 0 and r.success and r.estimates_good and r.f_true_after is not None:
            rep.checked_decrease += 1
            change = r.f_true_after - r.f_true_before
            limit = -C2 * r.delta_before**2
            scale = abs(limit) + abs(r.f_true_before)
            if change > limit + rtol * scale:
                rep.decrease_violations += 1
    return rep
