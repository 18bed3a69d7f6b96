"""Noisy oracles and the sample-average models and estimates built from them.

An oracle answers *queries*: one query returns the average of ``n``
independent noisy draws at a point. Sample sizes follow distribution-free
Chebyshev rules driven by the configured variance bounds, so the accuracy
events hold with at least the requested probability whatever the noise law.
Oracles that know the exact law of their ``n``-draw average (Gaussian noise)
return it in O(1); others loop over draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Callable, NamedTuple

import numpy as np
from scipy.stats import norm, qmc

from .errors import BudgetError, CapabilityError, ConfigurationError, PreconditionError
from .trust_region import QuadraticModel

# Explicit draw loops beyond this size are refused even without a budget cap.
MAX_EXPLICIT_DRAWS = 10_000_000
BALL_POINTS = 16


class SampleCounts(NamedTuple):
    value: int
    gradient: int


@dataclass
class StochasticOracle:
    """Noisy zeroth- and first-order information about an objective.

    ``value_sampler(x, rng)`` returns one draw of ``f(x, xi)``;
    ``gradient_sampler(x, rng)`` one draw of its gradient. The optional
    ``value_mean(x, n, rng)`` / ``gradient_mean(x, n, rng)`` return a draw
    from the exact law of an ``n``-sample average. ``gradient_variance_bound``
    bounds the trace of the gradient-noise covariance.
    """

    value_sampler: Callable | None
    gradient_sampler: Callable | None = None
    value_variance_bound: float = 0.0
    gradient_variance_bound: float = 0.0
    value_mean: Callable | None = None
    gradient_mean: Callable | None = None
    hessian_sampler: Callable | None = None
    budget_cap: int | None = None

    def __post_init__(self):
        if not (math.isfinite(self.value_variance_bound)
                and math.isfinite(self.gradient_variance_bound)):
            raise ConfigurationError("variance bounds must be finite")
        if self.value_variance_bound < 0 or self.gradient_variance_bound < 0:
            raise ConfigurationError("variance bounds must be nonnegative")

    @property
    def has_gradient(self) -> bool:
        return self.gradient_sampler is not None or self.gradient_mean is not None

    def _check_budget(self, n, closed_form):
        if self.budget_cap is not None and n > self.budget_cap:
            raise BudgetError(n, self.budget_cap)
        if not closed_form and n > MAX_EXPLICIT_DRAWS:
            raise BudgetError(n, MAX_EXPLICIT_DRAWS)

    def value(self, x, n: int, rng) -> float:
        """One query: the average of ``n`` value draws at ``x``."""
        self._check_budget(n, self.value_mean is not None)
        if self.value_mean is not None:
            return float(self.value_mean(x, n, rng))
        total = 0.0
        for _ in range(n):
            total += float(self.value_sampler(x, rng))
        return total / n

    def gradient(self, x, n: int, rng) -> np.ndarray:
        """One query: the average of ``n`` gradient draws at ``x``."""
        if not self.has_gradient:
            raise CapabilityError("oracle has no gradient sampler")
        self._check_budget(n, self.gradient_mean is not None)
        if self.gradient_mean is not None:
            return np.asarray(self.gradient_mean(x, n, rng), dtype=float)
        total = np.asarray(self.gradient_sampler(x, rng), dtype=float).copy()
        for _ in range(n - 1):
            total += self.gradient_sampler(x, rng)
        return total / n

    def hessian(self, x, n: int, rng) -> np.ndarray:
        if self.hessian_sampler is None:
            raise CapabilityError("oracle has no Hessian sampler")
        total = np.asarray(self.hessian_sampler(x, rng), dtype=float).copy()
        for _ in range(n - 1):
            total += self.hessian_sampler(x, rng)
        return total / n


def gaussian_oracle(f, grad, sigma: float, sigma_g: float, dim: int,
                    budget_cap: int | None = None) -> StochasticOracle:
    """Additive Gaussian noise: ``N(0, sigma**2)`` on values, ``N(0, sigma_g**2/dim I)`` on gradients."""
    sg = sigma_g / math.sqrt(dim)

    def value_sampler(x, rng):
        return f(x) + sigma * rng.standard_normal() if sigma else f(x)

    def gradient_sampler(x, rng):
        return grad(x) + sg * rng.standard_normal(dim) if sigma_g else grad(x)

    def value_mean(x, n, rng):
        return f(x) + (sigma / math.sqrt(n)) * rng.standard_normal() if sigma else f(x)

    def gradient_mean(x, n, rng):
        if not sigma_g:
            return grad(x)
        return grad(x) + (sg / math.sqrt(n)) * rng.standard_normal(dim)

    return StochasticOracle(value_sampler, gradient_sampler, sigma**2, sigma_g**2,
                            value_mean, gradient_mean, budget_cap=budget_cap)


@dataclass(frozen=True)
class AccuracyTargets:
    """Probabilities and tolerances the models and estimates should meet.

    ``rule`` selects the sample-size rule: ``"chebyshev"`` (default, needs only
    variance bounds) or ``"subgaussian"`` (tighter, assumes sub-Gaussian noise).
    """

    alpha: float
    beta: float
    kappa_ef: float = 10.0
    kappa_eg: float = 10.0
    eps_F: float = 1.5625e-5
    rule: str = "chebyshev"

    def __post_init__(self):
        if not (0 < self.alpha <= 1 and 0 < self.beta <= 1):
            raise ConfigurationError("alpha and beta must lie in (0, 1]")
        if self.alpha * self.beta <= 0.5:
            raise ConfigurationError("alpha * beta must exceed 1/2")
        if self.kappa_ef <= 0 or self.kappa_eg <= 0 or self.eps_F < 0:
            raise ConfigurationError("kappa_ef, kappa_eg > 0 and eps_F >= 0 required")
        if self.rule not in ("chebyshev", "subgaussian"):
            raise ConfigurationError(f"unknown sample-size rule {self.rule!r}")

    @classmethod
    def for_config(cls, config, alpha, beta, rule="chebyshev"):
        return cls(alpha, beta, config.kappa_ef, config.kappa_eg, config.eps_F, rule)


@dataclass(frozen=True)
class CorruptionSpec:
    """Each query fails independently with ``failure_prob``.

    A failed query returns ``corruption_generator(clean, rng)`` in place of the
    clean answer; the default adds ``shift`` to every component.
    """

    failure_prob: float
    corruption_generator: Callable | None = None
    shift: float = 1e6

    def __post_init__(self):
        if not 0 <= self.failure_prob < 1:
            raise ConfigurationError("failure_prob must lie in [0, 1)")

    def corrupted(self, clean, rng):
        if self.corruption_generator is not None:
            return self.corruption_generator(clean, rng)
        return clean + self.shift


def _ceil(x: float) -> int:
    if not math.isfinite(x):
        raise BudgetError(math.inf, None)
    # guard against 10.000000000000002-style round-off in the rule arithmetic
    return max(1, math.ceil(x * (1 - 1e-12)))


def gradient_sample_size(var_bound, fail_prob, kappa_eg, radius, rule="chebyshev") -> int:
    """Draws so that ``|g - grad f| <= kappa_eg * radius`` fails w.p. <= ``fail_prob``."""
    if var_bound == 0:
        return 1
    if fail_prob <= 0:
        raise ConfigurationError("a noisy gradient cannot be accurate with probability 1")
    tol2 = (kappa_eg * radius) ** 2
    if rule == "chebyshev":
        return _ceil(var_bound / (fail_prob * tol2))
    return _ceil(var_bound * (1 + math.sqrt(2 * math.log(1 / fail_prob))) ** 2 / tol2)


def value_sample_size(var_bound, fail_prob, tol, rule="chebyshev") -> int:
    """Draws so that a value average misses by more than ``tol`` w.p. <= ``fail_prob``."""
    if var_bound == 0:
        return 1
    if fail_prob <= 0:
        raise ConfigurationError("a noisy value cannot be accurate with probability 1")
    if tol <= 0:
        raise ConfigurationError("noisy values need a positive accuracy tolerance")
    if rule == "chebyshev":
        return _ceil(var_bound / (fail_prob * tol * tol))
    return _ceil(2 * var_bound * math.log(2 / fail_prob) / (tol * tol))


def build_saa_model(oracle: StochasticOracle, center, radius: float,
                    targets: AccuracyTargets, rng, hessian_samples: int = 0,
                    kappa_bhm: float = 1.0):
    """First-order sample-average model on the ball ``B(center, radius)``.

    Returns ``(QuadraticModel, SampleCounts)``. With ``hessian_samples > 0``
    and a Hessian sampler, the averaged Hessian is scaled down to spectral
    norm ``kappa_bhm`` if needed; otherwise ``H = 0``.
    """
    if not oracle.has_gradient:
        raise CapabilityError("SAA models need a gradient sampler")
    if not radius > 0:
        raise PreconditionError("radius must be positive")
    fail = 1.0 - targets.alpha
    n_g = gradient_sample_size(oracle.gradient_variance_bound, fail, targets.kappa_eg,
                               radius, targets.rule)
    n_v = value_sample_size(oracle.value_variance_bound, fail,
                            targets.kappa_ef * radius**2, targets.rule)
    x = np.asarray(center, dtype=float)
    g = oracle.gradient(x, n_g, rng)
    f = oracle.value(x, n_v, rng)
    H = None
    if hessian_samples > 0:
        H = oracle.hessian(x, hessian_samples, rng)
        H = 0.5 * (H + H.T)
        hn = np.linalg.norm(H, 2)
        if hn > kappa_bhm:
            H *= kappa_bhm / hn
    return QuadraticModel(x, f, g, H), SampleCounts(n_v, n_g)


def estimate_sample_size(oracle: StochasticOracle, radius: float, targets: AccuracyTargets) -> int:
    """Per-point draws; each point gets half of the ``1 - beta`` failure budget."""
    if oracle.value_variance_bound > 0 and targets.eps_F == 0:
        raise ConfigurationError("eps_F = 0 is infeasible with a noisy oracle")
    return value_sample_size(oracle.value_variance_bound, 0.5 * (1.0 - targets.beta),
                             targets.eps_F * radius**2, targets.rule)


def build_estimates(oracle: StochasticOracle, x, x_plus_s, radius: float,
                    targets: AccuracyTargets, rng):
    """Independent sample averages at ``x`` and ``x + s``; returns ``(f0, fs, n)``."""
    if not radius > 0:
        raise PreconditionError("radius must be positive")
    n = estimate_sample_size(oracle, radius, targets)
    f0 = oracle.value(np.asarray(x, dtype=float), n, rng)
    fs = oracle.value(np.asarray(x_plus_s, dtype=float), n, rng)
    return f0, fs, n


@dataclass
class CorruptedOracle(StochasticOracle):
    """Oracle whose queries fail independently; see :func:`corrupt`."""

    base: StochasticOracle | None = None
    spec: CorruptionSpec | None = None
    failures: int = field(default=0)
    queries: int = field(default=0)

    def _maybe(self, clean, rng):
        self.queries += 1
        if self.spec.failure_prob > 0 and rng.random() < self.spec.failure_prob:
            self.failures += 1
            return self.spec.corrupted(clean, rng)
        return clean

    def value(self, x, n, rng):
        return float(self._maybe(self.base.value(x, n, rng), rng))

    def gradient(self, x, n, rng):
        return np.asarray(self._maybe(self.base.gradient(x, n, rng), rng), dtype=float)


def corrupt(oracle: StochasticOracle, spec: CorruptionSpec) -> CorruptedOracle:
    """Wrap ``oracle`` so each query is replaced by a corrupted answer w.p. ``failure_prob``."""
    return CorruptedOracle(
        oracle.value_sampler, oracle.gradient_sampler, oracle.value_variance_bound,
        oracle.gradient_variance_bound, oracle.value_mean, oracle.gradient_mean,
        oracle.hessian_sampler, oracle.budget_cap, base=oracle, spec=spec,
    )


@lru_cache(maxsize=None)
def ball_points(dim: int, count: int = BALL_POINTS) -> np.ndarray:
    """Fixed low-discrepancy points in the closed unit ball of ``R^dim``."""
    u = qmc.Halton(d=dim + 1, scramble=False).random(count + 1)[1:]
    z = norm.ppf(u[:, :dim])
    nz = np.linalg.norm(z, axis=1, keepdims=True)
    # a coordinate of 1/2 maps to a zero direction; send it along the first axis
    z[nz[:, 0] == 0, 0] = 1.0
    z /= np.where(nz == 0, 1.0, nz)
    pts = z * u[:, dim:] ** (1.0 / dim)
    pts.setflags(write=False)
    return pts


def _f_batch(referee, Y):
    out = np.asarray(referee.f_exact(Y), dtype=float)
    if out.shape == (len(Y),):
        return out
    return np.array([float(referee.f_exact(y)) for y in Y])


def classify_events(model: QuadraticModel, x, s, estimates, radius: float, referee,
                    targets: AccuracyTargets):
    """Referee verdict ``(I_k, J_k)`` on model and estimate accuracy.

    ``I_k``: gradient error within ``kappa_eg * radius`` and value error within
    ``kappa_ef * radius**2`` at ``x``, ``x + s`` and 16 fixed points of the ball.
    ``J_k``: both estimates within ``eps_F * radius**2`` of the true values.
    """
    if referee is None:
        raise CapabilityError("classifying accuracy events needs a referee")
    x = np.asarray(x, dtype=float)
    s = np.asarray(s, dtype=float)
    g_err = np.linalg.norm(referee.grad_exact(x) - model.gradient)
    offsets = np.vstack([np.zeros_like(x), s, radius * ball_points(x.size)])
    fy = _f_batch(referee, x + offsets)
    my = model(x + offsets - model.center)
    I = bool(g_err <= targets.kappa_eg * radius
             and np.all(np.abs(fy - my) <= targets.kappa_ef * radius**2))
    f0, fs = estimates
    tol = targets.eps_F * radius**2
    J = bool(abs(f0 - fy[0]) <= tol and abs(fs - fy[1]) <= tol)
    return I, J


def fully_linear_sufficient(lipschitz: float, targets: AccuracyTargets) -> bool:
    """Whether ``kappa_ef >= L/2 + kappa_eg``.

    For a zero-Hessian model with exact value and a gradient within
    ``kappa_eg * radius``, this makes the ball-wide value condition automatic.
    """
    return targets.kappa_ef >= 0.5 * lipschitz + targets.kappa_eg
