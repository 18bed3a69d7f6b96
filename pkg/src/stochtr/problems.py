"""Test problems with exact referee values and configurable noise."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.special import expit

from .errors import ConfigurationError
from .oracles import StochasticOracle, gaussian_oracle


@dataclass(frozen=True)
class NoiseSpec:
    family: str = "gaussian"
    sigma: float = 0.0
    sigma_g: float = 0.0


@dataclass(frozen=True)
class TestProblem:
    """Objective with exact values, a working box and a noisy oracle.

    ``f_exact`` and ``grad_exact`` accept a point or a batch of points
    stacked along the first axis.
    """

    __test__ = False  # keep pytest from collecting this class

    name: str
    dim: int
    f_exact: Callable
    grad_exact: Callable
    lipschitz_L: float
    f_max: float
    domain_box: tuple
    x0: np.ndarray
    noise: NoiseSpec
    oracle: StochasticOracle = field(repr=False, compare=False)
    seed: int = 0

    def in_box(self, x) -> bool:
        lo, hi = self.domain_box
        return bool(np.all(x >= lo) and np.all(x <= hi))

    def random_points(self, count: int, rng) -> np.ndarray:
        lo, hi = self.domain_box
        return rng.uniform(lo, hi, size=(count, self.dim))


def _box(dim, half_width):
    return (np.full(dim, -half_width), np.full(dim, half_width))


def make_noisy_quadratic(dim: int, condition_number: float, sigma: float = 0.0,
                         sigma_g: float = 0.0, seed: int = 0,
                         box_half_width: float = 2.0,
                         budget_cap: int | None = None) -> TestProblem:
    """``f(x) = x'Dx / 2`` with ``D`` log-spaced on ``[1, condition_number]``."""
    if dim < 1:
        raise ConfigurationError("dim must be at least 1")
    if not condition_number >= 1:
        raise ConfigurationError("condition_number must be at least 1")
    if sigma < 0 or sigma_g < 0:
        raise ConfigurationError("noise levels must be nonnegative")
    D = np.geomspace(1.0, condition_number, dim)

    def f(x):
        x = np.asarray(x, dtype=float)
        return 0.5 * np.sum(D * x * x, axis=-1)

    def grad(x):
        return D * np.asarray(x, dtype=float)

    box = _box(dim, box_half_width)
    f_max = 0.5 * float(D.sum()) * box_half_width**2
    return TestProblem(
        "quadratic", dim, f, grad, float(D.max()), f_max, box, np.ones(dim),
        NoiseSpec("gaussian", sigma, sigma_g),
        gaussian_oracle(f, grad, sigma, sigma_g, dim, budget_cap), seed,
    )


def make_noisy_rosenbrock(sigma: float = 0.0, sigma_g: float = 0.0, seed: int = 0,
                          budget_cap: int | None = None) -> TestProblem:
    """``100 (y - x^2)^2 + (1 - x)^2`` on the box ``[-2, 2]^2``."""

    def f(z):
        z = np.asarray(z, dtype=float)
        x, y = z[..., 0], z[..., 1]
        return 100.0 * (y - x * x) ** 2 + (1.0 - x) ** 2

    def grad(z):
        z = np.asarray(z, dtype=float)
        x, y = z[..., 0], z[..., 1]
        r = y - x * x
        return np.stack([-400.0 * x * r - 2.0 * (1.0 - x), 200.0 * r], axis=-1)

    # Hessian [[1200x^2 - 400y + 2, -400x], [-400x, 200]]; Gershgorin on the box:
    # row 1 at x=2, y=-2 gives 4800 + 800 + 2 + 800.
    L = 6402.0
    f_max = 100.0 * 36.0 + 9.0
    return TestProblem(
        "rosenbrock", 2, f, grad, L, f_max, _box(2, 2.0), np.array([-1.2, 1.0]),
        NoiseSpec("gaussian", sigma, sigma_g),
        gaussian_oracle(f, grad, sigma, sigma_g, 2, budget_cap), seed,
    )


def _logistic_parts(A, y, ridge):
    """Per-sample losses/gradients and full-batch referee functions."""
    n = len(y)

    def losses(w, idx):
        return np.logaddexp(0.0, -y[idx] * (A[idx] @ w))

    def grads(w, idx):
        m = -y[idx] * expit(-y[idx] * (A[idx] @ w))
        return m[:, None] * A[idx]

    def f(w):
        w = np.asarray(w, dtype=float)
        z = np.logaddexp(0.0, -(w @ A.T) * y)
        return z.mean(axis=-1) + 0.5 * ridge * np.sum(w * w, axis=-1)

    def grad(w):
        w = np.asarray(w, dtype=float)
        m = -y * expit(-y * (w @ A.T))
        return m @ A / n + ridge * w

    return losses, grads, f, grad


def make_finite_sum_logistic(n_samples: int, dim: int, subsample_size: int, seed: int = 0,
                             ridge: float = 1e-2, zero_features: bool = False,
                             box_half_width: float = 5.0, n_probe: int = 32,
                             budget_cap: int | None = 100_000):
    """Ridge-regularised logistic regression on synthetic data.

    Each oracle query averages over minibatches of ``subsample_size`` rows
    drawn without replacement. Variance bounds are the largest exact minibatch
    variances over ``n_probe`` points of the box, doubled for slack.
    Returns ``(problem, oracle)``; ``problem.oracle`` is the same object.
    """
    if not 1 <= subsample_size <= n_samples:
        raise ConfigurationError("need 1 <= subsample_size <= n_samples")
    if dim < 1 or ridge <= 0:
        raise ConfigurationError("need dim >= 1 and ridge > 0")
    rng = np.random.default_rng(seed)
    if zero_features:
        A = np.zeros((n_samples, dim))
    else:
        A = rng.standard_normal((n_samples, dim)) / math.sqrt(dim)
    w_star = rng.standard_normal(dim)
    y = np.where(A @ w_star + 0.1 * rng.standard_normal(n_samples) >= 0, 1.0, -1.0)
    losses, grads, f, grad = _logistic_parts(A, y, ridge)
    N, b = n_samples, subsample_size
    everything = np.arange(N)

    def batch(rng):
        return np.sort(rng.choice(N, size=b, replace=False))

    def value_sampler(w, rng):
        w = np.asarray(w, dtype=float)
        return float(losses(w, batch(rng)).mean() + 0.5 * ridge * (w @ w))

    def gradient_sampler(w, rng):
        w = np.asarray(w, dtype=float)
        return grads(w, batch(rng)).mean(axis=0) + ridge * w

    def hessian_sampler(w, rng):
        idx = batch(rng)
        s = expit(A[idx] @ np.asarray(w, dtype=float))
        return (A[idx].T * (s * (1 - s))) @ A[idx] / b + ridge * np.eye(dim)

    var_v = var_g = 0.0
    if b < N:
        fpc = (1.0 - b / N) / b
        probes = np.vstack([np.zeros(dim),
                            rng.uniform(-box_half_width, box_half_width, (n_probe, dim))])
        for w in probes:
            var_v = max(var_v, fpc * losses(w, everything).var(ddof=1))
            var_g = max(var_g, fpc * grads(w, everything).var(axis=0, ddof=1).sum())
        var_v, var_g = 2.0 * var_v, 2.0 * var_g

    if b == N:
        # full batch: exact answers at any sample size
        value_mean = lambda w, n, rng: float(f(w))
        gradient_mean = lambda w, n, rng: grad(w)
    else:
        value_mean = gradient_mean = None
    oracle = StochasticOracle(value_sampler, gradient_sampler, var_v, var_g, value_mean,
                              gradient_mean, hessian_sampler, budget_cap)
    row2 = float(np.max(np.sum(A * A, axis=1)))
    L = 0.25 * row2 + ridge
    f_max = (math.log1p(math.exp(math.sqrt(row2 * dim) * box_half_width))
             + 0.5 * ridge * dim * box_half_width**2)
    problem = TestProblem(
        "logistic", dim, f, grad, L, f_max, _box(dim, box_half_width), np.zeros(dim),
        NoiseSpec("minibatch", math.sqrt(var_v), math.sqrt(var_g)), oracle, seed,
    )
    return problem, oracle


PROBLEMS = ("quadratic", "rosenbrock", "logistic")


def make_problem(name: str, *, dim: int = 2, cond: float = 10.0, sigma: float = 0.0,
                 sigma_g: float = 0.0, seed: int = 0, n_samples: int = 200,
                 subsample_size: int = 20, budget_cap: int | None = None) -> TestProblem:
    """Build a problem by name, as the command line does."""
    if name == "quadratic":
        return make_noisy_quadratic(dim, cond, sigma, sigma_g, seed, budget_cap=budget_cap)
    if name == "rosenbrock":
        return make_noisy_rosenbrock(sigma, sigma_g, seed, budget_cap=budget_cap)
    if name == "logistic":
        cap = 100_000 if budget_cap is None else budget_cap
        return make_finite_sum_logistic(n_samples, dim, subsample_size, seed,
                                        budget_cap=cap)[0]
    raise ConfigurationError(f"unknown problem {name!r}; choose from {PROBLEMS}")
