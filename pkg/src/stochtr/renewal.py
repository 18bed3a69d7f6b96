"""Renewal-reward machinery for a potential/radius process.

A radius process ``Delta_k`` lives on the geometric grid
``delta_eps * exp(lambda * j)`` and moves one grid step up with probability
``p`` (capped at ``delta_max``) or one step down otherwise. Iterations with
``Delta_k >= delta_eps`` are renewals. A potential ``Phi_k`` drains at an
expected rate of at least ``theta * h(Delta_k)`` per step. The functions here
simulate both processes and evaluate the expected-stopping-time bounds they
must satisfy.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import kernels
from .errors import ConfigurationError, DomainError, SimulationTimeout

# Relative tolerance when deciding whether a radius sits on the grid.
GRID_RTOL = 1e-9
# Table depth below delta0 for h lookups; deeper indices reuse the bottom value,
# which overstates the drift and so keeps the process admissible.
H_TABLE_DEPTH = 4096
CAP_MULTIPLIER = 1000


def _grid_index(value, base, lam, what):
    x = math.log(value / base) / lam
    j = round(x)
    if abs(x - j) > GRID_RTOL * max(1.0, abs(x)):
        raise ConfigurationError(
            f"{what}={value!r} is not delta_eps * exp(lambda * j) for integer j"
        )
    return int(j)


@dataclass(frozen=True)
class WalkConfig:
    """Parameters of the birth-death radius walk."""

    p: float
    lam: float
    delta0: float
    delta_eps: float
    delta_max: float
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.p <= 1.0:
            raise ConfigurationError(f"p must lie in [0, 1], got {self.p}")
        if not self.lam > 0:
            raise ConfigurationError(f"lambda must be positive, got {self.lam}")
        if not (self.delta0 > 0 and self.delta_eps > 0):
            raise ConfigurationError("delta0 and delta_eps must be positive")
        if self.delta_max < self.delta_eps or self.delta_max < self.delta0:
            raise ConfigurationError("delta_max must be >= delta_eps and >= delta0")
        self.j0
        self.jmax

    @classmethod
    def from_gamma(cls, p, gamma, delta_eps, i0=0, imax=0, seed=0):
        """Build a config on the grid ``delta_eps * gamma**i``."""
        return cls(p=p, lam=math.log(gamma), delta0=delta_eps * gamma**i0,
                   delta_eps=delta_eps, delta_max=delta_eps * gamma**imax, seed=seed)

    @property
    def j0(self) -> int:
        return _grid_index(self.delta0, self.delta_eps, self.lam, "delta0")

    @property
    def jmax(self) -> int:
        return _grid_index(self.delta_max, self.delta_eps, self.lam, "delta_max")

    def radius(self, j):
        """Grid index (scalar or array) to radius value."""
        return self.delta_eps * np.exp(self.lam * np.asarray(j, dtype=float))


@dataclass(frozen=True)
class DriftSpec:
    """Required expected decrease ``theta * h(delta)`` of the potential."""

    theta: float
    h: Callable[[float], float]
    phi0: float
    phi_max: float = math.inf

    def __post_init__(self):
        if not self.theta > 0:
            raise ConfigurationError(f"theta must be positive, got {self.theta}")
        if not 0.0 <= self.phi0 <= self.phi_max:
            raise ConfigurationError("need 0 <= phi0 <= phi_max")

    def table(self, cfg: WalkConfig, depth: int = H_TABLE_DEPTH):
        """Evaluate ``h`` on grid indices ``jlo..jmax``; returns ``(jlo, values)``.

        Raises ConfigurationError if ``h`` is not positive and nondecreasing there.
        """
        base = min(cfg.j0, 0)
        jlo = base - depth
        radii = cfg.radius(np.arange(jlo, cfg.jmax + 1))
        vals = np.array([float(self.h(r)) for r in radii])
        pos = vals > 0
        if not pos[depth:].all():
            raise ConfigurationError("h must be positive on the radius grid")
        # very small radii may underflow h to zero; drop that tail
        cut = int(np.flatnonzero(~pos)[-1]) + 1 if not pos.all() else 0
        vals, jlo = vals[cut:], jlo + cut
        if np.any(np.diff(vals) < 0):
            raise ConfigurationError("h must be nondecreasing on the radius grid")
        return jlo, vals


@dataclass
class RenewalTrace:
    """Renewal times of a radius trace and the counts derived from them.

    ``arrival_times[0]`` is the conventional ``A_0 = 0``; ``start_class[n]``
    records whether the radius at ``A_n`` (the start of interarrival ``n+1``)
    was above (+1), at (0) or below (-1) the threshold.
    """

    arrival_times: np.ndarray
    interarrivals: np.ndarray
    count_at_stop: int
    stop_time: int
    start_class: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=np.int8))

    def counting(self, k: int) -> int:
        """Number of renewals ``N(k) = max{n : A_n <= k}``."""
        return int(np.searchsorted(self.arrival_times, k, side="right")) - 1

    def conditional_means(self):
        """Mean interarrival split by where the radius started each one."""
        out = {}
        for name, code in (("above", 1), ("at", 0), ("below", -1)):
            sel = self.interarrivals[self.start_class == code]
            out[name] = (float(sel.mean()) if sel.size else math.nan, int(sel.size))
        return out

    def lag1_autocorrelation(self) -> float:
        tau = self.interarrivals.astype(float)
        if tau.size < 3 or tau.std() == 0:
            return math.nan
        return float(np.corrcoef(tau[:-1], tau[1:])[0, 1])


@dataclass
class PhiDeltaTrace:
    """Per-iteration record of potential, radius and step outcome.

    ``phi`` and ``delta`` hold states ``0..T``; ``v`` and ``success`` hold the
    ``T`` transitions between them. ``model_good``/``estimates_good`` are filled
    only by instrumented optimizer runs.
    """

    phi: np.ndarray
    delta: np.ndarray
    v: np.ndarray
    success: np.ndarray
    model_good: np.ndarray | None = None
    estimates_good: np.ndarray | None = None

    def __len__(self):
        return len(self.v)


@dataclass(frozen=True)
class StopRule:
    """Stop once ``phi <= phi_level`` or, if set, once ``k >= max_k``.

    Instances run inside the compiled kernel. Any other callable taking
    ``(phi, delta, k)`` is accepted by :func:`simulate_phi_delta` too, but runs
    on a Python loop.
    """

    phi_level: float = 0.0
    max_k: int | None = None

    def __call__(self, phi, delta, k):
        return phi <= self.phi_level or (self.max_k is not None and k >= self.max_k)


@dataclass(frozen=True)
class TwoPointIncrements:
    """Default potential increments.

    With probability ``q`` the potential drops by ``2*d/q``; otherwise it rises
    by ``d/(1-q)``, where ``d = theta*h(delta)``. The mean is exactly ``-d`` and
    both moves are bounded.
    """

    q: float = 0.75

    def __post_init__(self):
        if not 0.0 < self.q < 1.0:
            raise ConfigurationError("q must lie in (0, 1)")


@dataclass(frozen=True)
class DeterministicIncrements:
    """Potential drops by exactly ``theta*h(delta)`` every step."""


def simulate_walk(cfg: WalkConfig, horizon: int, rng=None) -> np.ndarray:
    """Radius values ``Delta_0..Delta_{horizon-1}`` of one walk."""
    if horizon < 1:
        raise ConfigurationError("horizon must be at least 1")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    j = kernels.walk(rng, cfg.j0, cfg.jmax, float(cfg.p), int(horizon))
    return cfg.radius(j)


def walk_indices(cfg: WalkConfig, horizon: int, rng=None) -> np.ndarray:
    """Like :func:`simulate_walk` but returns integer grid indices."""
    if horizon < 1:
        raise ConfigurationError("horizon must be at least 1")
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    return kernels.walk(rng, cfg.j0, cfg.jmax, float(cfg.p), int(horizon))


def measure_interarrivals(trace, delta_eps: float, stop_time: int | None = None,
                          rtol: float = GRID_RTOL) -> RenewalTrace:
    """Renewal structure of a radius trace.

    ``A_0 = 0`` and ``A_n`` is the first index after ``A_{n-1}`` whose radius is
    at least ``delta_eps``. ``stop_time`` defaults to the last index.
    """
    d = np.asarray(trace, dtype=float)
    if d.size == 0:
        return RenewalTrace(np.zeros(1, dtype=np.int64), np.empty(0, dtype=np.int64),
                            0, 0, np.empty(0, dtype=np.int8))
    thresh = delta_eps * (1.0 - rtol)
    renew = d >= thresh
    arrivals = np.concatenate(([0], np.flatnonzero(renew[1:]) + 1)).astype(np.int64)
    tau = np.diff(arrivals)
    starts = d[arrivals[:-1]]
    cls = np.where(starts > delta_eps * (1.0 + rtol), 1, np.where(renew[arrivals[:-1]], 0, -1))
    stop = d.size - 1 if stop_time is None else int(stop_time)
    count = int(np.searchsorted(arrivals, stop, side="right")) - 1
    return RenewalTrace(arrivals, tau, count, stop, cls.astype(np.int8))


def theoretical_interarrival_bound(p: float) -> float:
    """Upper bound ``p/(2p-1)`` on the mean interarrival time."""
    if not p > 0.5:
        raise DomainError(f"interarrival bound needs p > 1/2, got {p}")
    return p / (2.0 * p - 1.0)


def theoretical_stop_bound(p: float, drift: DriftSpec, delta_eps: float,
                           delta0: float) -> float:
    """Bound on the expected stopping time via renewal counting and Wald.

    ``p/(2p-1) * (phi0/(theta*h(delta_eps)) + h(delta0)/h(delta_eps) + 1)``
    """
    factor = theoretical_interarrival_bound(p)
    he = float(drift.h(delta_eps))
    if not he > 0:
        raise DomainError("h(delta_eps) must be positive")
    return factor * (drift.phi0 / (drift.theta * he) + float(drift.h(delta0)) / he + 1.0)


def default_cap(cfg: WalkConfig, drift: DriftSpec) -> int:
    if cfg.p > 0.5:
        bound = theoretical_stop_bound(cfg.p, drift, cfg.delta_eps, cfg.delta0)
        return int(min(CAP_MULTIPLIER * math.ceil(bound), 2**62))
    raise ConfigurationError("p <= 1/2 has no stopping bound; pass max_iters explicitly")


def _increment_mode(increments):
    if isinstance(increments, TwoPointIncrements):
        return kernels.MODE_TWO_POINT, increments.q
    if isinstance(increments, DeterministicIncrements):
        return kernels.MODE_DETERMINISTIC, 0.5
    return None, None


def _python_phi_delta(cfg, drift, stop_rule, increments, cap, rng, jlo, htab):
    """Generic loop for user-supplied stop rules or increment samplers.

    A custom increment sampler is called as ``increments(phi, delta, d, rng)``
    with ``d = theta*h(delta)`` and must return a step whose conditional mean is
    at most ``-d``.
    """
    mode, q = _increment_mode(increments)
    phis, js, vs, ws = [], [], [], []
    phi, j, k = drift.phi0, cfg.j0, 0
    while True:
        phis.append(phi)
        js.append(j)
        delta = float(cfg.radius(j))
        if stop_rule(phi, delta, k):
            status = 0
            break
        if k >= cap:
            status = 1
            break
        up = rng.random() < cfg.p
        d = drift.theta * htab[max(j - jlo, 0)]
        if mode == kernels.MODE_DETERMINISTIC:
            v = -d
        elif mode == kernels.MODE_TWO_POINT:
            v = -2.0 * d / q if rng.random() < q else d / (1.0 - q)
        else:
            v = float(increments(phi, delta, d, rng))
        new = min(max(phi + v, 0.0), drift.phi_max)
        vs.append(new - phi)
        ws.append(up)
        phi = new
        j = min(j + 1, cfg.jmax) if up else j - 1
        k += 1
    return (status, k, np.asarray(phis), np.asarray(js, dtype=np.int64),
            np.asarray(vs), np.asarray(ws, dtype=bool))


def simulate_phi_delta(cfg: WalkConfig, drift: DriftSpec, stop_rule=None,
                       increments=None, max_iters: int | None = None, rng=None):
    """Simulate a potential/radius pair until ``stop_rule`` fires.

    Returns ``(PhiDeltaTrace, RenewalTrace)``. Raises SimulationTimeout, with
    the partial trace attached, if ``max_iters`` (default 1000x the stopping
    bound) is reached first.
    """
    stop_rule = StopRule() if stop_rule is None else stop_rule
    increments = TwoPointIncrements() if increments is None else increments
    cap = default_cap(cfg, drift) if max_iters is None else int(max_iters)
    rng = np.random.default_rng(cfg.seed) if rng is None else rng
    jlo, htab = drift.table(cfg)
    mode, q = _increment_mode(increments)
    if isinstance(stop_rule, StopRule) and mode is not None:
        stop_k = -1 if stop_rule.max_k is None else int(stop_rule.max_k)
        out = kernels.phi_delta(rng, float(drift.phi0), float(drift.phi_max), cfg.j0,
                                cfg.jmax, jlo, htab, float(drift.theta), float(cfg.p),
                                mode, float(q), float(stop_rule.phi_level), stop_k,
                                cap, True)
    else:
        out = _python_phi_delta(cfg, drift, stop_rule, increments, cap, rng, jlo, htab)
    status, k, phis, js, vs, ws = out
    radii = cfg.radius(js)
    trace = PhiDeltaTrace(phi=phis, delta=radii, v=vs, success=ws)
    if status != 0:
        raise SimulationTimeout(f"stop rule did not fire within {cap} iterations", trace)
    return trace, measure_interarrivals(radii, cfg.delta_eps, stop_time=k)


def replication_rng(seed: int, rep: int) -> np.random.Generator:
    """Independent generator for replication ``rep`` of master ``seed``."""
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence([int(seed), int(rep)])))


def replicate_stop_times(cfg: WalkConfig, drift: DriftSpec, n_reps: int,
                         stop_rule: StopRule | None = None, increments=None,
                         max_iters: int | None = None) -> np.ndarray:
    """Stopping times of ``n_reps`` independent replications (kernel path only).

    Replication ``r`` draws from :func:`replication_rng` ``(cfg.seed, r)``.
    Timeouts are returned as ``-1``.
    """
    stop_rule = StopRule() if stop_rule is None else stop_rule
    increments = TwoPointIncrements() if increments is None else increments
    mode, q = _increment_mode(increments)
    if mode is None or not isinstance(stop_rule, StopRule):
        raise ConfigurationError("replicate_stop_times needs built-in increments and StopRule")
    cap = default_cap(cfg, drift) if max_iters is None else int(max_iters)
    jlo, htab = drift.table(cfg)
    stop_k = -1 if stop_rule.max_k is None else int(stop_rule.max_k)
    out = np.empty(n_reps, dtype=np.int64)
    for r in range(n_reps):
        status, k, *_ = kernels.phi_delta(
            replication_rng(cfg.seed, r), float(drift.phi0), float(drift.phi_max),
            cfg.j0, cfg.jmax, jlo, htab, float(drift.theta), float(cfg.p), mode,
            float(q), float(stop_rule.phi_level), stop_k, cap, False)
        out[r] = k if status == 0 else -1
    return out


@dataclass
class InterarrivalStats:
    p: float
    steps: int
    count: int
    mean: float
    std: float
    stderr: float
    bound: float
    conditional: dict
    lag1_autocorr: float

    @property
    def passed(self) -> bool:
        return self.mean <= self.bound + 3.0 * self.stderr


def interarrival_experiment(cfg: WalkConfig, steps: int, rng=None) -> InterarrivalStats:
    """Run one long walk and compare its mean interarrival with ``p/(2p-1)``."""
    radii = simulate_walk(cfg, steps, rng)
    rt = measure_interarrivals(radii, cfg.delta_eps)
    tau = rt.interarrivals.astype(float)
    std = float(tau.std(ddof=1)) if tau.size > 1 else math.nan
    return InterarrivalStats(
        p=cfg.p, steps=steps, count=int(tau.size), mean=float(tau.mean()), std=std,
        stderr=std / math.sqrt(tau.size), bound=theoretical_interarrival_bound(cfg.p),
        conditional=rt.conditional_means(), lag1_autocorr=rt.lag1_autocorrelation(),
    )
