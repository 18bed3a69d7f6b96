"""Stochastic trust-region optimization with random models, and renewal-process tools
for bounding its expected iteration count."""

from .errors import (
    BudgetError, CapabilityError, ConfigurationError, DomainError, NumericError,
    PreconditionError, SimulationTimeout, StochTRError,
)
from .kernels import BACKEND
from .oracles import (
    AccuracyTargets, CorruptionSpec, SampleCounts, StochasticOracle, build_estimates,
    build_saa_model, classify_events, corrupt, fully_linear_sufficient, gaussian_oracle,
)
from .problems import (
    TestProblem, make_finite_sum_logistic, make_noisy_quadratic, make_noisy_rosenbrock,
    make_problem,
)
from .renewal import (
    DeterministicIncrements, DriftSpec, PhiDeltaTrace, RenewalTrace, StopRule,
    TwoPointIncrements, WalkConfig, interarrival_experiment, measure_interarrivals,
    replicate_stop_times, simulate_phi_delta, simulate_walk, theoretical_interarrival_bound,
    theoretical_stop_bound,
)
from .trust_region import (
    DriftConstants, IterationRecord, PotentialSpec, QuadraticModel, StormConfig,
    StormResult, StormState, cauchy_step, drift_constants, first_order_bound,
    guarantee_checks, potential_value, run_storm, storm_iterate,
)

__version__ = "0.1.0"
