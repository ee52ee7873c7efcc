"""Stability and generalization toolkit for weakly convex stochastic methods.

Pieces: loss problems with certified constants, Moreau envelope machinery
with self-validating prox solves, projected stochastic subgradient methods
(plain, AdaGrad-Norm, differentially private), replace-one stability
estimators with exhaustive small-case oracles, generalization gap
measurement against stability-based bounds, and a deterministic experiment
harness with a CLI.
"""

from .errors import ConfigError, ProxConvergenceError, ValidationError
from .generalization import (
    GAP_KINDS,
    GapReport,
    RateFit,
    fit_rate,
    generalization_gap,
    stability_bound_rhs,
)
from .harness import (
    ExperimentConfig,
    Report,
    Row,
    emit_report,
    enumerate_config,
    load_config,
    report_from_json,
    rows_from_csv,
    run_config,
    sweep,
)
from .moreau import (
    MoreauConfig,
    MoreauResult,
    RiskObjective,
    default_smoothing,
    envelope_gradient,
    envelope_value,
    prox,
    prox_oracle_1d,
)
from .optimizers import (
    ALGORITHMS,
    OUTPUT_SELECTORS,
    REGIMES,
    OptimizerConfig,
    PrivacyBudget,
    StepSchedule,
    Trace,
    canonical_beta,
    dp_noise_scale,
    dp_privacy_precheck,
    make_privacy_budget,
    project_ball,
    run_optimizer,
    tuned_schedule,
)
from .problems import (
    Dataset,
    Example,
    GrowthCondition,
    LossProblem,
    PopulationPool,
    ProblemConstants,
    loss_eval,
    make_problem,
    problem_constants,
    relaxed_growth_check,
    risk_eval,
    sgc_ratio,
)
from .stability import (
    MEASURES,
    NeighborPair,
    StabilityReport,
    coupled_stability_estimate,
    exact_expectation_enumerate,
    inclusion_probability,
    neighbor_dataset,
    stability_bound,
)

__version__ = "0.1.0"

__all__ = [
    "ALGORITHMS",
    "ConfigError",
    "Dataset",
    "Example",
    "ExperimentConfig",
    "GAP_KINDS",
    "GapReport",
    "GrowthCondition",
    "LossProblem",
    "MEASURES",
    "MoreauConfig",
    "MoreauResult",
    "NeighborPair",
    "OUTPUT_SELECTORS",
    "OptimizerConfig",
    "PopulationPool",
    "PrivacyBudget",
    "ProblemConstants",
    "ProxConvergenceError",
    "REGIMES",
    "RateFit",
    "Report",
    "RiskObjective",
    "Row",
    "StabilityReport",
    "StepSchedule",
    "Trace",
    "ValidationError",
    "canonical_beta",
    "coupled_stability_estimate",
    "default_smoothing",
    "dp_noise_scale",
    "dp_privacy_precheck",
    "emit_report",
    "enumerate_config",
    "envelope_gradient",
    "envelope_value",
    "exact_expectation_enumerate",
    "fit_rate",
    "generalization_gap",
    "inclusion_probability",
    "load_config",
    "loss_eval",
    "make_privacy_budget",
    "make_problem",
    "neighbor_dataset",
    "problem_constants",
    "project_ball",
    "prox",
    "prox_oracle_1d",
    "relaxed_growth_check",
    "report_from_json",
    "risk_eval",
    "rows_from_csv",
    "run_config",
    "run_optimizer",
    "sgc_ratio",
    "stability_bound",
    "stability_bound_rhs",
    "sweep",
    "tuned_schedule",
]
