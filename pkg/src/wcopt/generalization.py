"""Generalization gaps at trained models, theorem bounds, and rate fits.

The population pool is finite, so the population risk F and its (envelope)
gradients are computed exactly; the only randomness is the dataset draw and
the optimizer's own sampling.  Three gap kinds are measured at w = A(S):

    function_values   F(w) - F_S(w)
    gradients         || grad F(w) - grad F_S(w) ||        (smooth losses only)
    moreau_gradients  || grad F_env(w) - grad F_{S,env}(w) ||  via two prox solves

Every Moreau-based quantity carries its prox inner residual, and bound checks
add the induced slack explicitly; silent slack is forbidden.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ._seeding import derive_seed, substream
from .errors import ConfigError
from .moreau import MoreauConfig, RiskObjective, prox
from .optimizers import OptimizerConfig, run_optimizer
from .problems import LossProblem, PopulationPool, ProblemConstants, risk_eval

Array = np.ndarray

GAP_KINDS = ("function_values", "gradients", "moreau_gradients")


@dataclass
class GapReport:
    gap_kind: str
    gap_estimate: float
    std_error: float
    variance_term: float | None
    rhs_bound: float | None
    datasets_sampled: int
    n: int
    T: int
    eta: float
    population_value: float | None = None
    empirical_value: float | None = None
    population_norm: float | None = None
    empirical_norm: float | None = None
    max_inner_residual: float | None = None
    draws: tuple = ()
    draw_population_norms: tuple = ()
    draw_empirical_norms: tuple = ()
    draw_inner_residuals: tuple = ()

    def to_json_dict(self) -> dict:
        return {
            "gap_kind": self.gap_kind,
            "gap_estimate": self.gap_estimate,
            "std_error": self.std_error,
            "variance_term": self.variance_term,
            "rhs_bound": self.rhs_bound,
            "datasets_sampled": self.datasets_sampled,
            "n": self.n,
            "T": self.T,
            "eta": self.eta,
            "population_value": self.population_value,
            "empirical_value": self.empirical_value,
            "population_norm": self.population_norm,
            "empirical_norm": self.empirical_norm,
            "max_inner_residual": self.max_inner_residual,
            "draws": list(self.draws),
            "draw_population_norms": list(self.draw_population_norms),
            "draw_empirical_norms": list(self.draw_empirical_norms),
            "draw_inner_residuals": list(self.draw_inner_residuals),
        }


@dataclass(frozen=True)
class RateFit:
    slope: float
    intercept: float
    r_squared: float
    points: tuple

    def to_json_dict(self) -> dict:
        return {
            "slope": self.slope,
            "intercept": self.intercept,
            "r_squared": self.r_squared,
            "points": [[float(x), float(y)] for x, y in self.points],
        }


def stability_bound_rhs(
    theorem: str,
    epsilon: float,
    constants: ProblemConstants | None,
    n: int,
    V: float | None = None,
) -> float:
    """Right-hand side of the gradient-gap theorems.

    grad_gap:   4 eps + sqrt(V / n)     (V bounds the gradient variance)
    moreau_gap: 4 G / sqrt(n) + sqrt(32 G eps rho)   for argument stability eps
    """
    if epsilon < 0:
        raise ConfigError("epsilon must be nonnegative")
    if n < 1:
        raise ConfigError("n must be >= 1")
    if theorem == "grad_gap":
        if V is None:
            raise ConfigError("grad_gap bound requires the variance term V")
        if V < 0:
            raise ConfigError("V must be nonnegative")
        return 4.0 * epsilon + math.sqrt(V / n)
    if theorem == "moreau_gap":
        if constants is None:
            raise ConfigError("moreau_gap bound requires certified constants")
        G, rho = constants.lipschitz, constants.weak_convexity
        return 4.0 * G / math.sqrt(n) + math.sqrt(32.0 * G * epsilon * rho)
    raise ConfigError(f"unknown theorem {theorem!r}; expected 'grad_gap' or 'moreau_gap'")


def _mean_se(values: Array) -> tuple[float, float]:
    k = values.shape[0]
    mean = float(np.mean(values))
    if k < 2:
        return mean, 0.0
    return mean, float(np.std(values, ddof=1) / math.sqrt(k))


def generalization_gap(
    problem: LossProblem,
    pool: PopulationPool,
    config: OptimizerConfig,
    gap_kind: str,
    n: int,
    dataset_draws: int,
    moreau: MoreauConfig | None = None,
    stability_epsilon: float | None = None,
    constants: ProblemConstants | None = None,
) -> GapReport:
    """Average the chosen gap at A(S) over independent dataset draws.

    Each draw samples S of size n uniformly with replacement from the pool,
    runs the optimizer on S with a seed derived from (config.seed, draw), and
    evaluates the gap at the returned point.  When a stability epsilon (and
    constants, where the formula needs them) is supplied the matching
    theoretical right-hand side is attached as ``rhs_bound``.
    """
    if gap_kind not in GAP_KINDS:
        raise ConfigError(f"unknown gap kind {gap_kind!r}; expected one of {GAP_KINDS}")
    if dataset_draws < 1:
        raise ConfigError("dataset_draws must be >= 1")
    if not 1 <= n <= pool.n:
        raise ConfigError(f"dataset size n={n} must lie in 1..{pool.n} (pool size)")
    if gap_kind == "gradients" and not problem.smooth:
        raise ConfigError("the gradient gap is undefined for nonsmooth losses; "
                          "use moreau_gradients instead")
    if gap_kind == "moreau_gradients" and moreau is None:
        raise ConfigError("moreau_gradients requires a MoreauConfig")
    if constants is not None and config.projection_radius != constants.radius:
        raise ConfigError("bound constants are certified on the projection ball; "
                          "projection_radius must equal constants.radius")
    if stability_epsilon is not None and stability_epsilon < 0:
        raise ConfigError("stability_epsilon must be nonnegative")

    pool_objective = RiskObjective(problem, pool) if gap_kind == "moreau_gradients" else None

    gaps = np.zeros(dataset_draws)
    pop_vals = np.zeros(dataset_draws)
    emp_vals = np.zeros(dataset_draws)
    pop_norms = np.zeros(dataset_draws)
    emp_norms = np.zeros(dataset_draws)
    residuals = np.zeros(dataset_draws)
    variance_term = None

    for k in range(dataset_draws):
        S = pool.draw(n, substream(config.seed, "gap_data", k))
        run_cfg = config.with_seed(derive_seed(config.seed, "gap_run", k))
        w = run_optimizer(problem, S, run_cfg).output

        if gap_kind == "function_values":
            F, _ = risk_eval(problem, w, pool)
            FS, _ = risk_eval(problem, w, S)
            gaps[k] = F - FS
            pop_vals[k], emp_vals[k] = F, FS
        elif gap_kind == "gradients":
            _, gF = risk_eval(problem, w, pool)
            _, gFS = risk_eval(problem, w, S)
            gaps[k] = float(np.linalg.norm(gF - gFS))
            pop_norms[k] = float(np.linalg.norm(gF))
            emp_norms[k] = float(np.linalg.norm(gFS))
            per = problem.batch_subgrad(w, pool.features, pool.targets)
            dev = per - gF[None, :]
            Vk = float(np.mean(np.sum(dev * dev, axis=1)))
            # Reported V is the max over visited models: the theorem assumes a
            # uniform-in-w variance bound, so the max is the honest surrogate.
            variance_term = Vk if variance_term is None else max(variance_term, Vk)
        else:
            rp = prox(pool_objective, w, moreau)
            rs = prox(RiskObjective(problem, S), w, moreau)
            gaps[k] = float(np.linalg.norm(rp.envelope_gradient - rs.envelope_gradient))
            pop_norms[k] = float(np.linalg.norm(rp.envelope_gradient))
            emp_norms[k] = float(np.linalg.norm(rs.envelope_gradient))
            residuals[k] = max(rp.inner_residual, rs.inner_residual)

    estimate, se = _mean_se(gaps)

    rhs = None
    if gap_kind == "function_values":
        if stability_epsilon is not None:
            rhs = stability_epsilon
        elif constants is not None:
            rhs = 2.0 * constants.value_bound * config.T / n
    elif gap_kind == "gradients":
        if stability_epsilon is not None:
            rhs = stability_bound_rhs("grad_gap", stability_epsilon, constants, n, variance_term)
    else:
        if stability_epsilon is not None and constants is not None:
            rhs = stability_bound_rhs("moreau_gap", stability_epsilon, constants, n)

    report = GapReport(
        gap_kind=gap_kind,
        gap_estimate=estimate,
        std_error=se,
        variance_term=variance_term,
        rhs_bound=rhs,
        datasets_sampled=dataset_draws,
        n=n,
        T=config.T,
        eta=config.schedule.eta,
        draws=tuple(float(g) for g in gaps),
    )
    if gap_kind == "function_values":
        report.population_value = float(np.mean(pop_vals))
        report.empirical_value = float(np.mean(emp_vals))
    else:
        report.population_norm = float(np.mean(pop_norms))
        report.empirical_norm = float(np.mean(emp_norms))
        report.draw_population_norms = tuple(float(v) for v in pop_norms)
        report.draw_empirical_norms = tuple(float(v) for v in emp_norms)
    if gap_kind == "moreau_gradients":
        report.max_inner_residual = float(np.max(residuals))
        report.draw_inner_residuals = tuple(float(r) for r in residuals)
    return report


def fit_rate(points) -> RateFit:
    """Least-squares power-law fit:  log(value) against log(x).

    Accepts any (x, value) pairs with positive entries; two points already
    determine a line, so the minimum is 2.  Constant values fit slope 0 with
    r^2 = 1 by convention.
    """
    pts = [(float(x), float(y)) for x, y in points]
    if len(pts) < 2:
        raise ConfigError("rate fit requires at least 2 points")
    xs = np.array([p[0] for p in pts])
    ys = np.array([p[1] for p in pts])
    if np.any(xs <= 0) or np.any(ys <= 0):
        raise ConfigError("rate fit requires positive coordinates and values")
    lx, ly = np.log(xs), np.log(ys)
    if float(np.max(ly) - np.min(ly)) == 0.0:
        return RateFit(0.0, float(ly[0]), 1.0, tuple(pts))
    design = np.column_stack([lx, np.ones_like(lx)])
    coef, _, _, _ = np.linalg.lstsq(design, ly, rcond=None)
    slope, intercept = float(coef[0]), float(coef[1])
    fitted = design @ coef
    ss_res = float(np.sum((ly - fitted) ** 2))
    ss_tot = float(np.sum((ly - np.mean(ly)) ** 2))
    r2 = 1.0 - ss_res / ss_tot
    return RateFit(slope, intercept, min(max(r2, 0.0), 1.0), tuple(pts))
