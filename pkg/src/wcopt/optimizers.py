"""Stochastic subgradient optimizers and their tuned schedules.

All algorithms are sampling-determined: given the seed, the index sequence
i_1..i_T, the additive noise (DP variant only), and the output selector draw
are fixed before the data is touched, and each step reads exactly one sampled
example.  Two runs with the same seed on datasets that agree on every sampled
index therefore produce bit-identical traces, which is what the coupled
stability estimators rely on.

Updates from w_1 = 0 (or a configured warm start), with Pi the Euclidean
projection on the radius-R ball (identity when no radius is set):

    sgd           w_{t+1} = Pi(w_t - eta_t g_t)
    adagrad_norm  b_t^2 = b_{t-1}^2 + ||g_t||^2,  w_{t+1} = Pi(w_t - (eta/b_t) g_t)
    dp_sgd        w_{t+1} = Pi(w_t - eta_t (g_t + xi_t)),  xi_t ~ N(0, sigma^2 I)

where g_t is the subgradient of the loss at the sampled example.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, replace

import numpy as np

from ._seeding import substream
from .errors import ConfigError
from .problems import Dataset, LossProblem, ProblemConstants, problem_constants

Array = np.ndarray

ALGORITHMS = ("sgd", "adagrad_norm", "dp_sgd")
OUTPUT_SELECTORS = ("average", "random_iterate", "last")
REGIMES = ("convex", "nonconvex_smooth", "sgc", "weakly_convex", "adagrad")


@dataclass(frozen=True)
class StepSchedule:
    """Step-size rule.

    constant:  eta_t = eta
    inverse_t: eta_t = eta / (1 + c (t - 1)),  so eta_1 = eta
    adagrad:   eta / b_t with b_0 = b0 (only valid for adagrad_norm)
    """

    kind: str
    eta: float
    c: float | None = None
    b0: float | None = None

    def __post_init__(self):
        if self.kind not in ("constant", "inverse_t", "adagrad"):
            raise ConfigError(f"unknown schedule kind {self.kind!r}")
        if not (self.eta > 0 and math.isfinite(self.eta)):
            raise ConfigError("schedule eta must be positive and finite")
        if self.kind == "inverse_t" and not (self.c is not None and self.c > 0):
            raise ConfigError("inverse_t schedule requires c > 0")
        if self.kind == "adagrad" and not (self.b0 is not None and self.b0 > 0):
            raise ConfigError("adagrad schedule requires b0 > 0")

    def step(self, t: int) -> float:
        """Step size at 1-based step t (non-adagrad kinds)."""
        if self.kind == "constant":
            return self.eta
        if self.kind == "inverse_t":
            return self.eta / (1.0 + self.c * (t - 1))
        raise ConfigError("adagrad schedule has no fixed per-step size")


@dataclass(frozen=True)
class PrivacyBudget:
    """Gaussian mechanism parameters for dp_sgd."""

    epsilon: float
    delta: float
    beta: float
    sigma2: float

    def __post_init__(self):
        if not (self.epsilon > 0):
            raise ConfigError("privacy epsilon must be positive")
        if not (0 < self.delta < 1):
            raise ConfigError("privacy delta must lie in (0, 1)")
        if not (0 < self.beta < 1):
            raise ConfigError("privacy beta must lie in (0, 1)")
        if not (self.sigma2 > 0):
            raise ConfigError("privacy sigma2 must be positive")


@dataclass(frozen=True)
class OptimizerConfig:
    algorithm: str
    schedule: StepSchedule
    T: int
    projection_radius: float | None = None
    output: str = "last"
    seed: int = 0
    privacy: PrivacyBudget | None = None
    # Default start is the origin.  A warm start is needed for losses whose
    # subgradient vanishes identically at 0 (squared-inner-product fits leave
    # every subgradient method stuck there), so the suites can set one.
    initial_point: tuple | None = None

    def __post_init__(self):
        if self.algorithm not in ALGORITHMS:
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if self.T < 0:
            raise ConfigError("T must be >= 0")
        if self.initial_point is not None:
            pt = tuple(float(v) for v in self.initial_point)
            if not all(math.isfinite(v) for v in pt):
                raise ConfigError("initial point must be finite")
            object.__setattr__(self, "initial_point", pt)
        if self.output not in OUTPUT_SELECTORS:
            raise ConfigError(f"unknown output selector {self.output!r}")
        if self.projection_radius is not None and not (self.projection_radius > 0):
            raise ConfigError("projection radius must be positive when set")
        if self.algorithm == "adagrad_norm" and self.schedule.kind != "adagrad":
            raise ConfigError("adagrad_norm requires an adagrad schedule")
        if self.algorithm != "adagrad_norm" and self.schedule.kind == "adagrad":
            raise ConfigError("adagrad schedule is only valid for adagrad_norm")
        if self.algorithm == "dp_sgd" and self.privacy is None:
            raise ConfigError("dp_sgd requires a privacy budget")

    def with_seed(self, seed: int) -> "OptimizerConfig":
        return replace(self, seed=seed)


@dataclass
class Trace:
    """Everything a run produced, in order."""

    algorithm: str
    n: int
    iterates: Array  # (T+1, d): w_1 .. w_{T+1}
    index_sequence: Array  # 1-based sampled indices, length T
    output: Array
    output_index: int | None  # r for random_iterate, 1-based
    b_values: Array | None = None  # adagrad_norm only, length T
    noise_draws: Array | None = None  # dp_sgd only, (T, d)

    @property
    def T(self) -> int:
        return len(self.index_sequence)

    def sampled_indices(self) -> set[int]:
        """Distinct 1-based indices the run touched."""
        return set(int(i) for i in self.index_sequence)

    def to_json(self, include_arrays: bool = False) -> str:
        doc = {
            "algorithm": self.algorithm,
            "n": self.n,
            "T": self.T,
            "index_sequence": [int(i) for i in self.index_sequence],
            "output": [float(v) for v in self.output],
            "output_index": self.output_index,
            "b_values": None if self.b_values is None else [float(b) for b in self.b_values],
        }
        if include_arrays:
            doc["iterates"] = [[float(v) for v in row] for row in self.iterates]
            if self.noise_draws is not None:
                doc["noise_draws"] = [[float(v) for v in row] for row in self.noise_draws]
        return json.dumps(doc)


def project_ball(w: Array, radius: float | None) -> Array:
    """Euclidean projection onto the centered ball; identity when radius is None."""
    if radius is None:
        return w
    nrm = float(np.linalg.norm(w))
    if nrm <= radius:
        return w
    return w * (radius / nrm)


def _select_output(config: OptimizerConfig, iterates: Array, r: int | None) -> Array:
    T = iterates.shape[0] - 1
    if T == 0:
        return iterates[0].copy()
    if config.output == "average":
        return np.mean(iterates[:T], axis=0)
    if config.output == "random_iterate":
        return iterates[r - 1].copy()
    return iterates[T].copy()


def run_optimizer(
    problem: LossProblem,
    dataset: Dataset,
    config: OptimizerConfig,
    _indices: Array | None = None,
    _noise: Array | None = None,
    _output_index: int | None = None,
) -> Trace:
    """Run the configured algorithm on the dataset.

    The underscore parameters let the exhaustive enumeration oracle force a
    specific index sequence / noise realization; ordinary callers leave them
    unset and everything is drawn from the config seed's substreams.
    """
    if dataset.d != problem.d:
        raise ConfigError(f"dataset dimension {dataset.d} does not match problem d={problem.d}")
    n, d, T = dataset.n, dataset.d, config.T

    if _indices is None:
        idx_rng = substream(config.seed, "index")
        idx0 = idx_rng.integers(0, n, size=T)
        r = None
        if config.output == "random_iterate" and T >= 1:
            # Drawn from the index substream after the T index draws, so two
            # coupled runs select the same iterate.
            r = int(idx_rng.integers(1, T + 1))
    else:
        idx0 = np.asarray(_indices, dtype=np.int64)
        if idx0.shape != (T,):
            raise ConfigError(f"forced index sequence has shape {idx0.shape}, expected ({T},)")
        if T and not (idx0.min() >= 0 and idx0.max() < n):
            raise ConfigError("forced index sequence out of range")
        r = _output_index

    noise = None
    if config.algorithm == "dp_sgd":
        sigma = math.sqrt(_validated_sigma2(problem, config, n))
        if _noise is None:
            noise = substream(config.seed, "noise").normal(0.0, sigma, size=(T, d))
        else:
            noise = np.asarray(_noise, dtype=np.float64)
            if noise.shape != (T, d):
                raise ConfigError(f"forced noise has shape {noise.shape}, expected ({T}, {d})")

    X, y = dataset.features, dataset.targets
    sched = config.schedule
    radius = config.projection_radius
    adagrad = config.algorithm == "adagrad_norm"
    b_values = np.empty(T) if adagrad else None
    b2 = sched.b0**2 if adagrad else 0.0

    iterates = np.zeros((T + 1, d))
    if config.initial_point is None:
        w = np.zeros(d)
    else:
        w = np.asarray(config.initial_point, dtype=np.float64)
        if w.shape != (d,):
            raise ConfigError(f"initial point dimension {w.shape} does not match d={d}")
        w = project_ball(w, radius)
        iterates[0] = w
    for t in range(T):
        i = int(idx0[t])
        g = problem.subgrad(w, X[i], y[i])
        if noise is not None:
            g = g + noise[t]
        if adagrad:
            b2 += float(g @ g)
            b = math.sqrt(b2)
            b_values[t] = b
            w = w - (sched.eta / b) * g
        else:
            w = w - sched.step(t + 1) * g
        w = project_ball(w, radius)
        iterates[t + 1] = w

    output = _select_output(config, iterates, r)
    return Trace(
        algorithm=config.algorithm,
        n=n,
        iterates=iterates,
        index_sequence=idx0 + 1,
        output=output,
        output_index=r,
        b_values=b_values,
        noise_draws=noise,
    )


def _validated_sigma2(problem: LossProblem, config: OptimizerConfig, n: int) -> float:
    """Gate for dp_sgd: the precheck must pass and the budget's sigma2 must
    reproduce the noise-scale formula for the certified Lipschitz constant."""
    budget = config.privacy
    if config.projection_radius is None:
        raise ConfigError("dp_sgd requires a projection radius to certify the Lipschitz constant")
    if config.T < 1:
        raise ConfigError("dp_sgd requires T >= 1")
    ok, _ = dp_privacy_precheck(config.T, n, budget.epsilon, budget.delta)
    if not ok:
        raise ConfigError(
            f"privacy precheck failed for T={config.T}, n={n}, "
            f"epsilon={budget.epsilon}, delta={budget.delta}; refusing to run"
        )
    G = problem_constants(problem, config.projection_radius).lipschitz
    expected = dp_noise_scale(G, config.T, n, budget.epsilon, budget.delta, budget.beta)
    if abs(budget.sigma2 - expected) > 1e-9 * expected:
        raise ConfigError(
            f"privacy sigma2={budget.sigma2} does not match the noise-scale "
            f"formula value {expected} for G={G}"
        )
    return budget.sigma2


def dp_noise_scale(
    G: float, T: int, n: int, epsilon: float, delta: float, beta: float
) -> float:
    """Per-step Gaussian variance for the private variant.

        sigma^2 = (14 G^2 T / (beta n^2 epsilon)) * (log(1/delta) / ((1-beta) epsilon) + 1)
    """
    if not (G > 0):
        raise ConfigError("G must be positive")
    if T < 1 or n < 1:
        raise ConfigError("T and n must be >= 1")
    if not (epsilon > 0):
        raise ConfigError("epsilon must be positive")
    if not (0 < delta < 1):
        raise ConfigError("delta must lie in (0, 1)")
    if not (0 < beta < 1):
        raise ConfigError("beta must lie strictly in (0, 1)")
    lead = 14.0 * G * G * T / (beta * n * n * epsilon)
    return lead * (math.log(1.0 / delta) / ((1.0 - beta) * epsilon) + 1.0)


def canonical_beta(T: int, n: int, epsilon: float) -> float:
    """The beta choice that collapses the leading factor to exactly 6 G^2."""
    if T < 1 or n < 1 or not (epsilon > 0):
        raise ConfigError("need T >= 1, n >= 1, epsilon > 0")
    return 7.0 * T / (3.0 * n * n * epsilon)


def dp_privacy_precheck(T: int, n: int, epsilon: float, delta: float) -> tuple[bool, float]:
    """Feasibility gate for the private variant.

    Returns (ok, canonical beta) where ok requires both
    epsilon >= 14 T / (3 n^2) and log(1/delta)/epsilon <= sqrt(n)/(3 sqrt(3)) - 5/3.
    """
    if T < 1 or n < 1:
        raise ConfigError("T and n must be >= 1")
    if not (epsilon > 0):
        raise ConfigError("epsilon must be positive")
    if not (0 < delta < 1):
        raise ConfigError("delta must lie in (0, 1)")
    ok = (epsilon >= 14.0 * T / (3.0 * n * n)) and (
        math.log(1.0 / delta) / epsilon <= math.sqrt(n) / (3.0 * math.sqrt(3.0)) - 5.0 / 3.0
    )
    return ok, canonical_beta(T, n, epsilon)


def make_privacy_budget(
    G: float, T: int, n: int, epsilon: float, delta: float
) -> PrivacyBudget:
    """Canonical budget: beta = 7T/(3 n^2 epsilon), sigma2 from dp_noise_scale.

    Raises ConfigError when the precheck rejects (epsilon, delta, T, n).
    """
    ok, beta = dp_privacy_precheck(T, n, epsilon, delta)
    if not ok:
        raise ConfigError(
            f"privacy precheck failed for T={T}, n={n}, epsilon={epsilon}, delta={delta}"
        )
    return PrivacyBudget(epsilon, delta, beta, dp_noise_scale(G, T, n, epsilon, delta, beta))


def _ceil_count(x: float) -> int:
    # Guard against 9999.9999999 artifacts from float powers before ceil.
    r = round(x)
    if abs(x - r) <= 1e-9 * max(1.0, abs(x)):
        return max(int(r), 1)
    return max(int(math.ceil(x)), 1)


def tuned_schedule(
    regime: str,
    n: int,
    constants: ProblemConstants,
    sgc_rho: float | None = None,
) -> tuple[int, StepSchedule]:
    """Horizon T and step schedule for the given sample size, constant 1.

    convex:            T = ceil(n^{2/3} G R / B),        eta = n^{-1/3} R / G
    nonconvex_smooth:  T = ceil(n^{2/3} / G^{2/3}),      eta = 1 / (G sqrt(T))
    sgc:               T = ceil(sqrt(L rho_sgc n) / G),  eta = 1 / (rho_sgc L)
    weakly_convex:     T = ceil(n^{2/3} / (R^{2/3} rho^{1/3})), eta = 1 / (G sqrt(rho T))
    adagrad:           T = ceil(n^{2/3}),                eta = 1, b0 = 1

    The radius R doubles as the certified bound on ||w*|| in the convex rate.
    """
    if n < 1:
        raise ConfigError("n must be >= 1")
    if regime not in REGIMES:
        raise ConfigError(f"unknown regime {regime!r}; expected one of {REGIMES}")
    G = constants.lipschitz
    if not (G > 0):
        raise ConfigError("tuned schedules need a positive Lipschitz constant")

    if regime == "convex":
        R, B = constants.radius, constants.value_bound
        if not (B > 0):
            raise ConfigError("convex regime needs a positive value bound")
        T = _ceil_count(n ** (2.0 / 3.0) * G * R / B)
        return T, StepSchedule("constant", n ** (-1.0 / 3.0) * R / G)
    if regime == "nonconvex_smooth":
        if constants.smoothness is None:
            raise ConfigError("nonconvex_smooth regime needs a smoothness constant")
        T = _ceil_count(n ** (2.0 / 3.0) / G ** (2.0 / 3.0))
        return T, StepSchedule("constant", 1.0 / (G * math.sqrt(T)))
    if regime == "sgc":
        if constants.smoothness is None:
            raise ConfigError("sgc regime needs a smoothness constant")
        if sgc_rho is None or not (sgc_rho > 0):
            raise ConfigError("sgc regime needs the strong-growth constant sgc_rho > 0")
        L = constants.smoothness
        T = _ceil_count(math.sqrt(L * sgc_rho * n) / G)
        return T, StepSchedule("constant", 1.0 / (sgc_rho * L))
    if regime == "weakly_convex":
        rho, R = constants.weak_convexity, constants.radius
        if not (rho > 0):
            raise ConfigError("weakly_convex regime needs rho > 0")
        T = _ceil_count(n ** (2.0 / 3.0) / (R ** (2.0 / 3.0) * rho ** (1.0 / 3.0)))
        return T, StepSchedule("constant", 1.0 / (G * math.sqrt(rho * T)))
    # adagrad
    T = _ceil_count(n ** (2.0 / 3.0))
    return T, StepSchedule("adagrad", 1.0, b0=1.0)
