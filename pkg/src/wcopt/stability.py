"""Coupled replace-one stability estimation.

Two datasets are neighbors when they differ in exactly one example.  A
coupled run executes the algorithm on both with identical internal
randomness (same index sequence, same noise, same output selector draw), so
the only difference between the two outputs is the effect of the replaced
example.  Three measures of that effect are estimated:

    function_values  sup_z E[f(A(S); z) - f(A(S'); z)]
    gradients        sqrt( sup_z E ||grad f(A(S); z) - grad f(A(S'); z)||^2 )
    arguments        E ||A(S) - A(S')||_2

The sup over z is taken over a finite probe set (by default the problem's
population pool).  For sampling-determined algorithms the replaced example
can only matter on trials that sample its index, which gives the closed-form
bounds attached to the reports and the exact inclusion probability below.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from ._seeding import derive_seed
from .errors import ConfigError
from .optimizers import OptimizerConfig, run_optimizer
from .problems import Dataset, Example, LossProblem, ProblemConstants

Array = np.ndarray

MEASURES = ("function_values", "gradients", "arguments")

_ENUMERATION_LIMIT = 1_000_000


@dataclass(frozen=True)
class NeighborPair:
    """Base dataset, neighbor dataset, and the 1-based replaced position."""

    base: Dataset
    neighbor: Dataset
    replaced_index: int


def neighbor_dataset(dataset: Dataset, i: int, replacement: Example) -> NeighborPair:
    """Neighbor of ``dataset`` with position i (1-based) replaced.

    The convention i = n (last position) matches the usual symmetrization
    argument; any position is accepted.
    """
    if not 1 <= i <= dataset.n:
        raise ConfigError(f"replaced index {i} out of range 1..{dataset.n}")
    return NeighborPair(dataset, dataset.replaced(i - 1, replacement), i)


@dataclass
class StabilityReport:
    measure: str
    epsilon_hat: float
    std_error: float
    trials: int
    sup_over_z: bool
    theoretical_bound: float | None
    n: int
    T: int
    eta: float

    def to_json_dict(self) -> dict:
        return {
            "measure": self.measure,
            "epsilon_hat": self.epsilon_hat,
            "std_error": self.std_error,
            "trials": self.trials,
            "sup_over_z": self.sup_over_z,
            "theoretical_bound": self.theoretical_bound,
            "n": self.n,
            "T": self.T,
            "eta": self.eta,
        }


def stability_bound(measure: str, constants: ProblemConstants, T: int, n: int) -> float:
    """Closed-form stability bound for sampling-determined algorithms.

    function_values: 2 B T / n;  gradients: 2 G sqrt(T/n);  arguments: 2 R T / n.
    """
    if measure == "function_values":
        return 2.0 * constants.value_bound * T / n
    if measure == "gradients":
        return 2.0 * constants.lipschitz * math.sqrt(T / n)
    if measure == "arguments":
        return 2.0 * constants.radius * T / n
    raise ConfigError(f"unknown stability measure {measure!r}")


def _check_measure(measure: str):
    if measure not in MEASURES:
        raise ConfigError(f"unknown stability measure {measure!r}; expected one of {MEASURES}")


def _check_constants(config: OptimizerConfig, constants: ProblemConstants | None):
    # The closed-form bounds certify B, G on the projection ball and need
    # outputs confined to it, so the run must actually project onto radius R.
    if constants is None:
        return
    if config.projection_radius is None or config.projection_radius != constants.radius:
        raise ConfigError(
            "stability bounds require the projection radius to equal the certified radius"
        )


def _probe_arrays(problem: LossProblem, probe_examples) -> tuple[Array, Array]:
    if probe_examples is None:
        return problem.pool.features, problem.pool.targets
    if isinstance(probe_examples, Dataset):
        return probe_examples.features, probe_examples.targets
    feats = np.stack([np.asarray(e.features, dtype=np.float64) for e in probe_examples])
    targs = np.asarray([float(e.target) for e in probe_examples])
    return feats, targs


def _eta_of(config: OptimizerConfig) -> float:
    return config.schedule.eta


def coupled_stability_estimate(
    problem: LossProblem,
    pair: NeighborPair,
    config: OptimizerConfig,
    measure: str,
    trials: int,
    probe_examples=None,
    constants: ProblemConstants | None = None,
) -> StabilityReport:
    """Monte Carlo estimate of the stability measure over coupled runs.

    Each trial derives its seed from (config.seed, trial index) and runs the
    algorithm on base and neighbor with that same seed.  Accumulation is
    sequential in trial order, so the report is bit-stable under any thread
    budget.  When ``constants`` is supplied the matching closed-form bound is
    attached (and the config must project onto the certified radius).
    """
    _check_measure(measure)
    if trials < 1:
        raise ConfigError("trials must be >= 1")
    if pair.base.n != pair.neighbor.n:
        raise ConfigError("neighbor datasets must have equal size")
    _check_constants(config, constants)

    n, T = pair.base.n, config.T
    sup_over_z = measure in ("function_values", "gradients")
    if sup_over_z:
        PX, Py = _probe_arrays(problem, probe_examples)
        acc = np.zeros(PX.shape[0])
        acc_sq = np.zeros(PX.shape[0])
    else:
        acc_scalar = 0.0
        acc_scalar_sq = 0.0

    for t in range(trials):
        cfg = config.with_seed(derive_seed(config.seed, "stability_trial", t))
        u = run_optimizer(problem, pair.base, cfg).output
        v = run_optimizer(problem, pair.neighbor, cfg).output
        if measure == "function_values":
            diff = problem.batch_loss(u, PX, Py) - problem.batch_loss(v, PX, Py)
            acc += diff
            acc_sq += diff * diff
        elif measure == "gradients":
            gdiff = problem.batch_subgrad(u, PX, Py) - problem.batch_subgrad(v, PX, Py)
            sq = np.sum(gdiff * gdiff, axis=1)
            acc += sq
            acc_sq += sq * sq
        else:
            d = float(np.linalg.norm(u - v))
            acc_scalar += d
            acc_scalar_sq += d * d

    def se_of(mean: float, sumsq: float) -> float:
        if trials < 2:
            return 0.0
        var = max((sumsq - trials * mean * mean) / (trials - 1), 0.0)
        return math.sqrt(var / trials)

    if measure == "arguments":
        eps = acc_scalar / trials
        se = se_of(eps, acc_scalar_sq)
    else:
        means = acc / trials
        star = int(np.argmax(means))
        if measure == "function_values":
            eps = max(float(means[star]), 0.0)
            se = se_of(float(means[star]), float(acc_sq[star]))
        else:
            m = max(float(means[star]), 0.0)
            eps = math.sqrt(m)
            se_m = se_of(float(means[star]), float(acc_sq[star]))
            # Delta method through the square root.
            se = se_m / (2.0 * eps) if eps > 0 else 0.0

    bound = None if constants is None else stability_bound(measure, constants, T, n)
    return StabilityReport(measure, eps, se, trials, sup_over_z, bound, n, T, _eta_of(config))


def exact_expectation_enumerate(
    problem: LossProblem,
    pair: NeighborPair,
    config: OptimizerConfig,
    measure: str,
    probe_examples=None,
) -> float:
    """Exact expectation of the stability measure by enumerating index
    sequences (and the output-selector draw, when applicable) uniformly.

    Only feasible for n^T up to 10^6 and for noise-free algorithms; the
    result is the same functional the Monte Carlo estimator targets.
    """
    _check_measure(measure)
    if config.algorithm == "dp_sgd":
        raise ConfigError("exact enumeration is undefined for noise-injecting algorithms")
    n, T = pair.base.n, config.T
    if n**T > _ENUMERATION_LIMIT:
        raise ConfigError(f"n^T = {n**T} exceeds the enumeration limit {_ENUMERATION_LIMIT}")

    sup_over_z = measure in ("function_values", "gradients")
    if sup_over_z:
        PX, Py = _probe_arrays(problem, probe_examples)
        acc = np.zeros(PX.shape[0])
    else:
        total = 0.0

    def outputs_for(indices: Array) -> list[tuple[Array, Array, float]]:
        if config.output == "random_iterate" and T >= 1:
            tu = run_optimizer(problem, pair.base, config, _indices=indices, _output_index=1)
            tv = run_optimizer(problem, pair.neighbor, config, _indices=indices, _output_index=1)
            return [(tu.iterates[r - 1], tv.iterates[r - 1], 1.0 / T) for r in range(1, T + 1)]
        tu = run_optimizer(problem, pair.base, config, _indices=indices)
        tv = run_optimizer(problem, pair.neighbor, config, _indices=indices)
        return [(tu.output, tv.output, 1.0)]

    count = 0
    for seq in itertools.product(range(n), repeat=T):
        count += 1
        for u, v, weight in outputs_for(np.asarray(seq, dtype=np.int64)):
            if measure == "function_values":
                acc += weight * (problem.batch_loss(u, PX, Py) - problem.batch_loss(v, PX, Py))
            elif measure == "gradients":
                gdiff = problem.batch_subgrad(u, PX, Py) - problem.batch_subgrad(v, PX, Py)
                acc += weight * np.sum(gdiff * gdiff, axis=1)
            else:
                total += weight * float(np.linalg.norm(u - v))

    if measure == "arguments":
        return total / count
    means = acc / count
    if measure == "function_values":
        return max(float(np.max(means)), 0.0)
    return math.sqrt(max(float(np.max(means)), 0.0))


def inclusion_probability(n: int, T: int, mode: str = "exact") -> float:
    """Probability that a fixed index appears among T uniform draws from [n].

    mode="exact": 1 - (1 - 1/n)^T;  mode="bound": min(T/n, 1).
    """
    if n < 1 or T < 0:
        raise ConfigError("need n >= 1 and T >= 0")
    if mode == "exact":
        return 1.0 - (1.0 - 1.0 / n) ** T
    if mode == "bound":
        return min(T / n, 1.0)
    raise ConfigError(f"unknown mode {mode!r}; expected 'exact' or 'bound'")
