"""Coupled-run stability: an exactly solvable half-probability case, Monte
Carlo against full enumeration, the closed-form bounds, and the inclusion
probability that drives all of them."""

import itertools
import math

import numpy as np
import pytest

from wcopt.errors import ConfigError
from wcopt.optimizers import OptimizerConfig, PrivacyBudget, StepSchedule, run_optimizer
from wcopt.problems import (
    Dataset,
    Example,
    PopulationPool,
    ProblemConstants,
    QuadraticLoss,
    make_problem,
    problem_constants,
)
from wcopt.stability import (
    NeighborPair,
    coupled_stability_estimate,
    exact_expectation_enumerate,
    inclusion_probability,
    neighbor_dataset,
    stability_bound,
)


def _anchor_pool(anchors):
    arr = np.array([[float(a)] for a in anchors])
    return PopulationPool(arr, np.zeros(len(anchors)))


def _quadratic_setup(anchors, sample_anchors, replacement):
    pool = _anchor_pool(anchors)
    problem = QuadraticLoss(pool)
    sample = Dataset(np.array([[float(a)] for a in sample_anchors]), np.zeros(len(sample_anchors)))
    pair = neighbor_dataset(sample, len(sample_anchors), Example(np.array([float(replacement)]), 0.0))
    return problem, pair


def test_neighbor_dataset_contract():
    data = Dataset(np.array([[1.0], [2.0]]), np.array([0.0, 0.0]))
    pair = neighbor_dataset(data, 2, Example(np.array([9.0]), 0.0))
    assert pair.replaced_index == 2
    assert pair.base.features[1, 0] == 2.0
    assert pair.neighbor.features[1, 0] == 9.0
    assert pair.neighbor.features[0, 0] == 1.0
    for bad in (0, 3):
        with pytest.raises(ConfigError):
            neighbor_dataset(data, bad, Example(np.array([9.0]), 0.0))


def test_single_step_replacement_is_exactly_half():
    # one eta = 1 step from the origin lands on the sampled anchor, so the
    # coupled outputs differ only when the replaced position (anchor 0
    # versus 1) is drawn: probability 1/2, distance 1
    problem, pair = _quadratic_setup([0.0, 1.0], [0.0, 0.0], 1.0)
    config = OptimizerConfig("sgd", StepSchedule("constant", 1.0), T=1, seed=5)
    exact = exact_expectation_enumerate(problem, pair, config, "arguments")
    assert exact == 0.5
    report = coupled_stability_estimate(problem, pair, config, "arguments", trials=2000)
    assert abs(report.epsilon_hat - 0.5) <= 3.0 * report.std_error + 1e-12
    assert report.trials == 2000 and report.n == 2 and report.T == 1


def test_monte_carlo_matches_enumeration():
    problem, pair = _quadratic_setup([0.0, 1.0, 2.0, -1.0], [0.0, 1.0, 2.0], -1.0)
    config = OptimizerConfig("sgd", StepSchedule("constant", 0.5), T=2, seed=12)
    for measure in ("arguments", "function_values", "gradients"):
        exact = exact_expectation_enumerate(problem, pair, config, measure)
        report = coupled_stability_estimate(problem, pair, config, measure, trials=3000)
        assert abs(report.epsilon_hat - exact) <= 3.0 * report.std_error + 1e-9
        assert report.sup_over_z == (measure != "arguments")


def test_random_iterate_enumeration_averages_selector():
    problem, pair = _quadratic_setup([0.0, 1.0], [0.0, 0.0], 1.0)
    config = OptimizerConfig(
        "sgd", StepSchedule("constant", 1.0), T=2, seed=3, output="random_iterate"
    )
    exact = exact_expectation_enumerate(problem, pair, config, "arguments")
    report = coupled_stability_estimate(problem, pair, config, "arguments", trials=4000)
    assert abs(report.epsilon_hat - exact) <= 3.0 * report.std_error + 1e-9


def test_enumeration_guards():
    problem, pair = _quadratic_setup([0.0, 1.0], [0.0, 0.0], 1.0)
    config = OptimizerConfig("sgd", StepSchedule("constant", 1.0), T=1, seed=5)
    with pytest.raises(ConfigError):
        exact_expectation_enumerate(problem, pair, config, "median")
    budget = PrivacyBudget(1.0, 1e-3, 0.5, 1.0)
    dp_cfg = OptimizerConfig(
        "dp_sgd", StepSchedule("constant", 1.0), T=1, seed=5, projection_radius=1.0, privacy=budget
    )
    with pytest.raises(ConfigError):
        exact_expectation_enumerate(problem, pair, dp_cfg, "arguments")
    big = make_problem("quadratic", 1, 60, 9)
    sample = big.pool.draw(60, np.random.default_rng(1))
    big_pair = neighbor_dataset(sample, 60, Example(np.array([0.0]), 0.0))
    over = OptimizerConfig("sgd", StepSchedule("constant", 0.5), T=4, seed=5)
    with pytest.raises(ConfigError, match="enumeration limit"):
        exact_expectation_enumerate(big, big_pair, over, "arguments")


def test_zero_horizon_is_exactly_stable():
    problem, pair = _quadratic_setup([0.0, 1.0], [0.0, 0.0], 1.0)
    config = OptimizerConfig("sgd", StepSchedule("constant", 1.0), T=0, seed=5)
    assert exact_expectation_enumerate(problem, pair, config, "arguments") == 0.0
    report = coupled_stability_estimate(problem, pair, config, "arguments", trials=50)
    assert report.epsilon_hat == 0.0


def test_identical_replacement_is_exactly_stable():
    problem, pair = _quadratic_setup([0.0, 1.0], [0.0, 1.0], 1.0)
    config = OptimizerConfig("sgd", StepSchedule("constant", 0.7), T=4, seed=5)
    for measure in ("arguments", "function_values", "gradients"):
        report = coupled_stability_estimate(problem, pair, config, measure, trials=40)
        assert report.epsilon_hat == 0.0


def test_unsampled_replacement_keeps_runs_identical():
    problem = make_problem("quadratic", 2, 40, 21)
    sample = problem.pool.draw(12, np.random.default_rng(2))
    pair = neighbor_dataset(sample, 12, Example(np.array([5.0, -5.0]), 0.0))
    sched = StepSchedule("constant", 0.3)
    for seed in range(25):
        cfg = OptimizerConfig("sgd", sched, T=6, seed=seed)
        base = run_optimizer(problem, pair.base, cfg)
        twin = run_optimizer(problem, pair.neighbor, cfg)
        if 12 not in base.sampled_indices():
            assert np.array_equal(base.iterates, twin.iterates)
        else:
            assert not np.array_equal(base.iterates, twin.iterates)


def test_inclusion_probability_against_enumeration():
    for n in range(1, 5):
        for T in range(0, 5):
            hits = 0
            for seq in itertools.product(range(n), repeat=T):
                if 0 in seq:
                    hits += 1
            exact = inclusion_probability(n, T, "exact")
            assert abs(exact - hits / n**T) <= 1e-12
            assert exact <= inclusion_probability(n, T, "bound") + 1e-15
    assert inclusion_probability(10, 0) == 0.0
    assert inclusion_probability(1, 3) == 1.0
    with pytest.raises(ConfigError):
        inclusion_probability(0, 1)
    with pytest.raises(ConfigError):
        inclusion_probability(5, -1)
    with pytest.raises(ConfigError):
        inclusion_probability(5, 1, "approx")


def test_stability_bound_formulas():
    consts = ProblemConstants(3.0, 0.0, None, 2.0, 1.5)
    assert stability_bound("function_values", consts, 10, 5) == 8.0
    assert stability_bound("gradients", consts, 10, 5) == pytest.approx(6.0 * math.sqrt(2.0))
    assert stability_bound("arguments", consts, 10, 5) == 6.0
    with pytest.raises(ConfigError):
        stability_bound("outputs", consts, 10, 5)


def test_bound_attachment_requires_certified_radius():
    problem = make_problem("quadratic", 1, 30, 33)
    sample = problem.pool.draw(10, np.random.default_rng(3))
    pair = neighbor_dataset(sample, 10, Example(np.array([0.5]), 0.0))
    consts = problem_constants(problem, 1.0)
    good = OptimizerConfig("sgd", StepSchedule("constant", 0.1), T=3, seed=1, projection_radius=1.0)
    report = coupled_stability_estimate(
        problem, pair, good, "arguments", trials=60, constants=consts
    )
    assert report.theoretical_bound == stability_bound("arguments", consts, 3, 10)
    assert report.epsilon_hat <= report.theoretical_bound
    for bad_radius in (None, 0.7):
        bad = OptimizerConfig(
            "sgd", StepSchedule("constant", 0.1), T=3, seed=1, projection_radius=bad_radius
        )
        with pytest.raises(ConfigError):
            coupled_stability_estimate(problem, pair, bad, "arguments", trials=5, constants=consts)


def test_instability_grows_with_horizon():
    problem, pair = _quadratic_setup([0.0, 1.0, 2.0], [0.0, 1.0, 2.0], -1.0)
    values = []
    for T in (1, 2, 4):
        config = OptimizerConfig("sgd", StepSchedule("constant", 0.5), T=T, seed=2)
        values.append(exact_expectation_enumerate(problem, pair, config, "arguments"))
    assert values[0] < values[1] < values[2]


def test_probe_example_forms_agree():
    problem, pair = _quadratic_setup([0.0, 1.0, 2.0], [0.0, 1.0], 2.0)
    config = OptimizerConfig("sgd", StepSchedule("constant", 0.5), T=2, seed=8)
    probes = [Example(np.array([0.5]), 0.0), Example(np.array([-1.0]), 0.0)]
    as_list = coupled_stability_estimate(
        problem, pair, config, "function_values", trials=200, probe_examples=probes
    )
    as_data = coupled_stability_estimate(
        problem,
        pair,
        config,
        "function_values",
        trials=200,
        probe_examples=Dataset(np.array([[0.5], [-1.0]]), np.zeros(2)),
    )
    assert as_list.epsilon_hat == as_data.epsilon_hat


def test_estimate_validation():
    problem, pair = _quadratic_setup([0.0, 1.0], [0.0, 0.0], 1.0)
    config = OptimizerConfig("sgd", StepSchedule("constant", 1.0), T=1, seed=5)
    with pytest.raises(ConfigError):
        coupled_stability_estimate(problem, pair, config, "arguments", trials=0)
    with pytest.raises(ConfigError):
        coupled_stability_estimate(problem, pair, config, "spread", trials=5)
    lopsided = NeighborPair(
        pair.base, Dataset(np.array([[0.0], [1.0], [2.0]]), np.zeros(3)), 1
    )
    with pytest.raises(ConfigError):
        coupled_stability_estimate(problem, lopsided, config, "arguments", trials=5)


def test_report_serialization():
    problem, pair = _quadratic_setup([0.0, 1.0], [0.0, 0.0], 1.0)
    config = OptimizerConfig("sgd", StepSchedule("constant", 1.0), T=1, seed=5)
    report = coupled_stability_estimate(problem, pair, config, "arguments", trials=10)
    doc = report.to_json_dict()
    assert doc["measure"] == "arguments"
    assert doc["trials"] == 10
    assert doc["eta"] == 1.0
    assert set(doc) == {
        "measure", "epsilon_hat", "std_error", "trials", "sup_over_z",
        "theoretical_bound", "n", "T", "eta",
    }
