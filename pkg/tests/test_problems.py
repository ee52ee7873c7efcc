"""Loss-problem oracles: hand-computed values, certified constants, exact
summation, and the structural checks the growth conditions rely on."""

import math

import numpy as np
import pytest

from wcopt.errors import ConfigError
from wcopt.problems import (
    Dataset,
    Example,
    GrowthCondition,
    PopulationPool,
    QuadraticLoss,
    loss_eval,
    make_problem,
    problem_constants,
    relaxed_growth_check,
    risk_eval,
    sgc_ratio,
)
from wcopt._seeding import substream


def _single(kind, features, target):
    pool = PopulationPool(np.array([features], dtype=float), np.array([target], dtype=float))
    from wcopt.problems import _PROBLEM_CLASSES
    return _PROBLEM_CLASSES[kind](pool)


def test_phase_retrieval_hand_values():
    prob = _single("phase_retrieval", [1.0, 0.0], 0.0)
    val, grad = loss_eval(prob, np.array([1.0, 1.0]), Example(np.array([1.0, 0.0]), 0.0))
    assert val == 1.0
    assert np.array_equal(grad, np.array([2.0, 0.0]))
    # exactly on the kink: the chosen subgradient is 0 (sign(0) = 0)
    val, grad = loss_eval(prob, np.array([1.0, 1.0]), Example(np.array([1.0, 0.0]), 1.0))
    assert val == 0.0
    assert np.array_equal(grad, np.zeros(2))


def test_absolute_regression_hand_values():
    prob = _single("absolute_regression", [1.0, 2.0], 1.0)
    val, grad = loss_eval(prob, np.array([1.0, 1.0]), Example(np.array([1.0, 2.0]), 1.0))
    assert val == 2.0
    assert np.array_equal(grad, np.array([1.0, 2.0]))
    val, grad = loss_eval(prob, np.array([1.0, 1.0]), Example(np.array([1.0, 2.0]), 3.0))
    assert val == 0.0
    assert np.array_equal(grad, np.zeros(2))


def test_quadratic_hand_values():
    prob = _single("quadratic", [2.0], 0.0)
    val, grad = loss_eval(prob, np.array([0.0]), Example(np.array([2.0]), 0.0))
    assert val == 2.0
    assert np.array_equal(grad, np.array([-2.0]))


def test_smoothed_regression_hand_values():
    prob = _single("smoothed_regression", [1.0, 0.0], 0.0)
    val, grad = loss_eval(prob, np.array([1.0, 5.0]), Example(np.array([1.0, 0.0]), 0.0))
    assert val == pytest.approx(math.log(2.0), abs=1e-15)
    assert grad == pytest.approx(np.array([1.0, 0.0]), abs=1e-15)


def test_phase_retrieval_sign_symmetry():
    prob = make_problem("phase_retrieval", 4, 50, 3)
    rng = substream(9, "sym")
    for _ in range(20):
        w = rng.standard_normal(4)
        v_plus, _ = risk_eval(prob, w, prob.pool)
        v_minus, _ = risk_eval(prob, -w, prob.pool)
        assert v_plus == v_minus


def test_risk_eval_permutation_bit_exact():
    prob = make_problem("absolute_regression", 3, 200, 5)
    rng = substream(5, "perm")
    S = prob.pool.draw(64, rng)
    w = rng.standard_normal(3)
    v0, g0 = risk_eval(prob, w, S)
    for _ in range(5):
        order = rng.permutation(64)
        shuffled = Dataset(S.features[order], S.targets[order])
        v, g = risk_eval(prob, w, shuffled)
        assert v == v0
        assert np.array_equal(g, g0)


@pytest.mark.parametrize("kind", ["smoothed_regression", "quadratic"])
def test_smooth_subgradients_match_finite_differences(kind):
    prob = make_problem(kind, 4, 30, 8)
    rng = substream(8, "fd", kind)
    h = 1e-6
    for _ in range(10):
        w = rng.standard_normal(4) * 0.7
        _, grad = risk_eval(prob, w, prob.pool)
        fd = np.empty(4)
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            fd[j] = (risk_eval(prob, w + e, prob.pool)[0]
                     - risk_eval(prob, w - e, prob.pool)[0]) / (2 * h)
        assert fd == pytest.approx(grad, abs=1e-5)


def test_absolute_regression_is_convex_along_segments():
    prob = make_problem("absolute_regression", 3, 40, 2)
    rng = substream(2, "cvx")
    for _ in range(30):
        w1 = rng.standard_normal(3)
        w2 = rng.standard_normal(3)
        mid = 0.5 * (w1 + w2)
        f1 = risk_eval(prob, w1, prob.pool)[0]
        f2 = risk_eval(prob, w2, prob.pool)[0]
        fm = risk_eval(prob, mid, prob.pool)[0]
        assert fm <= 0.5 * (f1 + f2) + 1e-12


@pytest.mark.parametrize("kind", ["phase_retrieval", "smoothed_regression"])
def test_weak_convexity_certificate_along_segments(kind):
    """f + (rho/2)||.||^2 must be convex for the certified rho."""
    prob = make_problem(kind, 3, 40, 4)
    rho = prob.weak_convexity()
    rng = substream(4, "wc", kind)

    def phi(w):
        return risk_eval(prob, w, prob.pool)[0] + 0.5 * rho * float(w @ w)

    for _ in range(30):
        w1 = rng.standard_normal(3)
        w2 = rng.standard_normal(3)
        mid = 0.5 * (w1 + w2)
        assert phi(mid) <= 0.5 * (phi(w1) + phi(w2)) + 1e-10


def test_constants_scale_with_feature_norms():
    pool = PopulationPool(np.array([[1.0, 1.0]]), np.array([0.5]))
    from wcopt.problems import AbsoluteRegression, PhaseRetrieval
    phase = PhaseRetrieval(pool)
    # max ||a||^2 = 2, so rho = 2 * 2 = 4 and G = 2 R max||a||^2
    assert phase.weak_convexity() == pytest.approx(4.0)
    c = phase.constants(1.5)
    assert c.lipschitz == pytest.approx(2.0 * 1.5 * 2.0)
    assert c.value_bound == pytest.approx(2.0 * 1.5**2 + 0.5)
    absr = AbsoluteRegression(pool)
    ca = absr.constants(2.0)
    assert ca.lipschitz == pytest.approx(math.sqrt(2.0))
    assert ca.weak_convexity == 0.0


def test_unit_sphere_features_give_unit_constants():
    prob = make_problem("phase_retrieval", 6, 500, 13)
    norms = np.linalg.norm(prob.pool.features, axis=1)
    assert norms == pytest.approx(np.ones(500), abs=1e-12)
    assert prob.weak_convexity() == pytest.approx(2.0)
    assert problem_constants(prob, 1.0).lipschitz == pytest.approx(2.0)


def test_phase_targets_nonnegative_under_noise():
    prob = make_problem("phase_retrieval", 4, 300, 21, noise=0.5)
    assert np.all(prob.pool.targets >= 0.0)


def test_planted_norm_respected():
    for kind in ("phase_retrieval", "absolute_regression", "smoothed_regression"):
        prob = make_problem(kind, 5, 10, 1, planted_norm=0.75)
        assert np.linalg.norm(prob.planted) == pytest.approx(0.75)


def test_realizable_instances_minimize_at_planted():
    for kind in ("absolute_regression", "smoothed_regression", "phase_retrieval"):
        prob = make_problem(kind, 3, 100, 6, noise=0.0)
        v_star = risk_eval(prob, prob.planted, prob.pool)[0]
        assert v_star == pytest.approx(0.0, abs=1e-12)
        rng = substream(6, "probe", kind)
        for _ in range(5):
            assert risk_eval(prob, rng.standard_normal(3), prob.pool)[0] >= v_star


def test_sgc_ratio_cases():
    pool = PopulationPool(np.array([[1.0], [3.0]]), np.zeros(2))
    prob = QuadraticLoss(pool)
    S = Dataset(pool.features, pool.targets)
    # at the anchor mean the mean gradient vanishes but per-example ones do not
    assert sgc_ratio(prob, S, np.array([2.0])) == math.inf
    # single example: numerator equals denominator
    one = Dataset(np.array([[1.0]]), np.zeros(1))
    assert sgc_ratio(prob, one, np.array([5.0])) == 1.0
    # both vanish at the anchor itself
    assert sgc_ratio(prob, one, np.array([1.0])) == 1.0


def test_relaxed_growth_quadratic_identity():
    """||grad f_i||^2 = 2 f_i exactly, so (b1=2, b2=0) holds with slack 0."""
    prob = make_problem("quadratic", 3, 50, 10)
    S = prob.pool.draw(20, substream(10, "grow"))
    probes = substream(10, "probes").standard_normal((5, 3))
    holds, worst = relaxed_growth_check(prob, S, probes, GrowthCondition(2.0, 0.0))
    assert holds
    assert worst == pytest.approx(0.0, abs=1e-12)
    holds_tight, worst_tight = relaxed_growth_check(
        prob, S, probes, GrowthCondition(1.9, 0.0))
    assert not holds_tight
    assert worst_tight > 0.0


def test_problem_json_round_trip():
    from wcopt.problems import LossProblem
    prob = make_problem("phase_retrieval", 3, 20, 12, noise=0.2)
    clone = LossProblem.from_json(prob.to_json())
    assert type(clone) is type(prob)
    assert np.array_equal(clone.pool.features, prob.pool.features)
    assert np.array_equal(clone.pool.targets, prob.pool.targets)
    assert np.array_equal(clone.planted, prob.planted)


def test_dataset_replaced_and_readonly():
    prob = make_problem("absolute_regression", 2, 10, 3)
    S = prob.pool.draw(4, substream(3, "draw"))
    repl = prob.pool.example(7)
    S2 = S.replaced(2, repl)
    assert np.array_equal(S2.features[2], repl.features)
    assert S2.targets[2] == repl.target
    mask = np.arange(4) != 2
    assert np.array_equal(S2.features[mask], S.features[mask])
    with pytest.raises(ValueError):
        S.features[0, 0] = 99.0


def test_make_problem_rejects_bad_arguments():
    with pytest.raises(ConfigError):
        make_problem("no_such_kind", 2, 10, 0)
    with pytest.raises(ConfigError):
        make_problem("quadratic", 0, 10, 0)
    with pytest.raises(ConfigError):
        make_problem("quadratic", 2, 10, 0, noise=-0.1)


def test_pool_draw_is_seed_deterministic():
    prob = make_problem("absolute_regression", 2, 50, 1)
    a = prob.pool.draw(8, substream(42, "x"))
    b = prob.pool.draw(8, substream(42, "x"))
    assert np.array_equal(a.features, b.features)
    assert np.array_equal(a.targets, b.targets)
