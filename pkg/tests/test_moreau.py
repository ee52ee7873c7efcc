"""Envelope and prox oracles: scalar closed forms, a separable
soft-threshold case in 2-D, finite differences, resolvent contraction
factors, and the failure contracts of the inner solver."""

import math

import numpy as np
import pytest

from wcopt.errors import ConfigError, ProxConvergenceError
from wcopt.moreau import (
    MoreauConfig,
    MoreauResult,
    RiskObjective,
    default_smoothing,
    envelope_gradient,
    envelope_value,
    prox,
    prox_oracle_1d,
)
from wcopt.problems import (
    AbsoluteRegression,
    Dataset,
    PhaseRetrieval,
    PopulationPool,
    QuadraticLoss,
    SmoothedRegression,
    make_problem,
)
from wcopt._seeding import substream


def _scalar_absolute():
    # psi(v) = |v| as an empirical risk: one example, unit feature, target 0.
    pool = PopulationPool(np.array([[1.0]]), np.array([0.0]))
    return RiskObjective(AbsoluteRegression(pool), pool)


def _scalar_quadratic():
    # psi(v) = v^2 / 2: one anchor at the origin.
    pool = PopulationPool(np.array([[0.0]]), np.array([0.0]))
    return RiskObjective(QuadraticLoss(pool), pool)


def test_oracle_1d_hand_values():
    res = prox_oracle_1d("absolute", 0.5, 2.0)
    assert res.prox_point[0] == 1.5
    assert res.envelope_value == 1.75
    assert res.envelope_gradient[0] == 1.0
    # inside the threshold the prox collapses to zero and the envelope
    # is the quadratic cap w^2 / (2 lam)
    res = prox_oracle_1d("absolute", 0.5, 0.3)
    assert res.prox_point[0] == 0.0
    assert res.envelope_value == pytest.approx(0.09, abs=1e-15)
    res = prox_oracle_1d("quadratic", 1.0, 2.0)
    assert res.prox_point[0] == 1.0
    assert res.envelope_value == 1.0
    assert res.envelope_gradient[0] == 1.0


def test_oracle_1d_rejects_bad_arguments():
    for lam in (0.0, -1.0, math.inf, math.nan):
        with pytest.raises(ConfigError):
            prox_oracle_1d("absolute", lam, 1.0)
    with pytest.raises(ConfigError):
        prox_oracle_1d("huber", 1.0, 1.0)


def test_prox_matches_scalar_closed_forms():
    quad = _scalar_quadratic()
    absr = _scalar_absolute()
    rng = substream(20260823, "moreau", "closed")
    worst = 0.0
    for _ in range(50):
        lam = float(rng.uniform(0.05, 2.0))
        w = float(rng.uniform(-3.0, 3.0))
        cfg = MoreauConfig(lam, 1e-10)
        for obj, kind in ((quad, "quadratic"), (absr, "absolute")):
            got = prox(obj, np.array([w]), cfg)
            want = prox_oracle_1d(kind, lam, w)
            worst = max(
                worst,
                abs(float(got.prox_point[0]) - float(want.prox_point[0])),
                abs(got.envelope_value - want.envelope_value),
            )
    assert worst <= 1e-10
    # the threshold interior, exercised explicitly
    res = prox(absr, np.array([0.25]), MoreauConfig(0.5, 1e-10))
    assert abs(float(res.prox_point[0])) <= 1e-12


def test_prox_separable_soft_threshold_2d():
    # Axis-aligned unit features make the absolute risk separable:
    # psi(v) = (|v1| + |v2|) / 2, so each coordinate soft-thresholds
    # at lam / 2.
    pool = PopulationPool(np.array([[1.0, 0.0], [0.0, 1.0]]), np.zeros(2))
    obj = RiskObjective(AbsoluteRegression(pool), pool)
    rng = substream(20260823, "moreau", "separable")
    for _ in range(25):
        lam = float(rng.uniform(0.1, 1.5))
        w = rng.normal(0.0, 1.0, size=2)
        res = prox(obj, w, MoreauConfig(lam, 1e-10))
        want = np.sign(w) * np.maximum(np.abs(w) - lam / 2.0, 0.0)
        assert np.max(np.abs(res.prox_point - want)) <= 1e-9
        env_want = float(np.sum(np.abs(want))) / 2.0 + float(
            np.sum((w - want) ** 2)
        ) / (2.0 * lam)
        assert res.envelope_value == pytest.approx(env_want, abs=1e-9)


def test_envelope_never_exceeds_risk():
    rng = substream(20260823, "moreau", "upper")
    for kind in ("phase_retrieval", "absolute_regression", "smoothed_regression", "quadratic"):
        problem = make_problem(kind, 3, 40, 91, noise=0.2)
        obj = RiskObjective(problem, problem.pool)
        rho = problem.weak_convexity()
        lam = default_smoothing(rho) if rho > 0 else 0.5
        cfg = MoreauConfig(lam, 1e-9)
        for _ in range(5):
            w = rng.normal(0.0, 1.0, size=3)
            env = envelope_value(obj, w, cfg)
            assert env <= obj.exact_value(w) + 1e-12


def test_envelope_gradient_identity_and_wrappers():
    problem = make_problem("phase_retrieval", 4, 30, 17, noise=0.2)
    obj = RiskObjective(problem, problem.pool)
    cfg = MoreauConfig(default_smoothing(problem.weak_convexity()), 1e-10)
    w = substream(20260823, "moreau", "ident").normal(0.0, 1.0, size=4)
    res = prox(obj, w, cfg)
    assert np.array_equal(res.envelope_gradient, (w - res.prox_point) / cfg.lam)
    assert envelope_value(obj, w, cfg) == res.envelope_value
    assert np.array_equal(envelope_gradient(obj, w, cfg), res.envelope_gradient)


def test_envelope_gradient_matches_finite_differences():
    problem = make_problem("phase_retrieval", 4, 30, 23, noise=0.3)
    obj = RiskObjective(problem, problem.pool)
    cfg = MoreauConfig(default_smoothing(problem.weak_convexity()), 1e-10)
    rng = substream(20260823, "moreau", "fd")
    h = 1e-5
    for _ in range(8):
        w = rng.normal(0.0, 1.0, size=4)
        grad = prox(obj, w, cfg).envelope_gradient
        fd = np.empty(4)
        for j in range(4):
            e = np.zeros(4)
            e[j] = h
            fd[j] = (
                envelope_value(obj, w + e, cfg) - envelope_value(obj, w - e, cfg)
            ) / (2.0 * h)
        denom = max(float(np.linalg.norm(grad)), 1e-8)
        assert float(np.linalg.norm(fd - grad)) / denom <= 1e-4


def test_prox_contraction_factors():
    rng = substream(20260823, "moreau", "lip")
    # convex risks: the prox is nonexpansive
    problem = make_problem("absolute_regression", 3, 25, 5, noise=0.2)
    obj = RiskObjective(problem, problem.pool)
    cfg = MoreauConfig(0.4, 1e-10)
    for _ in range(10):
        w1 = rng.normal(0.0, 1.0, size=3)
        w2 = rng.normal(0.0, 1.0, size=3)
        p1 = prox(obj, w1, cfg).prox_point
        p2 = prox(obj, w2, cfg).prox_point
        assert np.linalg.norm(p1 - p2) <= np.linalg.norm(w1 - w2) + 1e-6
    # weakly convex risks: Lipschitz factor 1 / (1 - lam rho), equal to 2
    # at the canonical smoothing level
    problem = make_problem("phase_retrieval", 3, 25, 7, noise=0.2)
    obj = RiskObjective(problem, problem.pool)
    rho = problem.weak_convexity()
    lam = default_smoothing(rho)
    cfg = MoreauConfig(lam, 1e-10)
    factor = 1.0 / (1.0 - lam * rho)
    for _ in range(10):
        w1 = rng.normal(0.0, 0.8, size=3)
        w2 = w1 + rng.normal(0.0, 0.1, size=3)
        p1 = prox(obj, w1, cfg).prox_point
        p2 = prox(obj, w2, cfg).prox_point
        assert np.linalg.norm(p1 - p2) <= factor * np.linalg.norm(w1 - w2) + 1e-6


def test_prox_fixed_point_at_minimizer():
    # quadratic: the risk minimizer is the anchor mean and the closed form
    # leaves it in place with a zero certificate
    pool = PopulationPool(np.array([[1.0, 2.0], [3.0, 0.0]]), np.zeros(2))
    obj = RiskObjective(QuadraticLoss(pool), pool)
    zbar = np.array([2.0, 1.0])
    res = prox(obj, zbar, MoreauConfig(0.7, 1e-10))
    assert np.max(np.abs(res.prox_point - zbar)) <= 1e-12
    assert res.inner_residual <= 1e-12

    # noiseless phase retrieval interpolates at the planted point; every
    # term sits on its kink there, and the zero subgradient certifies the
    # center itself as the prox
    problem = make_problem("phase_retrieval", 5, 200, 4242, noise=0.0)
    obj = RiskObjective(problem, problem.pool)
    cfg = MoreauConfig(default_smoothing(problem.weak_convexity()), 1e-8)
    w = np.asarray(problem.planted, dtype=float)
    res = prox(obj, w, cfg)
    assert res.inner_residual == 0.0
    assert np.array_equal(res.prox_point, w)
    assert res.envelope_value == pytest.approx(0.0, abs=1e-15)


def test_duplicate_examples_still_certify():
    # Exact duplicate rows make the pinned KKT system singular unless the
    # duplicates share one constraint; the center below sits on the
    # duplicated kink.
    feats = np.array([[1.0, 0.0], [1.0, 0.0], [0.6, 0.8], [-0.8, 0.6]])
    targs = np.array([0.25, 0.25, 0.09, 0.16])
    pool = PopulationPool(feats, targs)
    problem = PhaseRetrieval(pool)
    obj = RiskObjective(problem, Dataset(feats, targs))
    cfg = MoreauConfig(default_smoothing(problem.weak_convexity()), 1e-8)
    for w in (np.array([0.5, 0.3]), np.array([0.5, 0.0]), np.array([0.45, 0.28])):
        res = prox(obj, w, cfg)
        assert res.inner_residual <= 1e-8


def test_smoothing_level_cap_enforced():
    problem = make_problem("phase_retrieval", 3, 20, 11)
    obj = RiskObjective(problem, problem.pool)
    rho = problem.weak_convexity()
    w = np.zeros(3)
    with pytest.raises(ConfigError):
        prox(obj, w, MoreauConfig(1.0 / rho, 1e-8))
    prox(obj, w, MoreauConfig(0.99 / rho, 1e-8))


def test_config_and_shape_validation():
    for bad in (0.0, -1.0, math.inf):
        with pytest.raises(ConfigError):
            MoreauConfig(bad)
    with pytest.raises(ConfigError):
        MoreauConfig(0.5, 0.0)
    with pytest.raises(ConfigError):
        MoreauConfig(0.5, 1e-8, 0)
    obj = _scalar_absolute()
    with pytest.raises(ConfigError):
        prox(obj, np.zeros(2), MoreauConfig(0.5))
    pool = PopulationPool(np.eye(2), np.zeros(2))
    with pytest.raises(ConfigError):
        RiskObjective(AbsoluteRegression(pool), PopulationPool(np.ones((3, 3)), np.zeros(3)))


def test_nonconvergence_carries_best_iterate():
    # an unreachable tolerance forces the budget path; the exception must
    # surface the best iterate and its honest residual
    problem = make_problem("smoothed_regression", 3, 30, 29, noise=0.3)
    obj = RiskObjective(problem, problem.pool)
    cfg = MoreauConfig(default_smoothing(problem.weak_convexity()), 1e-300)
    with pytest.raises(ProxConvergenceError) as excinfo:
        prox(obj, np.array([0.4, -0.2, 0.9]), cfg)
    res = excinfo.value.result
    assert isinstance(res, MoreauResult)
    assert res.inner_residual > 1e-300
    assert np.all(np.isfinite(res.prox_point))
    assert math.isfinite(res.envelope_value)

    # piecewise path, tiny budget
    problem = make_problem("absolute_regression", 3, 30, 31, noise=0.3)
    obj = RiskObjective(problem, problem.pool)
    with pytest.raises(ProxConvergenceError) as excinfo:
        prox(obj, np.array([0.4, -0.2, 0.9]), MoreauConfig(0.4, 1e-300, 3))
    assert excinfo.value.result.inner_residual > 0.0


def test_default_smoothing_values():
    assert default_smoothing(2.0) == 0.25
    assert default_smoothing(0.5) == 1.0
    for rho in (0.0, -1.0):
        with pytest.raises(ConfigError):
            default_smoothing(rho)


def test_smooth_newton_matches_subgradient_structure():
    # the smoothed-regression prox satisfies the exact stationarity
    # equation grad psi(v) + (v - w)/lam = 0; recheck it independently
    problem = make_problem("smoothed_regression", 3, 40, 37, noise=0.3)
    obj = RiskObjective(problem, problem.pool)
    cfg = MoreauConfig(default_smoothing(problem.weak_convexity()), 1e-10)
    w = np.array([0.3, -0.5, 0.8])
    res = prox(obj, w, cfg)
    _, g = obj.value_and_mean_subgrad(res.prox_point)
    station = g + (res.prox_point - w) / cfg.lam
    assert float(np.linalg.norm(station)) <= 1e-10
