"""Self-contained acceptance suite behind the `verify` subcommand.

Each criterion is a deterministic function of the master seed.  Criteria emit
detail rows (kind "check") holding the measured quantities next to their
thresholds, plus one summary row (kind "acceptance", n = criterion number)
whose estimate is 1.0 on pass and 0.0 on fail.  `verify` executes the suite
twice under different thread budgets and byte-compares the two reports, which
is itself the final criterion.

Thresholds are pinned here, not tuned at run time; a red criterion stays red.
"""

from __future__ import annotations

import itertools
import math
from concurrent.futures import ThreadPoolExecutor
from fractions import Fraction

import numpy as np

from ._seeding import derive_seed, substream
from .generalization import fit_rate, generalization_gap
from .harness import SCHEMA, Report, Row, emit_report
from .moreau import MoreauConfig, RiskObjective, prox, prox_oracle_1d
from .optimizers import (
    OptimizerConfig,
    StepSchedule,
    canonical_beta,
    dp_noise_scale,
    dp_privacy_precheck,
    run_optimizer,
    tuned_schedule,
)
from .problems import (
    AbsoluteRegression,
    Dataset,
    Example,
    PopulationPool,
    QuadraticLoss,
    make_problem,
    problem_constants,
    risk_eval,
)
from .stability import (
    coupled_stability_estimate,
    exact_expectation_enumerate,
    inclusion_probability,
    neighbor_dataset,
)

DEFAULT_SEED = 20260823

CRITERIA = (
    "c01_prox_closed_forms",
    "c02_envelope_gradient_fd",
    "c03_enumeration_oracle",
    "c04_inclusion_probability",
    "c05_bit_exact_coupling",
    "c06_stability_bound_compliance",
    "c07_moreau_gap_compliance",
    "c08_weakly_convex_rate",
    "c09_convex_rate",
    "c10_optimization_error_trend",
    "c11_dp_arithmetic",
    "c12_determinism",
)


def _row(measure, estimate, bound=None, slope=None, r2=None, n=0, T=0, eta=0.0):
    return Row("check", n, T, eta, measure, float(estimate), 0.0,
               None if bound is None else float(bound), slope, r2)


def _summary(number, name, passed):
    return Row("acceptance", number, 0, 0.0, name, 1.0 if passed else 0.0,
               0.0, 1.0, None, None)


def _scalar_pool(value):
    return PopulationPool(np.array([[value]]), np.array([0.0]))


def c01_prox_closed_forms(seed):
    """1-D numeric prox matches the closed forms to 1e-8."""
    rng = substream(seed, "c1")
    quad = QuadraticLoss(_scalar_pool(0.0))
    absr = AbsoluteRegression(_scalar_pool(1.0))
    worst = 0.0
    for _ in range(100):
        lam = float(rng.uniform(0.05, 2.0))
        w = float(rng.uniform(-3.0, 3.0))
        cfg = MoreauConfig(lam, 1e-10)
        for prob, kind in ((quad, "quadratic"), (absr, "absolute")):
            got = prox(RiskObjective(prob, prob.pool), np.array([w]), cfg)
            want = prox_oracle_1d(kind, lam, w)
            worst = max(worst, abs(float(got.prox_point[0]) - float(want.prox_point[0])))
            worst = max(worst, abs(got.envelope_value - want.envelope_value))
    rows = [_row("prox_closed_form_max_error", worst, 1e-8)]
    return rows, worst <= 1e-8


def c02_envelope_gradient_fd(seed):
    """Envelope gradient (w - prox)/lam vs central differences, 50 points."""
    problem = make_problem("phase_retrieval", 5, 50, derive_seed(seed, "c2_pool"))
    rho = problem.weak_convexity()
    cfg = MoreauConfig(1.0 / (2.0 * rho), 1e-8)
    obj = RiskObjective(problem, problem.pool)
    rng = substream(seed, "c2")
    h = 1e-5
    worst = 0.0
    for _ in range(50):
        w = rng.standard_normal(5) * 0.5
        res = prox(obj, w, cfg)
        fd = np.empty(5)
        for j in range(5):
            e = np.zeros(5)
            e[j] = h
            fd[j] = (prox(obj, w + e, cfg).envelope_value
                     - prox(obj, w - e, cfg).envelope_value) / (2.0 * h)
        denom = max(float(np.linalg.norm(res.envelope_gradient)), 1e-12)
        worst = max(worst, float(np.linalg.norm(fd - res.envelope_gradient)) / denom)
    rows = [_row("envelope_fd_max_rel_error", worst, 1e-4)]
    return rows, worst <= 1e-4


def _hand_problem():
    pool = PopulationPool(np.array([[0.0], [1.0], [2.0], [-1.0]]), np.zeros(4))
    return QuadraticLoss(pool)


def c03_enumeration_oracle(seed):
    """Coupled Monte Carlo vs exhaustive enumeration on 1-D quadratic SGD."""
    problem = _hand_problem()
    S = Dataset(np.array([[0.0], [1.0], [2.0]]), np.zeros(3))
    pair = neighbor_dataset(S, 3, Example(np.array([-1.0]), 0.0))
    cfg = OptimizerConfig("sgd", StepSchedule("constant", 0.5), T=2, output="last",
                          seed=derive_seed(seed, "c3"))
    exact = exact_expectation_enumerate(problem, pair, cfg, "arguments")
    mc = coupled_stability_estimate(problem, pair, cfg, "arguments", trials=100_000)
    dev = abs(mc.epsilon_hat - exact)
    lim = 3.0 * mc.std_error

    S2 = Dataset(np.array([[0.0], [1.0]]), np.zeros(2))
    pair2 = neighbor_dataset(S2, 2, Example(np.array([2.0]), 0.0))
    cfg2 = OptimizerConfig("sgd", StepSchedule("constant", 1.0), T=1, output="last", seed=0)
    hand = exact_expectation_enumerate(problem, pair2, cfg2, "arguments")

    rows = [
        _row("enumeration_mc_deviation", dev, lim, n=3, T=2),
        _row("enumeration_hand_case", hand, 0.5, n=2, T=1),
    ]
    return rows, dev <= lim and hand == 0.5


def c04_inclusion_probability(seed):
    """Exact inclusion probability vs enumerated frequency and the T/n cap."""
    worst = 0.0
    for n in range(1, 6):
        for T in range(0, 6):
            hits = sum(
                1 for seq in itertools.product(range(n), repeat=T) if 0 in seq
            )
            freq = hits / n**T
            worst = max(worst, abs(freq - inclusion_probability(n, T)))
    cap_ok = True
    for n in range(1, 60):
        for T in range(0, 60):
            if inclusion_probability(n, T) > inclusion_probability(n, T, "bound") + 1e-15:
                cap_ok = False
    rows = [
        _row("inclusion_enumeration_max_error", worst, 1e-12),
        _row("inclusion_cap_holds", 1.0 if cap_ok else 0.0, 1.0),
    ]
    return rows, worst <= 1e-12 and cap_ok


def c05_bit_exact_coupling(seed):
    """Omitted replaced index implies bit-identical coupled outputs."""
    problem = make_problem("absolute_regression", 5, 20_000, derive_seed(seed, "c5_pool"))
    S = problem.pool.draw(100, substream(seed, "c5_data"))
    pair = neighbor_dataset(S, 100, problem.pool.example(17))
    trials = 10_000
    p_omit = (1.0 - 1.0 / 100.0) ** 20
    se3 = 3.0 * math.sqrt(p_omit * (1.0 - p_omit) / trials)
    rows = []
    ok = True
    for alg, sched in (
        ("sgd", StepSchedule("constant", 0.05)),
        ("adagrad_norm", StepSchedule("adagrad", 0.5, b0=1.0)),
    ):
        base = OptimizerConfig(alg, sched, T=20, projection_radius=1.0, output="last", seed=0)
        violations = 0
        omitted = 0
        for t in range(trials):
            cfg = base.with_seed(derive_seed(seed, "c5", alg, t))
            tu = run_optimizer(problem, pair.base, cfg)
            tv = run_optimizer(problem, pair.neighbor, cfg)
            if 100 not in tu.sampled_indices():
                omitted += 1
                if not np.array_equal(tu.output, tv.output):
                    violations += 1
        frac = omitted / trials
        rows.append(_row(f"coupling_violations_{alg}", violations, 0.0, n=100, T=20))
        rows.append(_row(f"coupling_omit_fraction_dev_{alg}", abs(frac - p_omit), se3,
                         n=100, T=20))
        ok = ok and violations == 0 and abs(frac - p_omit) <= se3
    return rows, ok


def c06_stability_bound_compliance(seed):
    """All three measured stability estimates under their closed-form bounds."""
    problem = make_problem("absolute_regression", 5, 20_000, derive_seed(seed, "c6_pool"))
    constants = problem_constants(problem, 1.0)
    rows = []
    ok = True
    for ci, (n, T) in enumerate([(100, 10), (100, 50), (400, 10), (400, 50)]):
        S = problem.pool.draw(n, substream(seed, "c6_data", ci))
        pair = neighbor_dataset(S, n, problem.pool.example(11 + ci))
        cfg = OptimizerConfig("sgd", StepSchedule("constant", 0.05), T=T,
                              projection_radius=1.0, output="last",
                              seed=derive_seed(seed, "c6", ci))
        for m in ("function_values", "gradients", "arguments"):
            rep = coupled_stability_estimate(problem, pair, cfg, m, trials=500,
                                             constants=constants)
            limit = rep.theoretical_bound + 3.0 * rep.std_error
            rows.append(_row(f"stability_{m}", rep.epsilon_hat, limit, n=n, T=T,
                             eta=0.05))
            ok = ok and rep.epsilon_hat <= limit
    return rows, ok


def _spectral_direction(problem):
    """Top eigenvector of the target-weighted feature covariance.

    Standard initializer for squared-measurement fits: E[b a a^T] is a rank-one
    spike along the planted direction plus an isotropic term, so the leading
    eigenvector estimates the signal direction from data alone.
    """
    A = problem.pool.features
    b = problem.pool.targets
    C = (A.T * b) @ A / A.shape[0]
    return np.linalg.eigh(C)[1][:, -1]


def _weakly_convex_suite(seed, tag):
    # Mild target noise keeps the kinks of the piecewise risk spread out; with
    # exact targets every piece of the pool risk breaks at the planted point
    # and the prox solver cannot certify 1e-8 there.  The start is pulled back
    # along the spectral direction so the runs spend their budget descending
    # rather than wandering the flat region far from the signal.
    problem = make_problem("phase_retrieval", 10, 100_000, derive_seed(seed, tag),
                           noise=0.1)
    constants = problem_constants(problem, 1.0)
    moreau = MoreauConfig(1.0 / (2.0 * constants.weak_convexity), 1e-8)
    start = tuple(0.7 * _spectral_direction(problem))
    return problem, constants, moreau, start


def c07_moreau_gap_compliance(seed):
    """Moreau-gradient gap against 4G/sqrt(n) + sqrt(32 G eps rho) + slack."""
    problem, constants, moreau, start = _weakly_convex_suite(seed, "c7_pool")
    rows = []
    ok = True
    for ci, n in enumerate((500, 2000)):
        T, schedule = tuned_schedule("weakly_convex", n, constants)
        base = OptimizerConfig("sgd", schedule, T=T, projection_radius=1.0,
                               output="random_iterate", seed=0, initial_point=start)

        S = problem.pool.draw(n, substream(seed, "c7_data", ci))
        pair = neighbor_dataset(S, n, problem.pool.example(5 + ci))
        eps_rep = coupled_stability_estimate(
            problem, pair, base.with_seed(derive_seed(seed, "c7_eps", ci)),
            "arguments", trials=300, constants=constants)

        gap = generalization_gap(
            problem, problem.pool,
            base.with_seed(derive_seed(seed, "c7_gap", ci)),
            "moreau_gradients", n, 50, moreau=moreau,
            stability_epsilon=eps_rep.epsilon_hat, constants=constants)
        slack = 2.0 * gap.max_inner_residual / moreau.lam
        limit = gap.rhs_bound + 3.0 * gap.std_error + slack
        rows.append(_row("moreau_gap", gap.gap_estimate, limit, n=n, T=T,
                         eta=schedule.eta))
        rows.append(_row("moreau_gap_eps_hat", eps_rep.epsilon_hat,
                         eps_rep.theoretical_bound, n=n, T=T, eta=schedule.eta))
        ok = ok and gap.gap_estimate <= limit
    return rows, ok


def c08_weakly_convex_rate(seed):
    """Population envelope gradient at w_r falls with n at a power-law rate."""
    problem, constants, moreau, start = _weakly_convex_suite(seed, "c8_pool")
    pool_obj = RiskObjective(problem, problem.pool)
    points = []
    rows = []
    for ci, n in enumerate((250, 500, 1000, 2000, 4000)):
        T, schedule = tuned_schedule("weakly_convex", n, constants)
        base = OptimizerConfig("sgd", schedule, T=T, projection_radius=1.0,
                               output="random_iterate", seed=0, initial_point=start)
        vals = []
        for k in range(50):
            S = problem.pool.draw(n, substream(seed, "c8_data", ci, k))
            w = run_optimizer(problem, S, base.with_seed(
                derive_seed(seed, "c8_run", ci, k))).output
            res = prox(pool_obj, w, moreau)
            vals.append(float(np.linalg.norm(res.envelope_gradient)))
        est = float(np.mean(vals))
        points.append((float(n), est))
        rows.append(_row("pop_env_grad_norm", est, None, n=n, T=T, eta=schedule.eta))
    fit = fit_rate(points)
    rows.append(Row("check", len(points), 0, 0.0, "weakly_convex_rate_fit",
                    fit.intercept, 0.0, None, fit.slope, fit.r_squared))
    ok = -0.35 <= fit.slope <= -0.05 and fit.r_squared >= 0.7
    return rows, ok


def c09_convex_rate(seed):
    """Excess population risk of averaged SGD falls at close to n^{-1/3}."""
    problem = make_problem("absolute_regression", 5, 20_000, derive_seed(seed, "c9_pool"))
    constants = problem_constants(problem, 1.0)
    F_star = risk_eval(problem, problem.planted, problem.pool)[0]
    points = []
    rows = []
    for ci, n in enumerate((250, 500, 1000, 2000, 4000)):
        T, schedule = tuned_schedule("convex", n, constants)
        base = OptimizerConfig("sgd", schedule, T=T, projection_radius=1.0,
                               output="average", seed=0)
        vals = []
        for k in range(50):
            S = problem.pool.draw(n, substream(seed, "c9_data", ci, k))
            w = run_optimizer(problem, S, base.with_seed(
                derive_seed(seed, "c9_run", ci, k))).output
            vals.append(risk_eval(problem, w, problem.pool)[0] - F_star)
        est = float(np.mean(vals))
        points.append((float(n), est))
        rows.append(_row("excess_risk", est, None, n=n, T=T, eta=schedule.eta))
    fit = fit_rate(points)
    rows.append(Row("check", len(points), 0, 0.0, "convex_rate_fit",
                    fit.intercept, 0.0, None, fit.slope, fit.r_squared))
    ok = -0.50 <= fit.slope <= -0.18 and fit.r_squared >= 0.7
    return rows, ok


def c10_optimization_error_trend(seed):
    """Empirical (envelope) gradient norms at w_r shrink with T near T^{-1/4}."""
    rows = []
    ok = True

    # Noisy targets keep the empirical problem from interpolating; with exact
    # targets SGD converges linearly and the fitted trend leaves the window.
    problem_s = make_problem("smoothed_regression", 10, 20_000, derive_seed(seed, "c10_sp"),
                             noise=0.4)
    constants_s = problem_constants(problem_s, 1.5)
    problem_w, constants_w, moreau_w, start_w = _weakly_convex_suite(seed, "c10_wp")

    for tag, fit_name, window in (("smooth", "smooth_T_fit", (-0.4, -0.1)),
                                  ("weakly_convex", "weakly_convex_T_fit", (-0.4, -0.1))):
        points = []
        for ci, T in enumerate((100, 1000, 10_000)):
            if tag == "smooth":
                eta = 1.0 / (constants_s.lipschitz * math.sqrt(T))
                base = OptimizerConfig("sgd", StepSchedule("constant", eta), T=T,
                                       projection_radius=1.5, output="random_iterate",
                                       seed=0)
            else:
                rho = constants_w.weak_convexity
                eta = 1.0 / (constants_w.lipschitz * math.sqrt(rho * T))
                base = OptimizerConfig("sgd", StepSchedule("constant", eta), T=T,
                                       projection_radius=1.0, output="random_iterate",
                                       seed=0, initial_point=start_w)
            vals = []
            for k in range(20):
                if tag == "smooth":
                    S = problem_s.pool.draw(4000, substream(seed, "c10_sd", ci, k))
                    w = run_optimizer(problem_s, S, base.with_seed(
                        derive_seed(seed, "c10_sr", ci, k))).output
                    vals.append(float(np.linalg.norm(risk_eval(problem_s, w, S)[1])))
                else:
                    S = problem_w.pool.draw(4000, substream(seed, "c10_wd", ci, k))
                    w = run_optimizer(problem_w, S, base.with_seed(
                        derive_seed(seed, "c10_wr", ci, k))).output
                    res = prox(RiskObjective(problem_w, S), w, moreau_w)
                    vals.append(float(np.linalg.norm(res.envelope_gradient)))
            est = float(np.mean(vals))
            points.append((float(T), est))
            rows.append(_row(f"{tag}_grad_norm", est, None, n=4000, T=T, eta=eta))
        fit = fit_rate(points)
        rows.append(Row("check", len(points), 0, 0.0, fit_name,
                        fit.intercept, 0.0, None, fit.slope, fit.r_squared))
        ok = ok and window[0] <= fit.slope <= window[1]
    return rows, ok


def c11_dp_arithmetic(seed):
    """Noise-scale formula, exact 6 G^2 leading factor, precheck hand cases."""
    beta = canonical_beta(1000, 10_000, 1.0)
    got = dp_noise_scale(1.0, 1000, 10_000, 1.0, 1e-3, beta)
    want = 6.0 * (math.log(1000.0) / (1.0 - beta) + 1.0)
    rel = abs(got - want) / want

    rng = substream(seed, "c11")
    lead_exact = True
    for _ in range(100):
        T = int(rng.integers(1, 10_000))
        n = int(rng.integers(1, 100_000))
        G = Fraction(int(rng.integers(1, 50)), int(rng.integers(1, 50)))
        eps = Fraction(int(rng.integers(1, 50)), int(rng.integers(1, 50)))
        beta_f = Fraction(7 * T, 3) / (Fraction(n * n) * eps)
        lead = Fraction(14) * G * G * T / (beta_f * n * n * eps)
        if lead != 6 * G * G:
            lead_exact = False

    ok1, _ = dp_privacy_precheck(1000, 10_000, 1.0, 1e-3)
    ok2, _ = dp_privacy_precheck(100, 1000, 1.0, 1e-5)
    ok3, _ = dp_privacy_precheck(100, 100, 0.004, 0.5)
    prechecks = ok1 and not ok2 and not ok3

    rows = [
        _row("dp_sigma2_rel_error", rel, 1e-9),
        _row("dp_lead_factor_exact", 1.0 if lead_exact else 0.0, 1.0),
        _row("dp_precheck_cases", 1.0 if prechecks else 0.0, 1.0),
    ]
    return rows, rel <= 1e-9 and lead_exact and prechecks


_CRITERION_FUNCS = (
    c01_prox_closed_forms,
    c02_envelope_gradient_fd,
    c03_enumeration_oracle,
    c04_inclusion_probability,
    c05_bit_exact_coupling,
    c06_stability_bound_compliance,
    c07_moreau_gap_compliance,
    c08_weakly_convex_rate,
    c09_convex_rate,
    c10_optimization_error_trend,
    c11_dp_arithmetic,
)


def run_suite(master_seed: int = DEFAULT_SEED, threads: int = 1) -> Report:
    """Criteria 1-11; determinism (12) is checked by `verify` across two runs."""
    with ThreadPoolExecutor(max_workers=max(threads, 1)) as ex:
        futures = [ex.submit(fn, master_seed) for fn in _CRITERION_FUNCS]
        results = [f.result() for f in futures]
    rows = []
    for number, (name, (detail, passed)) in enumerate(zip(CRITERIA, results), start=1):
        rows.extend(detail)
        rows.append(_summary(number, name, passed))
    return Report(SCHEMA, {"command": "verify", "master_seed": int(master_seed)}, rows)


def verify(master_seed: int = DEFAULT_SEED, threads: int = 1):
    """Run the suite twice under different thread budgets and byte-compare.

    Returns (report, ok) where the report carries the determinism row and ok
    is the conjunction of all twelve criteria.
    """
    first = run_suite(master_seed, threads)
    second = run_suite(master_seed, threads + 1 if threads == 1 else 1)
    identical = emit_report(first) == emit_report(second)

    rows = list(first.rows)
    rows.append(_row("determinism_reports_identical", 1.0 if identical else 0.0, 1.0))
    rows.append(_summary(12, CRITERIA[11], identical))
    report = Report(SCHEMA, first.config, rows)
    ok = identical and all(
        r.estimate == 1.0 for r in rows if r.kind == "acceptance"
    )
    return report, ok
