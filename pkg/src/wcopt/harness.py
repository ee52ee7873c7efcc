"""Experiment harness: config files, grid execution, report emission.

One TOML file describes one experiment: a problem/pool, an optimizer (either
an explicit (T, eta) or a named regime whose tuned schedule is recomputed at
every grid point), a grid of n values with optional T/eta sweep axes, and the
quantities to estimate at each point (stability measures, generalization
gaps, scalar metrics, rate fits).

Reports are deterministic functions of (config, master seed): every random
object is drawn from a seed tree keyed by purpose tag and logical indices,
grid points are merged in index order, and floats serialize via their
shortest round-trip representation.  The thread budget changes wall time
only, never content.

Rows are flat and share one fixed CSV header; quantities beyond a row's
estimate (gap variance terms, prox residuals) become extra rows rather than
extra columns, so the JSON and CSV emissions carry identical numeric content.
"""

from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from ._seeding import derive_seed, substream
from .errors import ConfigError, ValidationError
from .generalization import fit_rate, generalization_gap
from .moreau import MoreauConfig, RiskObjective, prox
from .optimizers import (
    ALGORITHMS,
    OUTPUT_SELECTORS,
    REGIMES,
    OptimizerConfig,
    StepSchedule,
    make_privacy_budget,
    run_optimizer,
    tuned_schedule,
)
from .problems import (
    PROBLEM_KINDS,
    Example,
    LossProblem,
    PopulationPool,
    make_problem,
    problem_constants,
    risk_eval,
)
from .stability import (
    MEASURES,
    coupled_stability_estimate,
    exact_expectation_enumerate,
    neighbor_dataset,
    stability_bound,
)

Array = np.ndarray

SCHEMA = "wcopt-report-1"
CSV_HEADER = "kind,n,T,eta,measure,estimate,std_error,bound,slope,r2"

METRIC_NAMES = (
    "excess_risk",
    "opt_error",
    "emp_grad_norm",
    "emp_env_grad_norm",
    "pop_env_grad_norm",
)
SMOOTH_KINDS = ("smoothed_regression", "quadratic")
GAP_KINDS = ("function_values", "gradients", "moreau_gradients")
# A gap's theorem bound consumes the stability measure on its left-hand side.
GAP_TO_STABILITY = {
    "function_values": "function_values",
    "gradients": "gradients",
    "moreau_gradients": "arguments",
}
AXES = ("n", "T", "eta")


@dataclass(frozen=True)
class Row:
    """One report line; exactly the fixed CSV columns."""

    kind: str
    n: int
    T: int
    eta: float
    measure: str
    estimate: float
    std_error: float
    bound: float | None
    slope: float | None
    r2: float | None

    def to_json_dict(self) -> dict:
        return {
            "kind": self.kind,
            "n": self.n,
            "T": self.T,
            "eta": self.eta,
            "measure": self.measure,
            "estimate": self.estimate,
            "std_error": self.std_error,
            "bound": self.bound,
            "slope": self.slope,
            "r2": self.r2,
        }

    def to_csv_line(self) -> str:
        def f(x):
            return "" if x is None else repr(float(x))

        return ",".join(
            [
                self.kind,
                str(self.n),
                str(self.T),
                repr(float(self.eta)),
                self.measure,
                repr(float(self.estimate)),
                repr(float(self.std_error)),
                f(self.bound),
                f(self.slope),
                f(self.r2),
            ]
        )


@dataclass
class Report:
    schema: str
    config: dict
    rows: list

    def to_json_dict(self) -> dict:
        return {
            "schema": self.schema,
            "config": self.config,
            "rows": [r.to_json_dict() for r in self.rows],
        }


def emit_report(report: Report, format: str = "json") -> bytes:
    if format == "json":
        return (json.dumps(report.to_json_dict(), indent=2) + "\n").encode("utf-8")
    if format == "csv":
        lines = [CSV_HEADER] + [r.to_csv_line() for r in report.rows]
        return ("\n".join(lines) + "\n").encode("utf-8")
    raise ConfigError(f"unknown report format {format!r}; expected 'json' or 'csv'")


def rows_from_csv(data: bytes) -> list:
    """Parse emit_report CSV bytes back into Row values."""
    lines = data.decode("utf-8").strip().split("\n")
    if lines[0] != CSV_HEADER:
        raise ConfigError("unexpected CSV header")
    rows = []
    for line in lines[1:]:
        parts = line.split(",")
        if len(parts) != 10:
            raise ConfigError(f"malformed CSV row: {line!r}")

        def opt(s):
            return None if s == "" else float(s)

        rows.append(
            Row(
                kind=parts[0],
                n=int(parts[1]),
                T=int(parts[2]),
                eta=float(parts[3]),
                measure=parts[4],
                estimate=float(parts[5]),
                std_error=float(parts[6]),
                bound=opt(parts[7]),
                slope=opt(parts[8]),
                r2=opt(parts[9]),
            )
        )
    return rows


def report_from_json(data: bytes) -> Report:
    doc = json.loads(data.decode("utf-8"))
    rows = [Row(**r) for r in doc["rows"]]
    return Report(doc["schema"], doc["config"], rows)


@dataclass
class ExperimentConfig:
    """Validated experiment description plus the raw document for echoing."""

    raw: dict
    master_seed: int
    threads: int | None
    output_path: str | None
    problem_kind: str
    d: int
    pool_size: int
    pool_seed: int
    noise: float
    planted_norm: float
    algorithm: str
    regime: str | None
    T: int | None
    eta: float | None
    schedule_kind: str
    c: float | None
    b0: float | None
    projection_radius: float | None
    output: str
    initial_scale: float
    sgc_rho: float | None
    epsilon: float | None
    delta: float | None
    grid_n: tuple
    grid_T: tuple | None
    grid_eta: tuple | None
    stability_measures: tuple | None
    stability_trials: int
    gap_kinds: tuple | None
    gap_draws: int
    moreau_lambda: float | None
    inner_tolerance: float
    inner_max_iters: int
    metric_measures: tuple | None
    metric_draws: int
    rate_fit: tuple

    def with_seed(self, seed: int) -> "ExperimentConfig":
        cfg = ExperimentConfig(**{**self.__dict__, "master_seed": int(seed)})
        cfg.raw = dict(self.raw)
        cfg.raw["master_seed"] = int(seed)
        return cfg


def load_config(path: str) -> ExperimentConfig:
    with open(path, "rb") as fh:
        try:
            doc = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ValidationError([f"TOML parse error: {exc}"]) from exc
    return config_from_dict(doc)


def config_from_dict(doc: dict) -> ExperimentConfig:
    """Build a validated config, collecting every violation before failing."""
    v: list[str] = []

    def table(name):
        t = doc.get(name)
        if t is None:
            return {}
        if not isinstance(t, dict):
            v.append(f"{name}: must be a table")
            return {}
        return t

    def need(t, tname, key, typ, pred=None, msg=""):
        if key not in t:
            v.append(f"{tname}.{key}: required")
            return None
        return opt(t, tname, key, typ, None, pred, msg)

    def opt(t, tname, key, typ, default, pred=None, msg=""):
        if key not in t:
            return default
        val = t[key]
        if typ is float and isinstance(val, int) and not isinstance(val, bool):
            val = float(val)
        if typ is int and (isinstance(val, bool) or not isinstance(val, int)):
            v.append(f"{tname}.{key}: must be an integer")
            return default
        if typ is float and not isinstance(val, float):
            v.append(f"{tname}.{key}: must be a number")
            return default
        if typ is str and not isinstance(val, str):
            v.append(f"{tname}.{key}: must be a string")
            return default
        if pred is not None and not pred(val):
            v.append(f"{tname}.{key}: {msg}")
            return default
        return val

    prob = table("problem")
    kind = need(prob, "problem", "kind", str, lambda s: s in PROBLEM_KINDS,
                f"must be one of {PROBLEM_KINDS}")
    d = need(prob, "problem", "d", int, lambda x: x >= 1, "must be >= 1")
    M = need(prob, "problem", "pool_size", int, lambda x: x >= 1, "must be >= 1")
    pool_seed = opt(prob, "problem", "pool_seed", int, 0)
    noise = opt(prob, "problem", "noise", float, 0.0, lambda x: x >= 0, "must be >= 0")
    planted_norm = opt(prob, "problem", "planted_norm", float, 1.0,
                       lambda x: x > 0, "must be > 0")

    opt_t = table("optimizer")
    algorithm = opt(opt_t, "optimizer", "algorithm", str, "sgd",
                    lambda s: s in ALGORITHMS, f"must be one of {ALGORITHMS}")
    regime = opt(opt_t, "optimizer", "regime", str, None,
                 lambda s: s in REGIMES, f"must be one of {REGIMES}")
    T = opt(opt_t, "optimizer", "T", int, None, lambda x: x >= 0, "must be >= 0")
    eta = opt(opt_t, "optimizer", "eta", float, None, lambda x: x > 0, "must be > 0")
    schedule_kind = opt(opt_t, "optimizer", "schedule", str, "constant",
                        lambda s: s in ("constant", "inverse_t", "adagrad"),
                        "must be constant, inverse_t, or adagrad")
    c = opt(opt_t, "optimizer", "c", float, None, lambda x: x > 0, "must be > 0")
    b0 = opt(opt_t, "optimizer", "b0", float, None, lambda x: x > 0, "must be > 0")
    radius = opt(opt_t, "optimizer", "projection_radius", float, None,
                 lambda x: x > 0, "must be > 0")
    output = opt(opt_t, "optimizer", "output", str, "last",
                 lambda s: s in OUTPUT_SELECTORS, f"must be one of {OUTPUT_SELECTORS}")
    initial_scale = opt(opt_t, "optimizer", "initial_scale", float, 0.0,
                        lambda x: x >= 0, "must be >= 0")
    sgc_rho = opt(opt_t, "optimizer", "sgc_rho", float, None,
                  lambda x: x > 0, "must be > 0")
    epsilon = opt(opt_t, "optimizer", "epsilon", float, None,
                  lambda x: x > 0, "must be > 0")
    delta = opt(opt_t, "optimizer", "delta", float, None,
                lambda x: 0 < x < 1, "must lie in (0, 1)")

    if regime is None:
        if T is None:
            v.append("optimizer.T: required when no regime is set")
        if eta is None:
            v.append("optimizer.eta: required when no regime is set")
    else:
        if T is not None:
            v.append("optimizer.T: conflicts with the regime (the schedule derives T)")
        if eta is not None:
            v.append("optimizer.eta: conflicts with the regime (the schedule derives eta)")
        if radius is None:
            v.append("optimizer.projection_radius: required with a regime "
                     "(constants are certified on the ball)")
        if regime == "sgc" and sgc_rho is None:
            v.append("optimizer.sgc_rho: required for the sgc regime")
    if algorithm == "adagrad_norm" and regime is None and schedule_kind != "adagrad":
        v.append("optimizer.schedule: adagrad_norm requires the adagrad schedule")
    if algorithm != "adagrad_norm" and schedule_kind == "adagrad":
        v.append("optimizer.schedule: adagrad schedule is only valid for adagrad_norm")
    if algorithm == "adagrad_norm" and regime is not None and regime != "adagrad":
        v.append("optimizer.regime: adagrad_norm pairs with the adagrad regime")
    if algorithm != "adagrad_norm" and regime == "adagrad":
        v.append("optimizer.regime: the adagrad regime requires algorithm adagrad_norm")
    if schedule_kind == "inverse_t" and c is None:
        v.append("optimizer.c: required for the inverse_t schedule")
    if algorithm == "dp_sgd":
        if epsilon is None:
            v.append("optimizer.epsilon: required for dp_sgd")
        if delta is None:
            v.append("optimizer.delta: required for dp_sgd")
        if radius is None:
            v.append("optimizer.projection_radius: required for dp_sgd "
                     "(certifies the sensitivity constant)")

    grid = table("grid")
    grid_n_raw = grid.get("n")
    grid_n: tuple = ()
    if not isinstance(grid_n_raw, list) or not grid_n_raw:
        v.append("grid.n: required nonempty list of dataset sizes")
    else:
        bad = [x for x in grid_n_raw if isinstance(x, bool) or not isinstance(x, int) or x < 1]
        if bad:
            v.append("grid.n: entries must be integers >= 1")
        else:
            grid_n = tuple(grid_n_raw)
            if M is not None and any(x > M for x in grid_n):
                v.append(f"grid.n: every n must be <= pool_size ({M})")

    def axis_list(key, typ, pred, msg):
        raw = grid.get(key)
        if raw is None:
            return None
        if not isinstance(raw, list) or not raw:
            v.append(f"grid.{key}: must be a nonempty list")
            return None
        vals = []
        for x in raw:
            if typ is float and isinstance(x, int) and not isinstance(x, bool):
                x = float(x)
            if isinstance(x, bool) or not isinstance(x, typ) or not pred(x):
                v.append(f"grid.{key}: {msg}")
                return None
            vals.append(x)
        return tuple(vals)

    grid_T = axis_list("T", int, lambda x: x >= 0, "entries must be integers >= 0")
    grid_eta = axis_list("eta", float, lambda x: x > 0, "entries must be numbers > 0")

    stab = table("stability")
    stability_measures = None
    stability_trials = 1
    if stab:
        meas = stab.get("measures")
        if not isinstance(meas, list) or not meas:
            v.append("stability.measures: required nonempty list")
        elif any(m not in MEASURES for m in meas):
            v.append(f"stability.measures: entries must be among {MEASURES}")
        else:
            stability_measures = tuple(meas)
        stability_trials = opt(stab, "stability", "trials", int, 1,
                               lambda x: x >= 1, "must be >= 1")
        if M is not None and M < 2:
            v.append("problem.pool_size: must be >= 2 when stability is requested "
                     "(the replacement example must differ)")

    gap = table("gap")
    gap_kinds = None
    gap_draws = 1
    if gap:
        kinds = gap.get("kinds")
        if not isinstance(kinds, list) or not kinds:
            v.append("gap.kinds: required nonempty list")
        elif any(k not in GAP_KINDS for k in kinds):
            v.append(f"gap.kinds: entries must be among {GAP_KINDS}")
        else:
            gap_kinds = tuple(kinds)
            if "gradients" in gap_kinds and kind is not None and kind not in SMOOTH_KINDS:
                v.append("gap.kinds: the gradients gap needs a smooth loss "
                         f"({kind} is nonsmooth); use moreau_gradients")
        gap_draws = opt(gap, "gap", "dataset_draws", int, 1,
                        lambda x: x >= 1, "must be >= 1")

    mor = table("moreau")
    moreau_lambda = opt(mor, "moreau", "lambda", float, None,
                        lambda x: x > 0, "must be > 0")
    inner_tolerance = opt(mor, "moreau", "inner_tolerance", float, 1e-8,
                          lambda x: x > 0, "must be > 0")
    inner_max_iters = opt(mor, "moreau", "inner_max_iters", int, 100_000,
                          lambda x: x >= 1, "must be >= 1")

    met = table("metrics")
    metric_measures = None
    metric_draws = 1
    if met:
        meas = met.get("measures")
        if not isinstance(meas, list) or not meas:
            v.append("metrics.measures: required nonempty list")
        elif any(m not in METRIC_NAMES for m in meas):
            v.append(f"metrics.measures: entries must be among {METRIC_NAMES}")
        else:
            metric_measures = tuple(meas)
            if "emp_grad_norm" in metric_measures and kind is not None \
                    and kind not in SMOOTH_KINDS:
                v.append("metrics.measures: emp_grad_norm needs a smooth loss "
                         f"({kind} is nonsmooth); use emp_env_grad_norm")
        metric_draws = opt(met, "metrics", "draws", int, 1,
                           lambda x: x >= 1, "must be >= 1")

    rep = table("report")
    rate_fit_raw = rep.get("rate_fit")
    rate_fit: tuple = ()
    if rate_fit_raw is not None:
        if not isinstance(rate_fit_raw, list):
            v.append("report.rate_fit: must be a list of metric names")
        elif any(m not in METRIC_NAMES for m in rate_fit_raw):
            v.append(f"report.rate_fit: entries must be among {METRIC_NAMES}")
        elif metric_measures is None or any(m not in metric_measures for m in rate_fit_raw):
            v.append("report.rate_fit: every fitted measure must appear in metrics.measures")
        else:
            rate_fit = tuple(rate_fit_raw)

    master_seed = opt(doc, "", "master_seed", int, 0)
    threads = opt(doc, "", "threads", int, None, lambda x: x >= 1, "must be >= 1")
    output_path = opt(doc, "", "output_path", str, None)

    if v:
        raise ValidationError(v)
    return ExperimentConfig(
        raw=doc,
        master_seed=master_seed,
        threads=threads,
        output_path=output_path,
        problem_kind=kind,
        d=d,
        pool_size=M,
        pool_seed=pool_seed,
        noise=noise,
        planted_norm=planted_norm,
        algorithm=algorithm,
        regime=regime,
        T=T,
        eta=eta,
        schedule_kind=schedule_kind,
        c=c,
        b0=b0,
        projection_radius=radius,
        output=output,
        initial_scale=initial_scale,
        sgc_rho=sgc_rho,
        epsilon=epsilon,
        delta=delta,
        grid_n=grid_n,
        grid_T=grid_T,
        grid_eta=grid_eta,
        stability_measures=stability_measures,
        stability_trials=stability_trials,
        gap_kinds=gap_kinds,
        gap_draws=gap_draws,
        moreau_lambda=moreau_lambda,
        inner_tolerance=inner_tolerance,
        inner_max_iters=inner_max_iters,
        metric_measures=metric_measures,
        metric_draws=metric_draws,
        rate_fit=rate_fit,
    )


def resolve_threads(flag: int | None = None, config_threads: int | None = None) -> int:
    """Thread budget precedence: CLI flag, then WCOPT_THREADS, then config, then 1."""
    if flag is not None:
        value = flag
    else:
        env = os.environ.get("WCOPT_THREADS")
        if env is not None:
            try:
                value = int(env)
            except ValueError:
                raise ConfigError(f"WCOPT_THREADS={env!r} is not an integer") from None
        elif config_threads is not None:
            value = config_threads
        else:
            value = 1
    if value < 1:
        raise ConfigError("thread budget must be >= 1")
    return value


def _build_problem(config: ExperimentConfig) -> LossProblem:
    return make_problem(
        config.problem_kind,
        config.d,
        config.pool_size,
        config.pool_seed,
        noise=config.noise,
        planted_norm=config.planted_norm,
    )


def _initial_point(config: ExperimentConfig):
    if config.initial_scale == 0.0:
        return None
    pt = [0.0] * config.d
    pt[0] = config.initial_scale
    return tuple(pt)


def _moreau_config(config: ExperimentConfig, problem: LossProblem) -> MoreauConfig:
    lam = config.moreau_lambda
    if lam is None:
        rho = problem.weak_convexity()
        lam = 1.0 / (2.0 * rho) if rho > 0 else 1.0
    return MoreauConfig(lam, config.inner_tolerance, config.inner_max_iters)


def _regime_schedule_at(regime, constants, sgc_rho, n, T) -> StepSchedule:
    """The regime's step rule with the horizon forced to T (sweep over T)."""
    G = constants.lipschitz
    if regime == "convex":
        return StepSchedule("constant", n ** (-1.0 / 3.0) * constants.radius / G)
    if regime == "nonconvex_smooth":
        if T < 1:
            raise ConfigError("nonconvex_smooth step rule needs T >= 1")
        return StepSchedule("constant", 1.0 / (G * math.sqrt(T)))
    if regime == "sgc":
        return StepSchedule("constant", 1.0 / (sgc_rho * constants.smoothness))
    if regime == "weakly_convex":
        rho = constants.weak_convexity
        if not (rho > 0):
            raise ConfigError("weakly_convex regime needs rho > 0")
        if T < 1:
            raise ConfigError("weakly_convex step rule needs T >= 1")
        return StepSchedule("constant", 1.0 / (G * math.sqrt(rho * T)))
    return StepSchedule("adagrad", 1.0, b0=1.0)


def _point_params(config, constants, sgc_rho, axis, value):
    n = value if axis == "n" else config.grid_n[0]
    if config.regime is not None:
        T_reg, schedule = tuned_schedule(config.regime, n, constants, sgc_rho=sgc_rho)
        if axis == "T":
            T = value
            schedule = _regime_schedule_at(config.regime, constants, sgc_rho, n, T)
        else:
            T = T_reg
    else:
        T = value if axis == "T" else config.T
        eta = value if axis == "eta" else config.eta
        schedule = StepSchedule(config.schedule_kind, eta, c=config.c, b0=config.b0)
    return n, T, schedule


def _optimizer_config(config, problem, constants, n, T, schedule, seed) -> OptimizerConfig:
    privacy = None
    if config.algorithm == "dp_sgd":
        G = constants.lipschitz if constants is not None else problem_constants(
            problem, config.projection_radius).lipschitz
        privacy = make_privacy_budget(G, T, n, config.epsilon, config.delta)
    return OptimizerConfig(
        algorithm=config.algorithm,
        schedule=schedule,
        T=T,
        projection_radius=config.projection_radius,
        output=config.output,
        seed=seed,
        privacy=privacy,
        initial_point=_initial_point(config),
    )


def _draw_replacement(pool: PopulationPool, S, i0: int, rng) -> Example:
    # Uniform over pool entries that differ from the replaced one; a neighbor
    # equal to its base would make every measure trivially zero.
    old_f, old_t = S.features[i0], S.targets[i0]
    while True:
        j = int(rng.integers(0, pool.n))
        if pool.targets[j] != old_t or not np.array_equal(pool.features[j], old_f):
            return pool.example(j)


def _mean_se(values) -> tuple[float, float]:
    arr = np.asarray(values, dtype=np.float64)
    mean = float(np.mean(arr))
    if arr.shape[0] < 2:
        return mean, 0.0
    return mean, float(np.std(arr, ddof=1) / math.sqrt(arr.shape[0]))


def _run_point(problem, pool_objective, config, constants, moreau_cfg, axis, value, p):
    """All rows for one grid point.  Pure function of its arguments plus the
    seed tree, so points can run on any thread."""
    seed = config.master_seed
    n, T, schedule = _point_params(config, constants, config.sgc_rho, axis, value)
    eta = schedule.eta
    rows = []

    stability_eps = {}
    if config.stability_measures is not None:
        S = problem.pool.draw(n, substream(seed, "stability_data", p))
        rng_rep = substream(seed, "stability_replacement", p)
        pair = neighbor_dataset(S, n, _draw_replacement(problem.pool, S, n - 1, rng_rep))
        run_cfg = _optimizer_config(
            config, problem, constants, n, T, schedule, derive_seed(seed, "stability", p)
        )
        for m in config.stability_measures:
            rep = coupled_stability_estimate(
                problem, pair, run_cfg, m, config.stability_trials, constants=constants
            )
            stability_eps[m] = rep
            rows.append(Row("stability", n, T, eta, m, rep.epsilon_hat,
                            rep.std_error, rep.theoretical_bound, None, None))

    if config.gap_kinds is not None:
        gap_cfg = _optimizer_config(
            config, problem, constants, n, T, schedule, derive_seed(seed, "gap", p)
        )
        for kindname in config.gap_kinds:
            match = GAP_TO_STABILITY[kindname]
            eps = stability_eps[match].epsilon_hat if match in stability_eps else None
            rep = generalization_gap(
                problem,
                problem.pool,
                gap_cfg,
                kindname,
                n,
                config.gap_draws,
                moreau=moreau_cfg if kindname == "moreau_gradients" else None,
                stability_epsilon=eps,
                constants=constants,
            )
            rows.append(Row("gap", n, T, eta, kindname, rep.gap_estimate,
                            rep.std_error, rep.rhs_bound, None, None))
            if rep.variance_term is not None:
                rows.append(Row("gap", n, T, eta, kindname + "_variance",
                                rep.variance_term, 0.0, None, None, None))
            if rep.max_inner_residual is not None:
                rows.append(Row("gap", n, T, eta, kindname + "_inner_residual",
                                rep.max_inner_residual, 0.0, None, None, None))

    if config.metric_measures is not None:
        values = {m: [] for m in config.metric_measures}
        env_residual = 0.0
        planted = problem.planted
        F_ref = None
        if "excess_risk" in values:
            F_ref = risk_eval(problem, planted, problem.pool)[0]
        for k in range(config.metric_draws):
            S = problem.pool.draw(n, substream(seed, "metric_data", p, k))
            run_cfg = _optimizer_config(
                config, problem, constants, n, T, schedule,
                derive_seed(seed, "metric_run", p, k),
            )
            w = run_optimizer(problem, S, run_cfg).output
            for m in config.metric_measures:
                if m == "excess_risk":
                    values[m].append(risk_eval(problem, w, problem.pool)[0] - F_ref)
                elif m == "opt_error":
                    FS_w = risk_eval(problem, w, S)[0]
                    FS_ref = risk_eval(problem, planted, S)[0]
                    values[m].append(FS_w - FS_ref)
                elif m == "emp_grad_norm":
                    values[m].append(float(np.linalg.norm(risk_eval(problem, w, S)[1])))
                elif m == "emp_env_grad_norm":
                    res = prox(RiskObjective(problem, S), w, moreau_cfg)
                    env_residual = max(env_residual, res.inner_residual)
                    values[m].append(float(np.linalg.norm(res.envelope_gradient)))
                else:
                    res = prox(pool_objective, w, moreau_cfg)
                    env_residual = max(env_residual, res.inner_residual)
                    values[m].append(float(np.linalg.norm(res.envelope_gradient)))
        for m in config.metric_measures:
            mean, se = _mean_se(values[m])
            rows.append(Row("metric", n, T, eta, m, mean, se, None, None, None))
        if "emp_env_grad_norm" in values or "pop_env_grad_norm" in values:
            rows.append(Row("metric", n, T, eta, "env_inner_residual",
                            env_residual, 0.0, None, None, None))
    return rows


def _needs_envelopes(config: ExperimentConfig) -> bool:
    if config.gap_kinds is not None and "moreau_gradients" in config.gap_kinds:
        return True
    if config.metric_measures is not None and any(
        m in ("emp_env_grad_norm", "pop_env_grad_norm") for m in config.metric_measures
    ):
        return True
    return False


def _execute(config: ExperimentConfig, axis: str, values, threads: int | None) -> Report:
    problem = _build_problem(config)
    constants = None
    if config.projection_radius is not None:
        constants = problem_constants(problem, config.projection_radius)
    moreau_cfg = _moreau_config(config, problem) if _needs_envelopes(config) else None
    pool_objective = None
    if config.metric_measures is not None and "pop_env_grad_norm" in config.metric_measures:
        pool_objective = RiskObjective(problem, problem.pool)

    budget = resolve_threads(threads, config.threads)
    rows: list[Row] = []
    with ThreadPoolExecutor(max_workers=budget) as ex:
        futures = [
            ex.submit(_run_point, problem, pool_objective, config, constants,
                      moreau_cfg, axis, value, p)
            for p, value in enumerate(values)
        ]
        point_rows = [f.result() for f in futures]
    for pr in point_rows:
        rows.extend(pr)

    # Fit rows need at least two axis points; a single-point run simply has
    # nothing to fit and drops them, keeping run_config and a one-value sweep
    # interchangeable.
    if len(values) >= 2:
        for m in config.rate_fit:
            points = []
            for pr, value in zip(point_rows, values):
                est = next(r.estimate for r in pr if r.kind == "metric" and r.measure == m)
                points.append((float(value), est))
            fit = fit_rate(points)
            rows.append(Row("rate_fit", len(points), 0, 0.0, m, fit.intercept,
                            0.0, None, fit.slope, fit.r_squared))

    return Report(SCHEMA, dict(config.raw), rows)


def run_config(config: ExperimentConfig, threads: int | None = None) -> Report:
    """Execute every grid point (the n grid) and return the Report."""
    return _execute(config, "n", config.grid_n, threads)


def sweep(config: ExperimentConfig, axis: str, threads: int | None = None) -> Report:
    """Sweep one axis; for axis=n under a regime, (T, eta) are recomputed per
    point; for axis=T, the regime's step rule is re-evaluated at each forced T."""
    if axis not in AXES:
        raise ConfigError(f"unknown sweep axis {axis!r}; expected one of {AXES}")
    if axis == "n":
        values = config.grid_n
    elif axis == "T":
        if config.grid_T is None:
            raise ConfigError("sweep over T requires grid.T in the config")
        if len(config.grid_n) != 1:
            raise ConfigError("sweep over T requires a single n in grid.n")
        values = config.grid_T
    else:
        if config.grid_eta is None:
            raise ConfigError("sweep over eta requires grid.eta in the config")
        if len(config.grid_n) != 1:
            raise ConfigError("sweep over eta requires a single n in grid.n")
        if config.regime is not None:
            raise ConfigError("sweep over eta conflicts with a regime "
                              "(the regime pins eta); remove one")
        values = config.grid_eta
    if any(values[i] >= values[i + 1] for i in range(len(values) - 1)):
        raise ConfigError(f"sweep axis values must be strictly increasing, got {values}")
    return _execute(config, axis, values, threads)


def enumerate_config(config: ExperimentConfig, threads: int | None = None) -> Report:
    """Exhaustive small-case oracle: exact stability expectations on the same
    neighbor pairs and run configuration the Monte Carlo path would use."""
    if config.stability_measures is None:
        raise ConfigError("enumerate requires a [stability] section")
    problem = _build_problem(config)
    constants = None
    if config.projection_radius is not None:
        constants = problem_constants(problem, config.projection_radius)
    seed = config.master_seed
    rows = []
    for p, value in enumerate(config.grid_n):
        n, T, schedule = _point_params(config, constants, config.sgc_rho, "n", value)
        S = problem.pool.draw(n, substream(seed, "stability_data", p))
        rng_rep = substream(seed, "stability_replacement", p)
        pair = neighbor_dataset(S, n, _draw_replacement(problem.pool, S, n - 1, rng_rep))
        run_cfg = _optimizer_config(
            config, problem, constants, n, T, schedule, derive_seed(seed, "stability", p)
        )
        for m in config.stability_measures:
            exact = exact_expectation_enumerate(problem, pair, run_cfg, m)
            bound = None
            if constants is not None:
                bound = stability_bound(m, constants, T, n)
            rows.append(Row("stability_exact", n, T, schedule.eta, m, exact,
                            0.0, bound, None, None))
    return Report(SCHEMA, dict(config.raw), rows)
