"""Loss problems over finite data pools.

A problem couples a per-example loss f(w; z) with a finite population pool of
examples z = (features, target).  Keeping the population finite makes the
population risk F(w) exactly computable, so generalization gaps can be
measured instead of estimated.

Built-in losses (features a, target b):

    phase_retrieval       f(w; z) = |<a, w>^2 - b|          nonsmooth, weakly convex
    absolute_regression   f(w; z) = |<a, w> - b|            nonsmooth, convex
    smoothed_regression   f(w; z) = log(1 + (<a, w> - b)^2) smooth, weakly convex
    quadratic             f(w; z) = 0.5 ||w - a||^2         smooth, convex

Subgradients use the sign(0) = 0 selection at kinks, so the reported
subgradient is always a minimal-information member of the subdifferential and
two coupled runs make identical choices.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from ._seeding import substream

Array = np.ndarray

PROBLEM_KINDS = ("phase_retrieval", "absolute_regression", "smoothed_regression", "quadratic")


@dataclass(frozen=True, eq=False)
class Example:
    """One data point: a feature vector and a scalar target."""

    features: Array
    target: float


def _as_matrix(features) -> Array:
    X = np.ascontiguousarray(np.asarray(features, dtype=np.float64))
    if X.ndim != 2:
        raise ConfigError(f"features must be 2-D (n, d), got shape {X.shape}")
    return X


class Dataset:
    """An ordered sample of examples, stored as stacked arrays.

    Arrays are marked read-only after construction; a dataset never mutates.
    """

    def __init__(self, features, targets):
        X = _as_matrix(features)
        y = np.ascontiguousarray(np.asarray(targets, dtype=np.float64))
        if y.ndim != 1 or y.shape[0] != X.shape[0]:
            raise ConfigError(f"targets shape {y.shape} does not match features shape {X.shape}")
        if X.shape[0] < 1:
            raise ConfigError("dataset must contain at least one example")
        if not (np.all(np.isfinite(X)) and np.all(np.isfinite(y))):
            raise ConfigError("dataset contains non-finite entries")
        X.setflags(write=False)
        y.setflags(write=False)
        self.features = X
        self.targets = y

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.n

    def example(self, i: int) -> Example:
        """Return the i-th example, 0-based."""
        return Example(self.features[i], float(self.targets[i]))

    @classmethod
    def from_examples(cls, examples) -> "Dataset":
        feats = [np.asarray(e.features, dtype=np.float64) for e in examples]
        targs = [float(e.target) for e in examples]
        return cls(np.stack(feats), np.asarray(targs))

    def replaced(self, i: int, example: Example) -> "Dataset":
        """Copy with the 0-based position i replaced by ``example``."""
        if not 0 <= i < self.n:
            raise ConfigError(f"replace position {i} out of range for n={self.n}")
        X = self.features.copy()
        y = self.targets.copy()
        X[i] = np.asarray(example.features, dtype=np.float64)
        y[i] = float(example.target)
        return Dataset(X, y)


class PopulationPool(Dataset):
    """A finite population; datasets are drawn from it uniformly with replacement."""

    def draw(self, n: int, rng: np.random.Generator) -> Dataset:
        if n < 1:
            raise ConfigError("dataset size must be >= 1")
        idx = rng.integers(0, self.n, size=n)
        return Dataset(self.features[idx], self.targets[idx])


@dataclass(frozen=True)
class ProblemConstants:
    """Certified constants on the ball of the given radius.

    All bounds are conservative sups over the pool: ``lipschitz`` bounds every
    subgradient norm, ``weak_convexity`` is the smallest rho making
    f + (rho/2)||.||^2 convex for every pool example, ``smoothness`` is a
    gradient Lipschitz constant (None for nonsmooth losses), ``value_bound``
    bounds the loss value.
    """

    lipschitz: float
    weak_convexity: float
    smoothness: float | None
    value_bound: float
    radius: float

    def to_json_dict(self) -> dict:
        return {
            "lipschitz": self.lipschitz,
            "weak_convexity": self.weak_convexity,
            "smoothness": self.smoothness,
            "value_bound": self.value_bound,
            "radius": self.radius,
        }


@dataclass(frozen=True)
class GrowthCondition:
    """Relaxed growth condition  E||grad f||^2 <= b1 * E f + b2."""

    b1: float
    b2: float

    def __post_init__(self):
        if self.b1 < 0 or self.b2 < 0:
            raise ConfigError("growth condition constants must be nonnegative")


class LossProblem:
    """Base class: a per-example loss over a fixed population pool."""

    kind: str = ""
    smooth: bool = False

    def __init__(self, pool: PopulationPool, planted: Array | None = None):
        self.pool = pool
        self.planted = None if planted is None else np.asarray(planted, dtype=np.float64)

    @property
    def d(self) -> int:
        return self.pool.d

    def _check_w(self, w) -> Array:
        w = np.asarray(w, dtype=np.float64)
        if w.shape != (self.d,):
            raise ConfigError(f"parameter shape {w.shape} does not match d={self.d}")
        return w

    # Per-example oracle.  Scalar path used inside optimizer loops; batch path
    # evaluates one w against many examples at once.
    def loss(self, w: Array, features: Array, target: float) -> float:
        raise NotImplementedError

    def subgrad(self, w: Array, features: Array, target: float) -> Array:
        raise NotImplementedError

    def batch_loss(self, w: Array, features: Array, targets: Array) -> Array:
        raise NotImplementedError

    def batch_subgrad(self, w: Array, features: Array, targets: Array) -> Array:
        raise NotImplementedError

    def weak_convexity(self) -> float:
        """Certified weak-convexity parameter over the pool (radius-free)."""
        raise NotImplementedError

    def constants(self, radius: float) -> ProblemConstants:
        raise NotImplementedError

    def _feature_norms(self) -> Array:
        return np.linalg.norm(self.pool.features, axis=1)

    def to_json(self) -> str:
        entries = [[list(map(float, f)), float(t)] for f, t in zip(self.pool.features, self.pool.targets)]
        doc = {
            "kind": self.kind,
            "d": self.d,
            "planted": None if self.planted is None else [float(v) for v in self.planted],
            "pool": entries,
        }
        return json.dumps(doc)

    @staticmethod
    def from_json(text: str) -> "LossProblem":
        doc = json.loads(text)
        kind = doc["kind"]
        if kind not in PROBLEM_KINDS:
            raise ConfigError(f"unknown problem kind {kind!r}")
        feats = np.asarray([e[0] for e in doc["pool"]], dtype=np.float64)
        targs = np.asarray([e[1] for e in doc["pool"]], dtype=np.float64)
        if feats.shape[1] != doc["d"]:
            raise ConfigError("pool dimension does not match d")
        pool = PopulationPool(feats, targs)
        planted = doc.get("planted")
        return _PROBLEM_CLASSES[kind](pool, None if planted is None else np.asarray(planted))


class PhaseRetrieval(LossProblem):
    """f(w; (a, b)) = |<a, w>^2 - b|.  Weakly convex with rho = 2 max ||a||^2."""

    kind = "phase_retrieval"
    smooth = False

    def loss(self, w, features, target):
        u = float(features @ w)
        return abs(u * u - target)

    def subgrad(self, w, features, target):
        u = float(features @ w)
        s = np.sign(u * u - target)
        return (2.0 * s * u) * features

    def batch_loss(self, w, features, targets):
        u = features @ w
        return np.abs(u * u - targets)

    def batch_subgrad(self, w, features, targets):
        u = features @ w
        s = np.sign(u * u - targets)
        return (2.0 * s * u)[:, None] * features

    def weak_convexity(self):
        return float(2.0 * np.max(self._feature_norms() ** 2))

    def constants(self, radius):
        radius = _check_radius(radius)
        sq = self._feature_norms() ** 2
        lip = float(2.0 * radius * np.max(sq))
        value = float(np.max(sq * radius**2 + np.maximum(self.pool.targets, 0.0)))
        return ProblemConstants(lip, self.weak_convexity(), None, value, radius)


class AbsoluteRegression(LossProblem):
    """f(w; (a, b)) = |<a, w> - b|.  Convex, nonsmooth."""

    kind = "absolute_regression"
    smooth = False

    def loss(self, w, features, target):
        return abs(float(features @ w) - target)

    def subgrad(self, w, features, target):
        s = np.sign(float(features @ w) - target)
        return s * features

    def batch_loss(self, w, features, targets):
        return np.abs(features @ w - targets)

    def batch_subgrad(self, w, features, targets):
        s = np.sign(features @ w - targets)
        return s[:, None] * features

    def weak_convexity(self):
        return 0.0

    def constants(self, radius):
        radius = _check_radius(radius)
        norms = self._feature_norms()
        lip = float(np.max(norms))
        value = float(np.max(norms * radius + np.abs(self.pool.targets)))
        return ProblemConstants(lip, 0.0, None, value, radius)


class SmoothedRegression(LossProblem):
    """f(w; (a, b)) = log(1 + (<a, w> - b)^2).  Smooth, weakly convex.

    The scalar curve g(u) = log(1 + u^2) has |g'| <= 1, |g''| <= 2 and
    g'' >= -1/4, which certifies the constants below.
    """

    kind = "smoothed_regression"
    smooth = True

    def loss(self, w, features, target):
        u = float(features @ w) - target
        return math.log1p(u * u)

    def subgrad(self, w, features, target):
        u = float(features @ w) - target
        return (2.0 * u / (1.0 + u * u)) * features

    def batch_loss(self, w, features, targets):
        u = features @ w - targets
        return np.log1p(u * u)

    def batch_subgrad(self, w, features, targets):
        u = features @ w - targets
        return (2.0 * u / (1.0 + u * u))[:, None] * features

    def weak_convexity(self):
        return float(np.max(self._feature_norms() ** 2) / 4.0)

    def constants(self, radius):
        radius = _check_radius(radius)
        norms = self._feature_norms()
        lip = float(np.max(norms))
        smoothness = float(2.0 * np.max(norms**2))
        value = float(np.max(np.log1p((norms * radius + np.abs(self.pool.targets)) ** 2)))
        return ProblemConstants(lip, self.weak_convexity(), smoothness, value, radius)


class QuadraticLoss(LossProblem):
    """f(w; (a, b)) = 0.5 ||w - a||^2 with the target unused.  Smooth, convex."""

    kind = "quadratic"
    smooth = True

    def loss(self, w, features, target):
        diff = w - features
        return 0.5 * float(diff @ diff)

    def subgrad(self, w, features, target):
        return w - features

    def batch_loss(self, w, features, targets):
        diff = w[None, :] - features
        return 0.5 * np.sum(diff * diff, axis=1)

    def batch_subgrad(self, w, features, targets):
        return w[None, :] - features

    def weak_convexity(self):
        return 0.0

    def constants(self, radius):
        radius = _check_radius(radius)
        zmax = float(np.max(self._feature_norms()))
        return ProblemConstants(radius + zmax, 0.0, 1.0, 0.5 * (radius + zmax) ** 2, radius)


_PROBLEM_CLASSES = {
    "phase_retrieval": PhaseRetrieval,
    "absolute_regression": AbsoluteRegression,
    "smoothed_regression": SmoothedRegression,
    "quadratic": QuadraticLoss,
}


def _check_radius(radius) -> float:
    radius = float(radius)
    if not (radius > 0 and math.isfinite(radius)):
        raise ConfigError("domain radius must be positive and finite")
    return radius


def make_problem(
    kind: str,
    d: int,
    pool_size: int,
    seed: int,
    noise: float = 0.0,
    planted_norm: float = 1.0,
) -> LossProblem:
    """Generate a problem with a planted parameter vector.

    Features are uniform on the unit sphere (so per-example constants are
    exactly 1); for the quadratic loss the features are the anchor points
    themselves, centered on the planted vector.  Targets follow the planted
    model plus optional Gaussian noise.  ``noise=0`` makes the instance
    realizable: the population risk is minimized at the planted vector.
    """
    if kind not in PROBLEM_KINDS:
        raise ConfigError(f"unknown problem kind {kind!r}; expected one of {PROBLEM_KINDS}")
    if d < 1 or pool_size < 1:
        raise ConfigError("d and pool_size must be >= 1")
    if noise < 0:
        raise ConfigError("noise must be nonnegative")
    rng = substream(seed, "pool", 0)
    direction = rng.standard_normal(d)
    planted = planted_norm * direction / np.linalg.norm(direction)

    if kind == "quadratic":
        anchors = planted[None, :] + rng.standard_normal((pool_size, d)) / math.sqrt(d)
        pool = PopulationPool(anchors, np.zeros(pool_size))
        return QuadraticLoss(pool, planted)

    raw = rng.standard_normal((pool_size, d))
    feats = raw / np.linalg.norm(raw, axis=1, keepdims=True)
    clean = feats @ planted
    if kind == "phase_retrieval":
        # Noise enters before squaring so targets stay nonnegative.
        targets = (clean + noise * rng.standard_normal(pool_size)) ** 2
    else:
        targets = clean + noise * rng.standard_normal(pool_size)
    pool = PopulationPool(feats, targets)
    return _PROBLEM_CLASSES[kind](pool, planted)


def loss_eval(problem: LossProblem, w: Array, example: Example) -> tuple[float, Array]:
    """Evaluate one example: (f(w; z), subgradient)."""
    w = problem._check_w(w)
    feats = np.asarray(example.features, dtype=np.float64)
    if feats.shape != (problem.d,):
        raise ConfigError(f"example dimension {feats.shape} does not match d={problem.d}")
    return problem.loss(w, feats, example.target), problem.subgrad(w, feats, example.target)


def risk_eval(problem: LossProblem, w: Array, sample: Dataset) -> tuple[float, Array]:
    """Exact empirical (or population) risk and mean subgradient.

    Component sums use compensated exact summation, so the result is
    bit-identical under any permutation of the sample and across reruns.
    """
    w = problem._check_w(w)
    if sample.d != problem.d:
        raise ConfigError(f"sample dimension {sample.d} does not match d={problem.d}")
    values = problem.batch_loss(w, sample.features, sample.targets)
    grads = problem.batch_subgrad(w, sample.features, sample.targets)
    n = sample.n
    value = math.fsum(values) / n
    mean_grad = np.array([math.fsum(grads[:, j]) / n for j in range(problem.d)])
    return value, mean_grad


def problem_constants(problem: LossProblem, domain_radius: float) -> ProblemConstants:
    """Certified constants for the problem on the ball of the given radius."""
    return problem.constants(domain_radius)


def sgc_ratio(problem: LossProblem, sample: Dataset, w: Array) -> float:
    """Strong-growth ratio  mean_i ||grad f_i||^2  /  ||grad F_S||^2.

    Returns 1.0 when both sides vanish and inf when only the denominator does.
    """
    w = problem._check_w(w)
    grads = problem.batch_subgrad(w, sample.features, sample.targets)
    num = float(np.mean(np.sum(grads * grads, axis=1)))
    mean_grad = np.mean(grads, axis=0)
    den = float(mean_grad @ mean_grad)
    if den == 0.0:
        return 1.0 if num == 0.0 else math.inf
    return num / den


def relaxed_growth_check(
    problem: LossProblem,
    sample: Dataset,
    probes: Array,
    condition: GrowthCondition,
) -> tuple[bool, float]:
    """Check  mean_i ||grad f_i(w)||^2 <= b1 * mean_i f_i(w) + b2  at each probe.

    Returns (holds everywhere, max violation); the violation is the signed
    left-minus-right slack, so a negative maximum means the condition holds
    with room.
    """
    probes = np.atleast_2d(np.asarray(probes, dtype=np.float64))
    if probes.shape[1] != problem.d:
        raise ConfigError(f"probe dimension {probes.shape[1]} does not match d={problem.d}")
    if probes.shape[0] < 1:
        raise ConfigError("at least one probe point is required")
    worst = -math.inf
    for w in probes:
        grads = problem.batch_subgrad(w, sample.features, sample.targets)
        mean_sq = float(np.mean(np.sum(grads * grads, axis=1)))
        mean_val = float(np.mean(problem.batch_loss(w, sample.features, sample.targets)))
        worst = max(worst, mean_sq - (condition.b1 * mean_val + condition.b2))
    return worst <= 0.0, worst
