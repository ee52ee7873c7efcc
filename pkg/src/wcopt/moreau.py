"""Moreau envelope and proximal operator for weakly convex risks.

For a rho-weakly convex risk psi and smoothing level lam < 1/rho, the
envelope and prox are

    env(w)  = min_v  psi(v) + ||w - v||^2 / (2 lam)
    prox(w) = argmin of the same subproblem,

and the envelope gradient is (w - prox(w)) / lam.  The subproblem is
(1/lam - rho)-strongly convex, so the prox is unique and a point v is the
prox iff some subgradient g of psi at v satisfies g + (v - w)/lam = 0.  Every
solve here terminates on that certificate: the returned ``inner_residual`` is
||g + (v - w)/lam|| recomputed at the returned point with a valid subgradient
assembled there, never a stale iterate quantity.

Solver strategy per loss:

* quadratic: closed form.
* smoothed_regression: damped Newton on the smooth strongly convex
  subproblem; residual is the exact gradient norm.
* absolute_regression / phase_retrieval: the subproblem is piecewise
  quadratic.  Subgradient descent with step 2/((1/lam - rho)(k + 2)) and
  best-iterate tracking localizes the solution, then an active-set polish
  solves the KKT system for candidate kink sets (multipliers theta in
  [-1, 1]).  Strong convexity makes the certificate self-validating, so a
  wrong active-set guess can only fail the residual check, never return a
  false prox.  Plain subgradient descent alone stalls at O(1/k) and cannot
  reach tight certificates when the prox sits exactly on a kink (soft
  thresholding being the canonical case), which is why the polish exists.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, ProxConvergenceError
from .problems import (
    AbsoluteRegression,
    Dataset,
    LossProblem,
    PhaseRetrieval,
    QuadraticLoss,
    SmoothedRegression,
)

Array = np.ndarray

# Polish attempt cadence and per-round candidate budget.
_POLISH_EVERY = 25
_EXTRA_ACTIVE = 3
_KINK_TOL = 1e-9
_THETA_SLACK = 1e-9
_REPAIR_ROUNDS = 60


@dataclass(frozen=True)
class MoreauConfig:
    """Smoothing level and inner-solver budget."""

    lam: float
    inner_tolerance: float = 1e-8
    inner_max_iters: int = 100_000

    def __post_init__(self):
        if not (self.lam > 0 and math.isfinite(self.lam)):
            raise ConfigError("smoothing level lam must be positive and finite")
        if not (self.inner_tolerance > 0):
            raise ConfigError("inner_tolerance must be positive")
        if self.inner_max_iters < 1:
            raise ConfigError("inner_max_iters must be >= 1")


@dataclass
class MoreauResult:
    """Certified prox solve: point, envelope value/gradient, certificate."""

    prox_point: Array
    envelope_value: float
    envelope_gradient: Array
    inner_residual: float
    inner_iterations: int


def default_smoothing(rho: float) -> float:
    """Canonical smoothing level 1/(2 rho) for a rho-weakly convex risk."""
    if not (rho > 0):
        raise ConfigError("default smoothing needs rho > 0; pick lam explicitly for convex risks")
    return 1.0 / (2.0 * rho)


class RiskObjective:
    """Empirical or population risk of a problem over a fixed sample."""

    def __init__(self, problem: LossProblem, sample: Dataset):
        if sample.d != problem.d:
            raise ConfigError(f"sample dimension {sample.d} does not match problem d={problem.d}")
        self.problem = problem
        self.sample = sample
        self.X = sample.features
        self.y = sample.targets
        self._quad_mean: Array | None = None
        self._quad_msq: float | None = None

    @property
    def d(self) -> int:
        return self.problem.d

    def weak_convexity(self) -> float:
        return self.problem.weak_convexity()

    def _quad_stats(self) -> tuple[Array, float]:
        if self._quad_mean is None:
            self._quad_mean = np.mean(self.X, axis=0)
            self._quad_msq = float(np.mean(np.sum(self.X * self.X, axis=1)))
        return self._quad_mean, self._quad_msq

    def value(self, v: Array) -> float:
        p = self.problem
        if isinstance(p, QuadraticLoss):
            zbar, msq = self._quad_stats()
            return 0.5 * (float(v @ v) - 2.0 * float(v @ zbar) + msq)
        if isinstance(p, AbsoluteRegression):
            return float(np.mean(np.abs(self.X @ v - self.y)))
        if isinstance(p, PhaseRetrieval):
            u = self.X @ v
            return float(np.mean(np.abs(u * u - self.y)))
        if isinstance(p, SmoothedRegression):
            u = self.X @ v - self.y
            return float(np.mean(np.log1p(u * u)))
        return float(np.mean(p.batch_loss(v, self.X, self.y)))

    def value_and_mean_subgrad(self, v: Array) -> tuple[float, Array]:
        p = self.problem
        m = self.X.shape[0]
        if isinstance(p, QuadraticLoss):
            zbar, msq = self._quad_stats()
            return 0.5 * (float(v @ v) - 2.0 * float(v @ zbar) + msq), v - zbar
        if isinstance(p, AbsoluteRegression):
            u = self.X @ v - self.y
            return float(np.mean(np.abs(u))), self.X.T @ np.sign(u) / m
        if isinstance(p, PhaseRetrieval):
            u = self.X @ v
            c = u * u - self.y
            return float(np.mean(np.abs(c))), self.X.T @ (2.0 * np.sign(c) * u) / m
        if isinstance(p, SmoothedRegression):
            u = self.X @ v - self.y
            return float(np.mean(np.log1p(u * u))), self.X.T @ (2.0 * u / (1.0 + u * u)) / m
        grads = p.batch_subgrad(v, self.X, self.y)
        return float(np.mean(p.batch_loss(v, self.X, self.y))), np.mean(grads, axis=0)

    def exact_value(self, v: Array) -> float:
        """Risk value by exact summation; used for reported envelope values."""
        return math.fsum(self.problem.batch_loss(v, self.X, self.y)) / self.X.shape[0]


def _validate(objective: RiskObjective, w, config: MoreauConfig) -> Array:
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (objective.d,):
        raise ConfigError(f"point shape {w.shape} does not match d={objective.d}")
    rho = objective.weak_convexity()
    if rho > 0 and config.lam >= 1.0 / rho:
        raise ConfigError(
            f"smoothing level lam={config.lam} must be < 1/rho = {1.0 / rho} for this risk"
        )
    return w


def _result(objective: RiskObjective, w: Array, v: Array, lam: float, residual: float, iters: int) -> MoreauResult:
    diff = w - v
    value = objective.exact_value(v) + float(diff @ diff) / (2.0 * lam)
    return MoreauResult(v, value, diff / lam, residual, iters)


def _prox_quadratic(objective: RiskObjective, w: Array, config: MoreauConfig) -> MoreauResult:
    zbar, _ = objective._quad_stats()
    lam = config.lam
    v = (w + lam * zbar) / (1.0 + lam)
    residual = float(np.linalg.norm((v - zbar) + (v - w) / lam))
    return _result(objective, w, v, lam, residual, 0)


def _prox_smooth_newton(objective: RiskObjective, w: Array, config: MoreauConfig) -> MoreauResult:
    X, y, lam = objective.X, objective.y, config.lam
    m, d = X.shape
    v = w.copy()

    def grad_and_hess(v):
        u = X @ v - y
        den = 1.0 + u * u
        g = X.T @ (2.0 * u / den) / m + (v - w) / lam
        curv = 2.0 * (1.0 - u * u) / (den * den)
        H = (X.T * curv) @ X / m + np.eye(d) / lam
        return g, H

    def phi(v):
        u = X @ v - y
        diff = v - w
        return float(np.mean(np.log1p(u * u))) + float(diff @ diff) / (2.0 * lam)

    val = phi(v)
    for it in range(1, 201):
        g, H = grad_and_hess(v)
        res = float(np.linalg.norm(g))
        if res <= config.inner_tolerance:
            return _result(objective, w, v, lam, res, it - 1)
        step = np.linalg.solve(H, g)
        alpha, decrement = 1.0, float(g @ step)
        for _ in range(40):
            cand = v - alpha * step
            cand_val = phi(cand)
            if cand_val <= val - 1e-4 * alpha * decrement:
                break
            alpha *= 0.5
        v, val = cand, cand_val
    g, _ = grad_and_hess(v)
    res = float(np.linalg.norm(g))
    if res <= config.inner_tolerance:
        return _result(objective, w, v, lam, res, 200)
    raise ProxConvergenceError(
        f"Newton prox solve stalled at residual {res:.3e} (tolerance {config.inner_tolerance:.1e})",
        result=_result(objective, w, v, lam, res, 200),
    )


class _PiecewiseRisk:
    """Piecewise-quadratic structure of |c_i(v)| risks for the polish step.

    For absolute regression c_i(v) = <x_i, v> - y_i; for phase retrieval
    c_i(v) = <x_i, v>^2 - y_i, whose kink surface near a point with
    <x_i, v> close to s * sqrt(y_i) is the affine slice <x_i, v> = s sqrt(y_i).
    """

    def __init__(self, objective: RiskObjective):
        self.X = objective.X
        self.y = objective.y
        self.m, self.d = self.X.shape
        self.phase = isinstance(objective.problem, PhaseRetrieval)

    def residuals(self, v: Array) -> Array:
        if self.phase:
            u = self.X @ v
            return u * u - self.y
        return self.X @ v - self.y

    def eligible_kinks(self) -> Array:
        # A phase-retrieval term with y <= 0 never crosses zero transversally.
        if self.phase:
            return self.y > 0.0
        return np.ones(self.m, dtype=bool)

    def kink_rhs(self, i: int, v: Array) -> float:
        if self.phase:
            root = math.sqrt(self.y[i])
            return root if float(self.X[i] @ v) >= 0 else -root
        return float(self.y[i])

    def piece_system(self, w: Array, lam: float, sigma: Array) -> tuple[Array, Array]:
        """All-inactive piece Hessian and stationarity right-hand side."""
        d = self.d
        if self.phase:
            H = np.eye(d) / lam + (2.0 / self.m) * (self.X.T * sigma) @ self.X
            rhs = w / lam
        else:
            H = np.eye(d) / lam
            rhs = w / lam - self.X.T @ sigma / self.m
        return H, rhs

    def solve_kkt(self, H_full: Array, rhs_full: Array, sigma: Array, active: list[int], rhs_t: Array):
        """Exact minimizer of the sign-fixed piece subject to active kinks.

        Returns (v, theta) or None when the linear system is defective.
        Moving a term from inactive to active is a small correction to the
        all-inactive system, so candidates share one O(m d^2) assembly.
        Stationarity plus multipliers nu on the kink slices:

            H v + sum_i nu_i x_i = rhs,   <x_i, v> = t_i.

        Samples drawn with replacement repeat examples, so pinned rows can
        coincide exactly; duplicates share one constraint row and the group
        multiplier is split evenly over the copies.  Candidates that fail to
        sit on their pinned kinks are rejected rather than returned.
        """
        m, d, k = self.m, self.d, len(active)
        H = H_full
        rhs = rhs_full
        if k > 0:
            R = self.X[active]
            if self.phase:
                H = H_full - (2.0 / m) * (R.T * sigma[active]) @ R
            else:
                rhs = rhs_full + R.T @ sigma[active] / m
        if k == 0:
            try:
                v = np.linalg.solve(H, rhs)
            except np.linalg.LinAlgError:
                return None
            return v, np.zeros(0)
        groups: dict = {}
        for pos in range(k):
            key = (self.X[active[pos]].tobytes(), float(rhs_t[pos]))
            groups.setdefault(key, []).append(pos)
        reps = [g[0] for g in groups.values()]
        R_u = R[reps]
        t_u = rhs_t[reps]
        ku = len(reps)
        KKT = np.zeros((d + ku, d + ku))
        KKT[:d, :d] = H
        KKT[:d, d:] = R_u.T
        KKT[d:, :d] = R_u
        full_rhs = np.concatenate([rhs, t_u])
        try:
            sol = np.linalg.solve(KKT, full_rhs)
        except np.linalg.LinAlgError:
            sol, *_ = np.linalg.lstsq(KKT, full_rhs, rcond=None)
        v, nu_u = sol[:d], sol[d:]
        feas = float(np.max(np.abs(R_u @ v - t_u))) if ku else 0.0
        if not np.all(np.isfinite(v)) or feas > _KINK_TOL * (1.0 + float(np.max(np.abs(t_u)))):
            return None
        nu = np.zeros(k)
        for members, nu_g in zip(groups.values(), nu_u):
            share = nu_g / len(members)
            for pos in members:
                nu[pos] = share
        if self.phase:
            theta = nu * m / (2.0 * rhs_t)
        else:
            theta = nu * m
        return v, theta

    def certificate(self, w: Array, lam: float, v: Array, active: list[int], theta: Array):
        """Honest residual at v: valid subgradient plus (v - w)/lam.

        Active terms must sit on their kink to near machine precision for the
        clamped multiplier to be a legal subdifferential member; otherwise the
        candidate is rejected (returns None).
        """
        c = self.residuals(v)
        scale = 1.0 + np.abs(self.y)
        for pos, i in enumerate(active):
            if abs(c[i]) > _KINK_TOL * scale[i]:
                return None
            if abs(theta[pos]) > 1.0 + _THETA_SLACK:
                return None
        contrib = np.sign(c)
        theta_full = contrib.copy()
        if len(active) > 0:
            theta_full[active] = np.clip(theta[np.arange(len(active))], -1.0, 1.0)
        if self.phase:
            u = self.X @ v
            g = self.X.T @ (2.0 * theta_full * u) / self.m
        else:
            g = self.X.T @ theta_full / self.m
        return float(np.linalg.norm(g + (v - w) / lam))


def _active_set_repair(structure: _PiecewiseRisk, w: Array, lam: float,
                       v_start: Array, tol: float):
    """Exact piece hopping for kink-dense neighborhoods.

    Noisy squared targets can leave dozens of terms within 1e-4 of a kink, so
    neither prefix active sets nor plain subgradient steps resolve which terms
    are active.  This loop alternates exact sign-fixed KKT solves with two
    repairs: pin terms whose residual crossed zero during the jump, release
    pinned terms whose multiplier leaves [-1, 1] (the multiplier sign says
    which side the minimizer wants).  Returns (residual, v, rounds) for the
    best certified candidate, or None.
    """
    eligible = structure.eligible_kinks()
    scale = 1.0 + np.abs(structure.y)
    cap = structure.d + 2 * _EXTRA_ACTIVE
    v = v_start
    c = structure.residuals(v)
    sigma = np.sign(c)
    sigma[sigma == 0.0] = 1.0
    near = np.flatnonzero(eligible & (np.abs(c) <= _KINK_TOL * scale))
    active = [int(i) for i in near[:cap]]
    best = None
    for rounds in range(1, _REPAIR_ROUNDS + 1):
        H_full, rhs_full = structure.piece_system(w, lam, sigma)
        rhs_t = np.array([structure.kink_rhs(i, v) for i in active])
        sol = structure.solve_kkt(H_full, rhs_full, sigma, active, rhs_t)
        if sol is None:
            break
        v_new, theta = sol
        if not np.all(np.isfinite(v_new)):
            break
        res = structure.certificate(w, lam, v_new, active, theta)
        if res is not None and (best is None or res < best[0]):
            best = (res, v_new, rounds)
            if res <= tol:
                return best
        c_new = structure.residuals(v_new)
        released = {active[pos] for pos in range(len(active))
                    if abs(theta[pos]) > 1.0 + _THETA_SLACK}
        in_active = np.zeros(structure.m, dtype=bool)
        if active:
            in_active[active] = True
        # A term that crossed its kink during the jump, or landed exactly on
        # it, belongs in the pinned set; the strict sign test alone misses
        # terms the solve parks on the kink (duplicated examples do this).
        viol = eligible & ~in_active & (
            (sigma * c_new < 0.0) | (np.abs(c_new) <= _KINK_TOL * scale))
        crossed = [int(i) for i in np.flatnonzero(viol)]
        if not released and not crossed:
            break
        keep = [i for i in active if i not in released]
        crossed.sort(key=lambda i: abs(c_new[i]) / scale[i])
        room = cap - len(keep)
        pinned = [i for i in crossed[:max(room, 0)] if i not in released]
        sigma_new = np.sign(c_new)
        sigma_new[sigma_new == 0.0] = sigma[sigma_new == 0.0]
        for pos, i in enumerate(active):
            if i in released:
                sigma_new[i] = 1.0 if theta[pos] > 0 else -1.0
        active = keep + pinned
        sigma = sigma_new
        v = v_new
    return best


def _prox_piecewise(objective: RiskObjective, w: Array, config: MoreauConfig) -> MoreauResult:
    lam, tol = config.lam, config.inner_tolerance
    rho = objective.weak_convexity()
    mu = 1.0 / lam - rho
    structure = _PiecewiseRisk(objective)
    eligible = structure.eligible_kinks()
    k_max = min(structure.d + _EXTRA_ACTIVE, int(np.sum(eligible)))

    def phi(v):
        diff = v - w
        return objective.value(v) + float(diff @ diff) / (2.0 * lam)

    def try_polish(v):
        """One polish round.  Returns (residual, v) for the best certified
        candidate, or None when every candidate system is defective."""
        c = structure.residuals(v)
        sigma = np.sign(c)
        sigma[sigma == 0.0] = 1.0
        order = np.argsort(np.abs(np.where(eligible, c, np.inf)))
        H_full, rhs_full = structure.piece_system(w, lam, sigma)
        best = None
        for k in range(k_max + 1):
            active = [int(i) for i in order[:k]]
            rhs_t = np.array([structure.kink_rhs(i, v) for i in active])
            sol = structure.solve_kkt(H_full, rhs_full, sigma, active, rhs_t)
            if sol is None:
                continue
            v_new, theta = sol
            if not np.all(np.isfinite(v_new)):
                continue
            res = structure.certificate(w, lam, v_new, active, theta)
            if res is None:
                continue
            if best is None or res < best[0]:
                best = (res, v_new)
            if res <= tol:
                return best
        return best

    v = w.copy()
    best_val = phi(v)
    best_v = v
    best_res = math.inf
    steps = 0
    k = 0
    while True:
        candidate = try_polish(best_v)
        if candidate is not None:
            res, v_cand = candidate
            if res < best_res:
                best_res = res
            if res <= tol:
                return _result(objective, w, v_cand, lam, res, steps)
            cand_val = phi(v_cand)
            if cand_val < best_val:
                best_val, best_v = cand_val, v_cand
        repaired = _active_set_repair(structure, w, lam, best_v, tol)
        if repaired is not None:
            res, v_cand, rounds = repaired
            steps += rounds
            if res < best_res:
                best_res = res
            if res <= tol:
                return _result(objective, w, v_cand, lam, res, steps)
            cand_val = phi(v_cand)
            if cand_val < best_val:
                best_val, best_v = cand_val, v_cand
        if steps >= config.inner_max_iters:
            break
        # Localize with the strongly convex subgradient step rule.
        v = best_v.copy()
        for _ in range(min(_POLISH_EVERY, config.inner_max_iters - steps)):
            val_psi, g = objective.value_and_mean_subgrad(v)
            diff = v - w
            # The chosen subgradient is itself a certificate; a center that
            # already minimizes (zero subgradient) certifies immediately.
            composite = g + diff / lam
            res_here = float(np.linalg.norm(composite))
            if res_here < best_res:
                best_res = res_here
            if res_here <= tol:
                return _result(objective, w, v.copy(), lam, res_here, steps)
            val = val_psi + float(diff @ diff) / (2.0 * lam)
            if val < best_val:
                best_val, best_v = val, v.copy()
            v = v - (2.0 / (mu * (k + 2))) * composite
            k += 1
            steps += 1
    raise ProxConvergenceError(
        f"prox solve exhausted {config.inner_max_iters} iterations at residual "
        f"{best_res:.3e} (tolerance {tol:.1e})",
        result=_result(objective, w, best_v, lam, best_res, steps),
    )


def _prox_subgradient_only(objective: RiskObjective, w: Array, config: MoreauConfig) -> MoreauResult:
    # Generic fallback for risks without piecewise-quadratic structure hooks.
    lam, tol = config.lam, config.inner_tolerance
    mu = 1.0 / lam - objective.weak_convexity()
    v = w.copy()
    best_res = math.inf
    best_v = v
    for k in range(config.inner_max_iters):
        _, g = objective.value_and_mean_subgrad(v)
        full = g + (v - w) / lam
        res = float(np.linalg.norm(full))
        if res < best_res:
            best_res, best_v = res, v.copy()
        if res <= tol:
            return _result(objective, w, v, lam, res, k)
        v = v - (2.0 / (mu * (k + 2))) * full
    raise ProxConvergenceError(
        f"subgradient prox solve exhausted {config.inner_max_iters} iterations "
        f"at residual {best_res:.3e}",
        result=_result(objective, w, best_v, lam, best_res, config.inner_max_iters),
    )


def prox(objective: RiskObjective, w, config: MoreauConfig) -> MoreauResult:
    """Proximal point of the risk at w, with a first-order certificate.

    Raises ProxConvergenceError (carrying the best iterate and its residual)
    when the certificate cannot be met within the iteration budget.
    """
    w = _validate(objective, w, config)
    p = objective.problem
    if isinstance(p, QuadraticLoss):
        return _prox_quadratic(objective, w, config)
    if isinstance(p, SmoothedRegression):
        return _prox_smooth_newton(objective, w, config)
    if isinstance(p, (AbsoluteRegression, PhaseRetrieval)):
        return _prox_piecewise(objective, w, config)
    return _prox_subgradient_only(objective, w, config)


def envelope_value(objective: RiskObjective, w, config: MoreauConfig) -> float:
    """Moreau envelope value at w (computed from the certified prox point)."""
    return prox(objective, w, config).envelope_value


def envelope_gradient(objective: RiskObjective, w, config: MoreauConfig) -> Array:
    """Envelope gradient (w - prox(w)) / lam."""
    return prox(objective, w, config).envelope_gradient


def prox_oracle_1d(kind: str, lam: float, w: float) -> MoreauResult:
    """Closed-form prox and envelope for scalar psi.

    kind="quadratic": psi(v) = v^2 / 2, prox = w / (1 + lam).
    kind="absolute":  psi(v) = |v|, prox = soft threshold, envelope = Huber.
    """
    if not (lam > 0 and math.isfinite(lam)):
        raise ConfigError("lam must be positive and finite")
    w = float(w)
    if kind == "quadratic":
        p = w / (1.0 + lam)
        value = 0.5 * p * p + (w - p) ** 2 / (2.0 * lam)
    elif kind == "absolute":
        p = math.copysign(max(abs(w) - lam, 0.0), w)
        value = abs(w) - lam / 2.0 if abs(w) > lam else w * w / (2.0 * lam)
    else:
        raise ConfigError(f"unknown 1-D oracle kind {kind!r}")
    point = np.array([p])
    grad = np.array([(w - p) / lam])
    return MoreauResult(point, value, grad, 0.0, 0)
