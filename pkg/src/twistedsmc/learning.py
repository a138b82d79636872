"""Learning twisting functions from a previous particle approximation.

The backward pass regresses log-targets ``log G_p + log M_{p+1}(psi'_{p+1})``
onto an exponential-quadratic class, then tempers each new twist so that the
predicted rejection acceptance rate stays above a target.  Acceptance rates of
a prospective twist ``omega`` are predicted from the particles of the current
``psi``-twisted run, optionally with an analytically twisted proposal ``rho``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .twisting import (
    DEFAULT_FLOOR,
    ExpQuadraticTwist,
    PotentialTwist,
    TabularTwist,
    TwistSchedule,
    estimate_m_psi,
)

_GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


class DegenerateDesignError(np.linalg.LinAlgError):
    """The regression normal equations are singular even with the ridge term."""


@dataclass
class LearnConfig:
    """Settings for :func:`learn_twists`.

    ``alpha_min`` is either a single target acceptance rate or one per
    learning iteration.  ``function_class`` is ``"isotropic"``, ``"diagonal"``
    or a callable ``fit(points, log_targets) -> TwistFunction``.
    ``partial_family(p, fitted, beta, train_points, floor_log)`` returns a
    proposal family for partial analytical twisting at time ``p < n``.
    """

    iterations: int = 3
    n_tilde: int = 25
    alpha_min: float | Sequence[float] = (0.04, 0.02, 0.01)
    function_class: str | Callable = "isotropic"
    ridge: float = 1e-8
    tolerance: float = 0.05
    max_bisect: int = 50
    floor: float = DEFAULT_FLOOR
    exact_m: Callable | None = None
    partial_family: Callable | None = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be at least 1")
        if self.n_tilde < 1:
            raise ValueError("n_tilde must be at least 1")
        for a in np.atleast_1d(self.alpha_min):
            if not 0.0 < a <= 1.0:
                raise ValueError(f"alpha_min must lie in (0, 1], got {a}")

    def alpha_for(self, iteration):
        seq = np.atleast_1d(self.alpha_min)
        return float(seq[min(iteration, seq.size - 1)])

    @property
    def floor_log(self):
        return math.log(self.floor) if self.floor > 0 else -np.inf


@dataclass
class DrawBatch:
    """Draws ``zeta^{i,j} ~ M_p(parent_i, .)``, flattened parent-major."""

    points: np.ndarray
    weights: np.ndarray
    n_tilde: int

    @property
    def n_parents(self):
        return self.weights.size


def draw_batch(model, p, parents, weights, n_tilde, rng):
    """Draw ``n_tilde`` kernel samples per weighted parent particle.

    At ``p = 0`` there are no parents: ``n_tilde * len(weights)`` draws from
    ``M_0`` are grouped under a single parent of weight one.
    """
    weights = np.asarray(weights, dtype=float)
    if p == 0:
        k = n_tilde * weights.size
        return DrawBatch(model.sample_initial(k, rng), np.ones(1), k)
    pts = model.sample_kernel(p, np.repeat(parents, n_tilde, axis=0), rng)
    return DrawBatch(pts, weights / weights.sum(), n_tilde)


def _lse(a, axis=None):
    # lean log-sum-exp for the small arrays of the line searches
    a = np.asarray(a, dtype=float)
    m = np.max(a, axis=axis, keepdims=True)
    m = np.where(np.isfinite(m), m, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m
    return out.item() if axis is None else np.squeeze(out, axis)


@dataclass
class AcceptanceEstimate:
    """Per-parent log terms ``a_i(1)``, ``a_i(2)``, ``h_i`` and the rate."""

    log_a1: np.ndarray
    log_a2: np.ndarray
    log_h: np.ndarray
    alpha: float


def acceptance_from_logs(log_psi, log_omega, weights, log_rho=None):
    """Predicted acceptance rate from log-twist values on a draw batch.

    Inputs have shape ``(parents, n_tilde)``; ``omega / rho <= 1`` is assumed.
    """
    log_psi = np.atleast_2d(log_psi)
    log_omega = np.atleast_2d(log_omega)
    k = log_omega.shape[1]
    lse_omega = _lse(log_omega, axis=1)
    lse_psi = _lse(log_psi, axis=1)
    log_a1 = lse_omega - lse_psi
    log_a2 = 2.0 * lse_omega - lse_psi
    if log_rho is None:
        log_h = np.full(log_a1.shape, -math.log(k))
    else:
        log_h = -_lse(np.atleast_2d(log_rho), axis=1)
    with np.errstate(divide="ignore"):
        lw = np.log(np.asarray(weights, dtype=float))
    num = _lse(lw + log_a2 + log_h)
    den = _lse(lw + log_a1)
    if not np.isfinite(den):
        raise FloatingPointError("acceptance estimate has a zero denominator")
    return AcceptanceEstimate(log_a1, log_a2, log_h, float(np.exp(num - den)))


def estimate_acceptance(batch, psi, omega, rho=None):
    """Acceptance rate of ``omega`` (proposal ``rho``) estimated from ``psi`` particles.

    ``psi``, ``omega`` and ``rho`` are callables returning log values, e.g.
    ``TwistFunction.log_eval``.
    """
    shape = (batch.n_parents, batch.n_tilde)
    lp = np.asarray(psi(batch.points)).reshape(shape)
    lo = np.asarray(omega(batch.points)).reshape(shape)
    lr = None if rho is None else np.asarray(rho(batch.points)).reshape(shape)
    return acceptance_from_logs(lp, lo, batch.weights, lr)


def bisect_temperature(alpha_fn, alpha_min, tolerance=0.05, max_iter=50):
    """Largest-feasible temperature search; returns ``(beta, alpha(beta), alpha(1))``.

    ``beta = 1`` when ``alpha_fn(1) >= alpha_min``; otherwise bisection on
    ``(0, 1)`` keeps the feasible end of the bracket and stops once it is within
    ``tolerance * alpha_min`` of the target.
    """
    a_one = alpha_fn(1.0)
    if a_one >= alpha_min:
        return 1.0, a_one, a_one
    lo, hi, a_lo = 0.0, 1.0, 1.0
    for _ in range(max_iter):
        mid = 0.5 * (lo + hi)
        a = alpha_fn(mid)
        if a >= alpha_min:
            lo, a_lo = mid, a
            if a - alpha_min <= tolerance * alpha_min:
                break
        else:
            hi = mid
    if lo == 0.0:
        lo = 0.5 * hi
        a_lo = alpha_fn(lo)
    return lo, a_lo, a_one


def temper_to_target(batch, log_psi, log_target, alpha_min, floor_log=-np.inf,
                     tolerance=0.05, max_iter=50):
    """Temperature ``beta`` for ``omega = max(target^beta, floor)``.

    ``log_target`` holds ``log(psi * lambda)`` at the batch points, already
    shifted so that it is at most zero.  One draw batch serves every ``beta``.
    """
    shape = (batch.n_parents, batch.n_tilde)
    lp = np.asarray(log_psi).reshape(shape)
    lt = np.asarray(log_target).reshape(shape)

    def alpha(beta):
        lo = np.maximum(beta * lt, floor_log)
        return acceptance_from_logs(lp, lo, batch.weights).alpha

    return bisect_temperature(alpha, alpha_min, tolerance, max_iter)


class FiniteRhoFamily:
    """Finite proposal family for a fixed ``omega``.

    Each candidate ``rho`` is rescaled on the batch so that ``max omega/rho = 1``.
    """

    def __init__(self, log_omega, log_rhos):
        self.log_omega = log_omega
        self.candidates = list(range(len(log_rhos)))
        self.log_rhos = list(log_rhos)

    def evaluate(self, theta, points):
        lo = np.asarray(self.log_omega(points), dtype=float)
        if theta is None:
            return lo, np.zeros_like(lo)
        lr = np.asarray(self.log_rhos[theta](points), dtype=float)
        return lo, lr + np.max(lo - lr)


def _golden_max(f, a, b, tol, max_iter=60):
    c = b - _GOLDEN * (b - a)
    d = a + _GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    best = (fc, c) if fc >= fd else (fd, d)
    for _ in range(max_iter):
        if abs(b - a) <= tol:
            break
        if fc >= fd:
            b, d, fd = d, c, fc
            c = b - _GOLDEN * (b - a)
            fc = f(c)
            if fc > best[0]:
                best = (fc, c)
        else:
            a, c, fc = c, d, fd
            d = a + _GOLDEN * (b - a)
            fd = f(d)
            if fd > best[0]:
                best = (fd, d)
    return best


def maximize_partial_twist(batch, log_psi, family, n_grid=41, tol=None):
    """Choose the proposal in ``family`` maximising the predicted acceptance rate.

    Finite families are searched exhaustively; one-parameter families (with a
    ``bounds`` attribute) by a coarse grid refined with golden-section search
    around the best grid cell.  Returns ``(theta, AcceptanceEstimate)``; an
    empty family gives ``theta = None`` (``rho == 1``).
    """
    shape = (batch.n_parents, batch.n_tilde)
    lp = np.asarray(log_psi).reshape(shape)

    def est(theta):
        lo, lr = family.evaluate(theta, batch.points)
        lr = None if theta is None else np.reshape(lr, shape)
        return acceptance_from_logs(lp, np.reshape(lo, shape), batch.weights, lr)

    candidates = getattr(family, "candidates", None)
    if candidates is not None:
        if len(candidates) == 0:
            return None, est(None)
        results = [(est(t).alpha, i) for i, t in enumerate(candidates)]
        best = candidates[max(results)[1]]
        return best, est(best)

    lo_b, hi_b = family.bounds
    grid = np.linspace(lo_b, hi_b, n_grid)
    vals = np.array([est(t).alpha for t in grid])
    k = int(np.argmax(vals))
    a, b = grid[max(k - 1, 0)], grid[min(k + 1, n_grid - 1)]
    tol = tol if tol is not None else 1e-3 * (hi_b - lo_b)
    g_val, g_theta = _golden_max(lambda t: est(t).alpha, a, b, tol)
    theta = g_theta if g_val > vals[k] else grid[k]
    return float(theta), est(theta)


# -- regression --------------------------------------------------------------

def _features(X, kind):
    m = X.shape[0]
    if kind == "isotropic":
        quad = np.einsum("ij,ij->i", X, X)[:, None]
    elif kind == "diagonal":
        quad = X * X
    else:
        raise ValueError(f"unknown function class {kind!r}")
    return np.hstack([quad, X, np.ones((m, 1))])


def fit_log_quadratic(points, targets, kind="isotropic", ridge=1e-8):
    """Least-squares exp-quadratic fit of ``log h(x)`` to ``targets``.

    Solves the ridge-regularised normal equations on features
    ``(|x|^2 or x_j^2, x_j, 1)``; the ridge weight is scaled by the mean
    diagonal of the Gram matrix and the intercept is not penalised.
    """
    X = np.asarray(points, dtype=float)
    X = X.reshape(len(X), -1)
    y = np.asarray(targets, dtype=float)
    if not np.all(np.isfinite(y)):
        bad = int(np.flatnonzero(~np.isfinite(y))[0])
        raise ValueError(f"non-finite regression target at index {bad}")
    F = _features(X, kind)
    nq = F.shape[1] - X.shape[1] - 1
    if F.shape[0] < F.shape[1]:
        raise DegenerateDesignError(
            f"{F.shape[0]} points cannot determine {F.shape[1]} coefficients")
    gram = F.T @ F
    pen = np.full(F.shape[1], ridge * np.trace(gram) / F.shape[1])
    pen[-1] = 0.0
    try:
        coef = np.linalg.solve(gram + np.diag(pen), F.T @ y)
    except np.linalg.LinAlgError as exc:
        raise DegenerateDesignError(str(exc)) from exc
    if not np.all(np.isfinite(coef)):
        raise DegenerateDesignError("regression produced non-finite coefficients")
    a = coef[0] if kind == "isotropic" else coef[:nq]
    return ExpQuadraticTwist(a, coef[nq:-1], coef[-1])


def fit_tabular(points, targets, K):
    """Least-squares fit over all functions on ``{0..K-1}``: per-state means.

    States without data receive the smallest fitted value.
    """
    x = np.asarray(points, dtype=np.intp).ravel()
    y = np.asarray(targets, dtype=float)
    counts = np.bincount(x, minlength=K)
    sums = np.bincount(x, weights=y, minlength=K)
    seen = counts > 0
    vals = np.empty(K)
    vals[seen] = sums[seen] / counts[seen]
    vals[~seen] = vals[seen].min()
    return TabularTwist(vals)


def _fit(cfg, points, targets):
    if callable(cfg.function_class):
        return cfg.function_class(points, targets)
    return fit_log_quadratic(points, targets, cfg.function_class, cfg.ridge)


def _parents(run, p):
    return run.states[p - 1], run.weights[p - 1]


def learn_twists(run, base, schedule, cfg, rng=None, alpha_min=None):
    """One backward learning sweep producing a new :class:`TwistSchedule`.

    ``run`` must come from the ``schedule``-twisted model with stored paths.
    ``psi'_n`` is the tempered terminal potential; for ``p < n`` the product
    ``psi_p * lambda_p`` is fitted by regression and tempered to
    ``alpha_min``.  Each new twist is shifted so its maximum over the training
    and batch points is one, then floored at ``cfg.floor``.
    """
    if not run.store_paths:
        raise ValueError("learning needs a run with stored paths")
    rng = np.random.default_rng(rng)
    n = base.n
    if n < 1:
        raise ValueError("learning needs n >= 1")
    alpha_min = cfg.alpha_for(0) if alpha_min is None else alpha_min
    k = cfg.n_tilde
    floor_log = cfg.floor_log
    old = schedule.psi
    new = [None] * (n + 1)
    rho = [None] * (n + 1)
    report = []

    def temper(p, batch, target):
        lp = old[p].log_eval(batch.points)
        x_train = run.states[p]
        m = max(np.max(target.log_raw(x_train)), np.max(target.log_raw(batch.points)))
        lt = target.log_raw(batch.points) - m
        beta, a_post, a_pre = temper_to_target(batch, lp, lt, alpha_min, floor_log,
                                               cfg.tolerance, cfg.max_bisect)
        return target.tempered(beta, -beta * m, floor_log), beta, a_pre, a_post

    batch = draw_batch(base, n, *_parents(run, n), k, rng)
    new[n], beta, a_pre, a_post = temper(n, batch, PotentialTwist(base, n))
    report.append({"p": n, "beta": beta, "alpha_pre": a_pre, "alpha_post": a_post,
                   "rmse": 0.0, "rho": float("nan")})

    for p in range(n - 1, -1, -1):
        x = run.states[p]
        if cfg.exact_m is not None:
            log_m = cfg.exact_m(p + 1, x, new[p + 1])
        else:
            log_m = estimate_m_psi(p + 1, x, base, new[p + 1], k, rng, log=True)
        log_g = np.asarray(base.log_potential(p, x, rng), dtype=float)
        log_old = old[p].log_eval(x)
        log_lambda = log_g - log_old + log_m
        if not np.all(np.isfinite(log_lambda)):
            i = int(np.flatnonzero(~np.isfinite(log_lambda))[0])
            raise ValueError(f"non-finite learning target at p={p}, particle {i}")
        # fitting psi * lambda directly equals psi times the fitted lambda
        # whenever log psi lies in the function class
        fitted = _fit(cfg, x, log_lambda + log_old)
        rmse = float(np.sqrt(np.mean((fitted.log_raw(x) - log_lambda - log_old) ** 2)))

        if p == 0:
            batch = draw_batch(base, 0, None, np.ones(run.N), k, rng)
        else:
            batch = draw_batch(base, p, *_parents(run, p), k, rng)

        if cfg.partial_family is None:
            new[p], beta, a_pre, a_post = temper(p, batch, fitted)
            theta = float("nan")
        else:
            lp = old[p].log_eval(batch.points)

            def best(beta):
                fam = cfg.partial_family(p, fitted, beta, x, floor_log)
                return fam, *maximize_partial_twist(batch, lp, fam)

            beta, a_post, a_pre = bisect_temperature(
                lambda b: best(b)[2].alpha, alpha_min, cfg.tolerance, cfg.max_bisect)
            fam, theta, _ = best(beta)
            new[p], rho[p] = fam.make(theta)
        report.append({"p": p, "beta": beta, "alpha_pre": a_pre, "alpha_post": a_post,
                       "rmse": rmse, "rho": theta})

    out = TwistSchedule(new, rho, n_tilde=schedule.n_tilde)
    out.report = sorted(report, key=lambda r: r["p"])
    return out


def temper_schedule(run, base, target, schedule, alpha_min, n_tilde, floor_log=-np.inf,
                    rng=None, tolerance=0.05, max_iter=50):
    """Temper fixed twists ``target`` (each at most one) to ``alpha_min``.

    ``run`` comes from the ``schedule``-twisted model.  At each time the new
    twist is ``max(target_p^beta_p, floor)`` with ``beta_p`` from the same
    bisection used in :func:`learn_twists`.
    """
    rng = np.random.default_rng(rng)
    n = base.n
    out, report = [], []
    for p in range(n + 1):
        if p == 0:
            batch = draw_batch(base, 0, None, np.ones(run.N), n_tilde, rng)
        else:
            batch = draw_batch(base, p, *_parents(run, p), n_tilde, rng)
        t = target.psi[p]
        lp = schedule.psi[p].log_eval(batch.points)
        lt = t.log_eval(batch.points)
        beta, a_post, a_pre = temper_to_target(batch, lp, lt, alpha_min, floor_log,
                                               tolerance, max_iter)
        out.append(t.tempered(beta * t.beta, beta * t.shift, floor_log))
        report.append({"p": p, "beta": beta, "alpha_pre": a_pre, "alpha_post": a_post,
                       "rmse": 0.0, "rho": float("nan")})
    res = TwistSchedule(out, n_tilde=schedule.n_tilde)
    res.report = report
    return res
