"""Feynman-Kac models, particle bookkeeping and the bootstrap particle filter.

Models are *batched*: every sampler and potential receives an array of
particle states whose first axis indexes particles, and returns arrays of the
same leading length.  A model is the tuple ``(M_0:n, G_0:n)``; the filter
below approximates its marginal flow and returns an unbiased estimate of the
normalising constant.

All weights and potentials are handled in log space.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp


class InvalidWeightsError(ValueError):
    """Raised when a weight vector is negative, non-finite or all zero."""


class PotentialError(FloatingPointError):
    """Raised when a log-potential is not a finite real number."""

    def __init__(self, p, message=None):
        self.p = p
        super().__init__(message or f"non-finite log-potential at time p={p}")


class FeynmanKacModel:
    """Base class for a Feynman-Kac model ``(M_0:n, G_0:n)``.

    Subclasses implement :meth:`sample_initial`, :meth:`sample_kernel` and
    :meth:`log_potential`.  ``log_potential`` may be stochastic, in which case
    ``exp`` of its output must be an unbiased estimate of ``G_p(x)``.

    Models that sample by rejection override :meth:`draw_initial` and
    :meth:`draw_kernel` to report the number of proposals per particle, and
    :meth:`potential_cost` to report kernel draws spent inside the potentials.
    """

    n: int = 0
    state_dim: int | None = None

    def sample_initial(self, size, rng):
        raise NotImplementedError

    def sample_kernel(self, p, x, rng):
        raise NotImplementedError

    def log_potential(self, p, x, rng):
        raise NotImplementedError

    def draw_initial(self, size, rng):
        return self.sample_initial(size, rng), np.ones(size, dtype=np.int64)

    def draw_kernel(self, p, x, rng):
        return self.sample_kernel(p, x, rng), np.ones(len(x), dtype=np.int64)

    def potential_cost(self, p, size):
        return 0


@dataclass(frozen=True)
class ResamplingPolicy:
    """When to resample: ``always``, or ``adaptive`` when ``ESS < kappa * N``.

    ``kappa >= 1`` resamples at every step, so it reproduces ``always`` exactly.
    """

    mode: str = "adaptive"
    kappa: float = 0.5

    def __post_init__(self):
        if self.mode not in ("always", "adaptive"):
            raise ValueError(f"unknown resampling mode {self.mode!r}")
        if not 0.0 <= self.kappa <= 1.0:
            raise ValueError(f"kappa must lie in [0, 1], got {self.kappa}")

    def should_resample(self, ess_value, N):
        if self.mode == "always" or self.kappa >= 1.0:
            return True
        return ess_value < self.kappa * N


@dataclass
class ParticleRun:
    """Output of :func:`run_filter`.

    ``states[p]`` are the predictive particles at time ``p``,
    ``pred_weights[p]`` their normalised weights (uniform after resampling)
    and ``weights[p]`` the normalised weights after applying ``G_p``.  When the
    run was made without path storage, only the final time is kept in these
    lists.  ``log_z_trace[p]`` is the log of the updated normalising-constant
    estimate at time ``p``.
    """

    N: int
    n: int
    states: list
    pred_weights: list
    weights: list
    log_z_trace: np.ndarray
    ess_trace: np.ndarray
    resampled_flags: np.ndarray
    rejection_trials: np.ndarray
    kernel_sim_count: int
    store_paths: bool = True
    trial_totals: np.ndarray = field(default=None, repr=False)

    @property
    def log_z_hat(self):
        return float(self.log_z_trace[-1])

    def log_z_predictive(self, p):
        """Log of the predictive estimate ``Z_p^N = prod_{t<p} eta_t^N(G_t)``."""
        return 0.0 if p == 0 else float(self.log_z_trace[p - 1])

    @property
    def resample_count(self):
        return int(np.sum(self.resampled_flags))

    def _index(self, p):
        if not 0 <= p <= self.n:
            raise IndexError(f"time {p} outside 0..{self.n}")
        if self.store_paths:
            return p
        if p != self.n:
            raise ValueError("run was made without path storage; only time n is kept")
        return 0


def _check_weights(weights):
    w = np.asarray(weights, dtype=float)
    if w.ndim != 1 or w.size == 0:
        raise InvalidWeightsError("weights must be a non-empty 1-d array")
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise InvalidWeightsError("weights must be finite and non-negative")
    total = w.sum()
    if total <= 0:
        raise InvalidWeightsError("weights are all zero")
    return w, total


def ess(weights):
    """Effective sample size ``1 / sum(w_i^2)`` of normalised weights."""
    w, total = _check_weights(weights)
    if abs(total - 1.0) > 1e-9:
        raise InvalidWeightsError(f"weights sum to {total}, expected 1")
    return float(1.0 / np.sum(w * w))


def resample_categorical(weights, N_out, rng):
    """Draw ``N_out`` i.i.d. ancestor indices with probabilities ``weights``."""
    if N_out < 1:
        raise ValueError("N_out must be at least 1")
    w, total = _check_weights(weights)
    cdf = np.cumsum(w)
    u = rng.random(N_out) * cdf[-1]
    idx = np.searchsorted(cdf, u, side="right")
    return np.minimum(idx, w.size - 1)


def run_filter(model, N, policy=None, rng=None, store_paths=True):
    """Run the bootstrap particle filter on ``model`` with ``N`` particles.

    With ``policy.mode == "always"`` this is the textbook algorithm and
    ``exp(log_z_hat)`` equals ``prod_t eta_t^N(G_t)``.  Under adaptive
    resampling the predictive weights are carried forward between resampling
    events and each step contributes ``log sum_i W_pred^i G_t^i``.
    """
    if N < 1:
        raise ValueError("N must be at least 1")
    policy = policy or ResamplingPolicy()
    rng = np.random.default_rng(rng)
    n = model.n

    log_z = np.empty(n + 1)
    ess_trace = np.empty(n + 1)
    flags = np.zeros(n + 1, dtype=bool)
    mean_trials = np.empty(n + 1)
    trial_totals = np.empty(n + 1, dtype=np.int64)
    states, pred_weights, weights = [], [], []
    sims = 0

    log_w = np.full(N, -np.log(N))
    acc = 0.0
    x = None
    for p in range(n + 1):
        if p == 0:
            x, trials = model.draw_initial(N, rng)
        else:
            x, trials = model.draw_kernel(p, x, rng)
        sims += int(trials.sum()) + int(model.potential_cost(p, N))
        trial_totals[p] = trials.sum()
        mean_trials[p] = trials.mean()

        logg = np.asarray(model.log_potential(p, x, rng), dtype=float)
        if logg.shape != (N,) or not np.all(np.isfinite(logg)):
            raise PotentialError(p)
        lw = log_w + logg
        inc = logsumexp(lw)
        acc += inc
        log_z[p] = acc
        w_upd = np.exp(lw - inc)
        w_upd /= w_upd.sum()
        ess_trace[p] = 1.0 / np.sum(w_upd * w_upd)

        w_pred = np.exp(log_w)
        if store_paths:
            states.append(x)
            pred_weights.append(w_pred)
            weights.append(w_upd)
        else:
            states, pred_weights, weights = [x], [w_pred], [w_upd]

        if p < n:
            if policy.should_resample(ess_trace[p], N):
                idx = resample_categorical(w_upd, N, rng)
                x = x[idx]
                log_w = np.full(N, -np.log(N))
                flags[p] = True
            else:
                with np.errstate(divide="ignore"):
                    log_w = np.log(w_upd)

    return ParticleRun(
        N=N,
        n=n,
        states=states,
        pred_weights=pred_weights,
        weights=weights,
        log_z_trace=log_z,
        ess_trace=ess_trace,
        resampled_flags=flags,
        rejection_trials=mean_trials,
        kernel_sim_count=sims,
        store_paths=store_paths,
        trial_totals=trial_totals,
    )


def weighted_estimate(run, p, f, updated=True):
    """Particle estimate of ``eta_hat_p(f)`` (``updated``) or ``eta_p(f)``."""
    i = run._index(p)
    w = run.weights[i] if updated else run.pred_weights[i]
    vals = np.asarray(f(run.states[i]), dtype=float)
    bad = np.flatnonzero(~np.isfinite(vals))
    if bad.size:
        raise ValueError(f"test function is not finite at particle {bad[0]}")
    return float(np.dot(w, vals))
