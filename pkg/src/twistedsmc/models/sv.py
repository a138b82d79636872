"""Square-root stochastic volatility model.

The variance follows a CIR process observed at unit time steps; returns are
``R_t = sqrt(X_t) Z_t`` with ``Z_t ~ N(0, sigma^2)``.  The unit-increment
transition is a compound Poisson-Gamma (CPG) law

    V ~ Pois(u(x)),   X' | V ~ Gamma(q + 1 + V, rate=c),

which stays in the same family under exponential tilting ``exp(-b x')``.
That closure lets the log-linear part of a twist be applied analytically and
used as a rejection proposal.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..core import FeynmanKacModel
from ..twisting import Proposal, TwistFunction, register_twist_kind


class TiltError(ValueError):
    """Exponential tilt outside the admissible range ``b > -rate``."""


@dataclass
class SvParams:
    phi1: float
    phi2: float
    phi3: float
    sigma: float = 0.25
    r: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        if min(self.phi1, self.phi2, self.phi3, self.sigma) <= 0:
            raise ValueError("phi1, phi2, phi3 and sigma must be positive")
        if 2.0 * self.phi1 < self.phi3**2:
            raise ValueError("need 2 phi1 >= phi3^2")
        if self.r is not None:
            self.r = np.asarray(self.r, dtype=float).ravel()

    @property
    def c(self):
        """Rate of the CPG transition."""
        return 2.0 * self.phi2 / (self.phi3**2 * (1.0 - math.exp(-self.phi2)))

    @property
    def q(self):
        return 2.0 * self.phi1 / self.phi3**2 - 1.0

    @property
    def shape(self):
        return self.q + 1.0

    def u(self, x):
        return self.c * np.asarray(x, dtype=float) * math.exp(-self.phi2)

    @property
    def stationary_shape(self):
        return 2.0 * self.phi1 / self.phi3**2

    @property
    def stationary_rate(self):
        return 2.0 * self.phi2 / self.phi3**2

    def conditional_mean(self, x):
        e = math.exp(-self.phi2)
        return np.asarray(x, dtype=float) * e + self.phi1 / self.phi2 * (1.0 - e)

    def conditional_var(self, x):
        return (self.shape + 2.0 * self.u(x)) / self.c**2

    def with_returns(self, r):
        return SvParams(self.phi1, self.phi2, self.phi3, self.sigma, r)


GENERATING = dict(phi1=0.1, phi2=0.5, phi3=0.1, sigma=0.25)
TESTING = dict(phi1=0.09, phi2=0.45, phi3=0.11, sigma=0.25)


def _check_tilt(rate, b):
    if np.any(np.asarray(rate + b) <= 0):
        raise TiltError(f"tilt b={b} is inadmissible for rate {rate}")


def cpg_sample(alpha, eta, rate, b=0.0, rng=None, size=None):
    """Draw from the CPG law tilted by ``exp(-b y)``.

    ``V ~ Pois(eta * rate / (rate + b))`` and ``Y | V ~ Gamma(alpha + V, rate + b)``.
    """
    _check_tilt(rate, b)
    rng = np.random.default_rng(rng)
    r2 = rate + b
    v = rng.poisson(np.asarray(eta, dtype=float) * rate / r2, size=size)
    return rng.gamma(alpha + v, 1.0 / r2)


def cpg_log_normalizer(alpha, eta, rate, b):
    """``log E[exp(-b Y)]`` under the untilted CPG law."""
    _check_tilt(rate, b)
    eta = np.asarray(eta, dtype=float)
    return eta * rate / (rate + b) - eta - alpha * np.log1p(b / rate)


def cpg_mean(alpha, eta, rate, b=0.0):
    r2 = rate + b
    return alpha / r2 + np.asarray(eta, dtype=float) * rate / r2**2


def sv_simulate(params, n, x0=None, rng=None):
    """Variance path ``x_0:n`` and returns ``r_1:n``.

    ``x0`` defaults to a draw from the stationary Gamma law.
    """
    rng = np.random.default_rng(rng)
    if x0 is None:
        x0 = rng.gamma(params.stationary_shape, 1.0 / params.stationary_rate)
    if x0 <= 0:
        raise ValueError("x0 must be positive")
    x = np.empty(n + 1)
    x[0] = x0
    for t in range(1, n + 1):
        x[t] = cpg_sample(params.shape, params.u(x[t - 1]), params.c, 0.0, rng)
    r = np.sqrt(x[1:]) * params.sigma * rng.standard_normal(n)
    return x, r


def sv_log_potential(r, x, sigma):
    x = np.asarray(x, dtype=float)
    if np.any(x <= 0):
        raise ValueError("variance must be positive")
    s2 = sigma**2 * x
    return -0.5 * np.log(2.0 * math.pi * s2) - 0.5 * r * r / s2


def sv_potential(r, x, sigma):
    """Density of ``N(0, sigma^2 x)`` at ``r``."""
    return np.exp(sv_log_potential(r, x, sigma))


class SvModel(FeynmanKacModel):
    """Feynman-Kac form with ``G_0 = 1`` and ``G_p`` the density of ``r_p``.

    States are ``(N, 1)`` arrays; ``M_0`` is the stationary Gamma law.
    """

    def __init__(self, params):
        if params.r is None:
            raise ValueError("SV model needs returns")
        self.params = params
        self.n = params.r.size
        self.state_dim = 1

    def sample_initial(self, size, rng):
        pr = self.params
        return rng.gamma(pr.stationary_shape, 1.0 / pr.stationary_rate, size=(size, 1))

    def sample_kernel(self, p, x, rng):
        pr = self.params
        return cpg_sample(pr.shape, pr.u(x), pr.c, 0.0, rng)

    def log_potential(self, p, x, rng):
        x = np.asarray(x, dtype=float).ravel()
        if p == 0:
            return np.zeros(x.size)
        return sv_log_potential(self.params.r[p - 1], x, self.params.sigma)

    def kernel_rate(self, p):
        return self.params.stationary_rate if p == 0 else self.params.c


class SvTwist(TwistFunction):
    """``log omega(x) = clip(a x^2 + b_q x + c, floor_log, 0) + b_l x``.

    The constant ``c`` already carries the ``-log q_max`` shift, so the clipped
    quadratic factor lies in ``[floor, 1]`` and ``omega / exp(b_l x) <= 1``.
    """

    kind = "sv"

    def __init__(self, a, b_q, c, b_l=0.0, floor_log=-np.inf):
        super().__init__(floor_log=floor_log)
        self.a, self.b_q, self.c, self.b_l = float(a), float(b_q), float(c), float(b_l)

    def log_quadratic(self, x):
        x = np.asarray(x, dtype=float).ravel()
        return np.clip((self.a * x + self.b_q) * x + self.c, self.floor_log, 0.0)

    def log_raw(self, x):
        x = np.asarray(x, dtype=float).ravel()
        return (self.a * x + self.b_q) * x + self.c + self.b_l * x

    def log_eval(self, x):
        return self.log_quadratic(x) + self.b_l * np.asarray(x, dtype=float).ravel()

    def to_record(self):
        return {**super().to_record(), "a": self.a, "b": [self.b_q], "c": self.c,
                "b_l": self.b_l}


class SvTiltProposal(Proposal):
    """``M_p^rho`` for ``rho(x) = exp(b_l x)``: an exactly tilted CPG (Gamma at p=0)."""

    def __init__(self, params, b_l):
        self.params = params
        self.b_l = float(b_l)

    def log_eval(self, x):
        return self.b_l * np.asarray(x, dtype=float).ravel()

    def sample(self, p, x_prev, rng, size=None):
        pr = self.params
        if x_prev is None:
            rate = pr.stationary_rate - self.b_l
            _check_tilt(rate, 0.0)
            return rng.gamma(pr.stationary_shape, 1.0 / rate, size=(size, 1))
        return cpg_sample(pr.shape, pr.u(x_prev), pr.c, -self.b_l, rng)

    def log_mass(self, p, x_prev):
        pr = self.params
        if x_prev is None:
            _check_tilt(pr.stationary_rate, -self.b_l)
            return float(-pr.stationary_shape * math.log1p(-self.b_l / pr.stationary_rate))
        return cpg_log_normalizer(pr.shape, pr.u(x_prev), pr.c, -self.b_l).ravel()

    def to_record(self):
        return {"b": self.b_l}


def sv_tilted_kernel(params, x_prev, twist, rng=None, max_trials=None):
    """Sample ``M^omega`` for an :class:`SvTwist` using its log-linear tilt as proposal."""
    from ..twisting import rejection_sample

    x_prev = np.asarray(x_prev, dtype=float).reshape(-1, 1)
    prop = SvTiltProposal(params, twist.b_l)
    return rejection_sample(1, x_prev, None, twist, prop, rng, max_trials=max_trials)


class SvTiltFamily:
    """Log-linear proposal family ``rho_theta(x) = exp(theta x)`` for one time step.

    For a fitted log-quadratic ``beta * (a x^2 + B x + C)``, the candidate twist
    with tilt ``theta`` keeps the quadratic factor ``a x^2 + (B - theta/beta) x``
    (scaled by ``beta``) and caps it at its maximum over the training points.
    """

    def __init__(self, params, p, fitted, beta, train_points, floor_log, margin=0.9):
        self.params = params
        self.p = p
        self.a = beta * float(np.ravel(fitted.quadratic_matrix())[0])
        self.B = beta * float(np.ravel(fitted.b)[0])
        self.C = beta * fitted.c
        self.train = np.asarray(train_points, dtype=float).ravel()
        self.floor_log = floor_log
        rate = params.stationary_rate if p == 0 else params.c
        self.bounds = (-rate, margin * rate)

    def _coeffs(self, theta):
        bq = self.B - theta
        q_max = np.max((self.a * self.train + bq) * self.train + self.C)
        return self.a, bq, self.C - q_max

    def twist(self, theta):
        theta = 0.0 if theta is None else float(theta)
        return SvTwist(*self._coeffs(theta), b_l=theta, floor_log=self.floor_log)

    def evaluate(self, theta, points):
        t = self.twist(theta)
        return t.log_eval(points), (t.b_l * np.asarray(points, dtype=float).ravel())

    def make(self, theta):
        t = self.twist(theta)
        return t, SvTiltProposal(self.params, t.b_l)


def sv_partial_family(params):
    """``LearnConfig.partial_family`` hook building :class:`SvTiltFamily` objects."""

    def build(p, fitted, beta, train_points, floor_log):
        return SvTiltFamily(params, p, fitted, beta, train_points, floor_log)

    return build


def _load_sv(rec, model):
    t = SvTwist(rec["a"], rec["b"][0], rec["c"], rec.get("b_l", 0.0), rec["floor_log"])
    return t, SvTiltProposal(model.params, t.b_l)


register_twist_kind("sv", _load_sv)
