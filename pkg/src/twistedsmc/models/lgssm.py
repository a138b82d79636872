"""Linear Gaussian hidden Markov model with exact evidence and optimal twists.

``X_0 ~ N(mu0, s0 I)``, ``X_p | x ~ N(A x, sM I)`` and
``G_p(x) = N(y_p; x, sG I)``.  Exponential-quadratic functions are closed
under these Gaussian integrals, which gives the Kalman evidence, closed-form
``M_p(psi)`` and the analytic optimal twisting functions.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ..core import FeynmanKacModel
from ..twisting import ExpQuadraticTwist, Proposal, TwistSchedule


def transition_matrix(a, d):
    """``A_ij = a^(|i-j| + 1)``."""
    i = np.arange(d)
    return a ** (np.abs(i[:, None] - i[None, :]) + 1.0)


@dataclass
class LgssmParams:
    d: int
    n: int
    mu0: np.ndarray
    sigma0_sq: float
    sigmaM_sq: float
    sigmaG_sq: float
    A: np.ndarray
    a: float | None = None
    y: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.mu0 = np.broadcast_to(np.asarray(self.mu0, dtype=float), (self.d,)).copy()
        self.A = np.asarray(self.A, dtype=float)
        if self.A.shape != (self.d, self.d):
            raise ValueError(f"A must be {self.d}x{self.d}")
        if min(self.sigma0_sq, self.sigmaM_sq, self.sigmaG_sq) <= 0:
            raise ValueError("variances must be positive")
        if self.y is not None:
            self.y = np.asarray(self.y, dtype=float).reshape(self.n + 1, self.d)

    @classmethod
    def from_a(cls, a=0.42, d=3, n=200, mu0=1.0, sigma0_sq=1.0, sigmaM_sq=1.0,
               sigmaG_sq=0.25, y=None):
        return cls(d, n, mu0, sigma0_sq, sigmaM_sq, sigmaG_sq,
                   transition_matrix(a, d), a=a, y=y)

    def with_observations(self, y):
        return LgssmParams(self.d, self.n, self.mu0, self.sigma0_sq, self.sigmaM_sq,
                           self.sigmaG_sq, self.A, self.a, y)

    def kernel_mean(self, p, x):
        """Mean of ``M_p(x, .)`` per row; ``M_0`` mean when ``p == 0``."""
        if p == 0:
            return self.mu0[None, :]
        return np.asarray(x, dtype=float).reshape(-1, self.d) @ self.A.T

    def kernel_var(self, p):
        return self.sigma0_sq if p == 0 else self.sigmaM_sq


def lgssm_simulate(params, rng=None):
    """Latent path ``x`` and observations ``y``, both ``(n+1, d)``."""
    rng = np.random.default_rng(rng)
    d, n = params.d, params.n
    x = np.empty((n + 1, d))
    x[0] = params.mu0 + math.sqrt(params.sigma0_sq) * rng.standard_normal(d)
    for p in range(1, n + 1):
        x[p] = params.A @ x[p - 1] + math.sqrt(params.sigmaM_sq) * rng.standard_normal(d)
    y = x + math.sqrt(params.sigmaG_sq) * rng.standard_normal((n + 1, d))
    return x, y


class LgssmModel(FeynmanKacModel):
    def __init__(self, params):
        if params.y is None:
            raise ValueError("LGSSM model needs observations")
        self.params = params
        self.n = params.n
        self.state_dim = params.d
        self._log_norm = -0.5 * params.d * math.log(2 * math.pi * params.sigmaG_sq)

    def sample_initial(self, size, rng):
        pr = self.params
        return pr.mu0 + math.sqrt(pr.sigma0_sq) * rng.standard_normal((size, pr.d))

    def sample_kernel(self, p, x, rng):
        pr = self.params
        return x @ pr.A.T + math.sqrt(pr.sigmaM_sq) * rng.standard_normal(x.shape)

    def log_potential(self, p, x, rng):
        r = x - self.params.y[p]
        return self._log_norm - 0.5 * np.einsum("ij,ij->i", r, r) / self.params.sigmaG_sq

    def exact_log_m(self, p, x, twist):
        return gaussian_m_psi_exact(p, x, self.params, twist, log=True)


def kalman_log_evidence(params):
    """Exact ``log gamma_hat_n(1) = log p(y_0:n)`` by the Kalman recursions."""
    d = params.d
    I = np.eye(d)
    m = params.mu0.copy()
    P = params.sigma0_sq * I
    R = params.sigmaG_sq * I
    total = 0.0
    for p in range(params.n + 1):
        if p > 0:
            m = params.A @ m
            P = params.A @ P @ params.A.T + params.sigmaM_sq * I
        S = P + R
        L = np.linalg.cholesky(S)
        resid = params.y[p] - m
        z = np.linalg.solve(L, resid)
        total += -0.5 * (d * math.log(2 * math.pi) + z @ z) - np.log(np.diag(L)).sum()
        K = np.linalg.solve(S, P).T
        m = m + K @ resid
        P = P - K @ S @ K.T
        P = 0.5 * (P + P.T)
    return float(total)


def _gaussian_integral(mean, var, Q, g, k):
    """``log int N(u; mean_i, var I) exp(u'Qu + g'u + k) du`` for each row."""
    d = g.size
    P = np.eye(d) / var - 2.0 * Q
    try:
        L = np.linalg.cholesky(P)
    except np.linalg.LinAlgError:
        raise ValueError("twist is not integrable against the Gaussian kernel") from None
    h = mean / var + g
    z = np.linalg.solve(L, h.T)
    logdet = 2.0 * np.log(np.diag(L)).sum() + d * math.log(var)
    return (k - 0.5 * logdet + 0.5 * np.einsum("ij,ij->j", z, z)
            - 0.5 * np.einsum("ij,ij->i", mean, mean) / var)


def gaussian_m_psi_exact(p, x, params, psi, log=False):
    """Closed-form ``M_p(psi)(x)`` for an exp-quadratic twist.

    The effective twist ``exp(beta * log_raw + shift)`` is integrated without
    its clip, so ``psi`` must have no floor and must not exceed one.  ``x`` is
    ``None`` at ``p = 0``.
    """
    if psi.floor_log != -np.inf:
        raise ValueError("closed form needs an unfloored twist")
    Q = psi.beta * psi.quadratic_matrix()
    g = psi.beta * psi.b
    k = psi.beta * psi.c + psi.shift
    mean = params.kernel_mean(p, x)
    out = _gaussian_integral(mean, params.kernel_var(p), Q, g, k)
    if p == 0:
        out = float(out[0])
    return out if log else np.exp(out)


class GaussianTiltProposal(Proposal):
    """``M_p^psi`` for an unfloored exp-quadratic ``psi``: a Gaussian kernel.

    Used as the rejection proposal for ``psi`` itself every draw is accepted,
    which samples the twisted kernel exactly however peaked ``psi`` is.
    """

    def __init__(self, params, twist):
        if twist.floor_log != -np.inf:
            raise ValueError("closed form needs an unfloored twist")
        self.params = params
        self.twist = twist
        self._Q = twist.beta * twist.quadratic_matrix()
        self._g = twist.beta * twist.b

    def log_eval(self, x):
        return self.twist.log_eval(x)

    def sample(self, p, x_prev, rng, size=None):
        v = self.params.kernel_var(p)
        mean = self.params.kernel_mean(p, x_prev)
        if p == 0:
            mean = np.repeat(mean, size, axis=0)
        d = self._g.size
        try:
            L = np.linalg.cholesky(np.eye(d) / v - 2.0 * self._Q)
        except np.linalg.LinAlgError:
            raise ValueError("twist is not integrable against the Gaussian kernel") from None
        # precision P = L L', twisted mean P^-1 (m / v + g), covariance P^-1
        h = mean / v + self._g
        mu = np.linalg.solve(L.T, np.linalg.solve(L, h.T)).T
        z = rng.standard_normal(mu.shape)
        return mu + np.linalg.solve(L.T, z.T).T

    def log_mass(self, p, x_prev):
        return gaussian_m_psi_exact(p, x_prev, self.params, self.twist, log=True)


def with_gaussian_proposals(schedule, params):
    """Copy of ``schedule`` sampling every exp-quadratic twist analytically."""
    rho = [GaussianTiltProposal(params, t) if isinstance(t, ExpQuadraticTwist) else r
           for t, r in zip(schedule.psi, schedule.proposal_rho)]
    return TwistSchedule(list(schedule.psi), rho, schedule.n_tilde, schedule.report)


def _potential_coeffs(params, p):
    s = params.sigmaG_sq
    y = params.y[p]
    A = -0.5 / s * np.eye(params.d)
    return A, y / s, -0.5 * y @ y / s - 0.5 * params.d * math.log(2 * math.pi * s)


def _integrated_coeffs(params, Q, g, k):
    """Coefficients of ``x -> log M_{p+1}(exp(u'Qu + g'u + k))(x)``, ``p >= 0``."""
    F = params.A
    v = params.sigmaM_sq
    d = params.d
    P = np.eye(d) / v - 2.0 * Q
    Pinv = np.linalg.inv(P)
    Pinv = 0.5 * (Pinv + Pinv.T)
    A_new = 0.5 * F.T @ Pinv @ F / v**2 - 0.5 * F.T @ F / v
    b_new = F.T @ Pinv @ g / v
    sign, logdet = np.linalg.slogdet(v * P)
    c_new = k - 0.5 * logdet + 0.5 * g @ Pinv @ g
    return A_new, b_new, c_new


def lgssm_optimal_twists(params, n_tilde=1, normalize=True):
    """Analytic ``psi*`` by the backward recursion, as exp-quadratic twists.

    With ``normalize`` each twist is shifted so its supremum is one.
    """
    n = params.n
    coeffs = [None] * (n + 1)
    coeffs[n] = _potential_coeffs(params, n)
    for p in range(n - 1, -1, -1):
        Ai, bi, ci = _integrated_coeffs(params, *coeffs[p + 1])
        Ag, bg, cg = _potential_coeffs(params, p)
        coeffs[p] = (Ai + Ag, bi + bg, ci + cg)
    psi = []
    for A, b, c in coeffs:
        t = ExpQuadraticTwist(A, b, c)
        psi.append(t.normalized() if normalize else t)
    return TwistSchedule(psi, n_tilde=n_tilde)
