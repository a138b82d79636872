"""Exact finite-state Feynman-Kac computations.

Everything here is dense linear algebra on ``K``-state models and serves as
ground truth: marginal recursions, exactly twisted models, acceptance-rate
identities, the ``Q_{p,n}`` semigroup and asymptotic variances of (random
weight) particle filters.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import FeynmanKacModel


@dataclass
class DiscreteFK:
    """``m0`` (K,), ``M`` list of ``n`` row-stochastic (K, K), ``G`` list of ``n+1`` (K,)."""

    m0: np.ndarray
    M: list
    G: list

    def __post_init__(self):
        self.m0 = np.asarray(self.m0, dtype=float)
        self.M = [np.asarray(m, dtype=float) for m in self.M]
        self.G = [np.asarray(g, dtype=float) for g in self.G]
        K = self.m0.size
        if len(self.G) != len(self.M) + 1:
            raise ValueError("need n kernels and n+1 potentials")
        if abs(self.m0.sum() - 1.0) > 1e-12 or np.any(self.m0 < 0):
            raise ValueError("m0 must be a probability vector")
        for m in self.M:
            if m.shape != (K, K) or np.any(m < 0) or np.max(np.abs(m.sum(1) - 1.0)) > 1e-12:
                raise ValueError("kernels must be K x K row-stochastic matrices")
        for g in self.G:
            if g.shape != (K,) or np.any(g <= 0):
                raise ValueError("potentials must be positive K-vectors")

    @property
    def K(self):
        return self.m0.size

    @property
    def n(self):
        return len(self.M)

    def kernel(self, p):
        """``M_p`` as a matrix; ``M_0`` is returned as a single row."""
        return self.m0[None, :] if p == 0 else self.M[p - 1]

    def as_model(self, random_weights=None):
        return DiscreteModel(self, random_weights)

    @classmethod
    def random(cls, rng, K, n, g_range=(0.2, 2.0)):
        def stoch(shape):
            a = rng.gamma(1.0, size=shape) + 1e-3
            return a / a.sum(-1, keepdims=True)

        return cls(stoch(K), [stoch((K, K)) for _ in range(n)],
                   [rng.uniform(*g_range, size=K) for _ in range(n + 1)])


@dataclass
class RandomWeightSpec:
    """Two-point random potentials ``G (1 - delta)`` / ``G (1 + delta)``.

    Potentials at times ``0..n-1`` are randomised, so ``s_p = 1 + delta^2``
    there and ``s_n = 1``.
    """

    delta: float

    def s(self, model):
        K, n = model.K, model.n
        out = [np.full(K, 1.0 + self.delta**2) for _ in range(n)]
        out.append(np.ones(K))
        return out

    def log_factor(self, p, n, size, rng):
        if p == n or self.delta == 0:
            return np.zeros(size)
        sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
        return np.log1p(sign * self.delta)


def _sample_rows(P, rows, rng):
    cdf = np.cumsum(P[rows], axis=1)
    u = rng.random(len(rows))[:, None] * cdf[:, -1:]
    return np.minimum((u >= cdf).sum(1), P.shape[1] - 1)


class DiscreteModel(FeynmanKacModel):
    """Sampling interface to a :class:`DiscreteFK`; states are integer labels."""

    def __init__(self, fk, random_weights=None):
        self.fk = fk
        self.n = fk.n
        self.state_dim = 1
        self.random_weights = random_weights

    def sample_initial(self, size, rng):
        return _sample_rows(self.fk.m0[None, :], np.zeros(size, dtype=np.intp), rng)

    def sample_kernel(self, p, x, rng):
        return _sample_rows(self.fk.M[p - 1], np.asarray(x, dtype=np.intp), rng)

    def log_potential(self, p, x, rng):
        out = np.log(self.fk.G[p][np.asarray(x, dtype=np.intp)])
        if self.random_weights is not None:
            out = out + self.random_weights.log_factor(p, self.n, len(out), rng)
        return out

    def exact_log_m(self, p, x, twist):
        """``log M_p(psi)(x)`` for a twist on the finite state space."""
        vals = np.exp(twist.log_eval(np.arange(self.fk.K)))
        if x is None:
            return float(np.log(self.fk.m0 @ vals))
        return np.log(self.fk.M[p - 1] @ vals)[np.asarray(x, dtype=np.intp)]


@dataclass
class Marginals:
    gamma: list
    eta: list
    gamma_hat: list
    eta_hat: list

    @property
    def Z(self):
        """Terminal updated normalising constant ``gamma_hat_n(1)``."""
        return float(self.gamma_hat[-1].sum())


def exact_marginals(model):
    """Predictive and updated marginal measures by forward recursion."""
    gamma, gamma_hat = [model.m0.copy()], []
    for p in range(model.n + 1):
        gamma_hat.append(gamma[p] * model.G[p])
        if p < model.n:
            gamma.append(gamma_hat[p] @ model.M[p])
    return Marginals(gamma, [g / g.sum() for g in gamma],
                     gamma_hat, [g / g.sum() for g in gamma_hat])


def _m_of(model, p, f):
    """``M_p(f)`` as a K-vector, or the scalar ``M_0(f)`` at ``p = 0``."""
    return float(model.m0 @ f) if p == 0 else model.M[p - 1] @ f


def exact_twisted_model(model, psi):
    """The exactly ``psi``-twisted :class:`DiscreteFK`."""
    psi = [np.asarray(v, dtype=float) for v in psi]
    if len(psi) != model.n + 1 or any(np.any(v <= 0) for v in psi):
        raise ValueError("need n+1 positive twisting vectors")
    n = model.n
    m0 = model.m0 * psi[0] / _m_of(model, 0, psi[0])
    M = [model.M[p - 1] * psi[p][None, :] / _m_of(model, p, psi[p])[:, None]
         for p in range(1, n + 1)]
    G = []
    for p in range(n + 1):
        g = model.G[p] / psi[p]
        if p < n:
            g = g * _m_of(model, p + 1, psi[p + 1])
        if p == 0:
            g = g * _m_of(model, 0, psi[0])
        G.append(g)
    # renormalise rows against roundoff
    M = [m / m.sum(1, keepdims=True) for m in M]
    return DiscreteFK(m0 / m0.sum(), M, G)


def optimal_twists(model):
    """``psi*_n = G_n`` and ``psi*_p = G_p M_{p+1}(psi*_{p+1})``."""
    n = model.n
    psi = [None] * (n + 1)
    psi[n] = model.G[n].copy()
    for p in range(n - 1, -1, -1):
        psi[p] = model.G[p] * (model.M[p] @ psi[p + 1])
    return psi


def exact_acceptance_rates(model, psi, omega, rho, tol=1e-12):
    """Acceptance rates of the ``omega`` sampler with proposal ``M^rho``.

    Returns ``(direct, via_psi)``: the rates computed in the exact
    ``omega``-twisted model, and the same rates expressed through the
    ``psi``-twisted model's updated distributions.
    """
    omega = [np.asarray(v, dtype=float) for v in omega]
    rho = [np.asarray(v, dtype=float) for v in rho]
    psi = [np.asarray(v, dtype=float) for v in psi]
    for w, r in zip(omega, rho):
        if np.max(w / r) > 1.0 + tol:
            raise ValueError("omega / rho must not exceed 1")
    n = model.n
    direct = np.empty(n + 1)
    via_psi = np.empty(n + 1)

    tw = exact_marginals(exact_twisted_model(model, omega))
    tp = exact_marginals(exact_twisted_model(model, psi))
    for p in range(n + 1):
        if p == 0:
            m_rho = model.m0 * rho[0] / (model.m0 @ rho[0])
            direct[0] = m_rho @ (omega[0] / rho[0])
            via_psi[0] = (model.m0 @ omega[0]) / (model.m0 @ rho[0])
            continue
        Mp = model.M[p - 1]
        m_rho = Mp * rho[p][None, :] / (Mp @ rho[p])[:, None]
        direct[p] = tw.eta_hat[p - 1] @ (m_rho @ (omega[p] / rho[p]))
        mw, mp, mr = Mp @ omega[p], Mp @ psi[p], Mp @ rho[p]
        eta = tp.eta_hat[p - 1]
        via_psi[p] = (eta @ (mw**2 / (mp * mr))) / (eta @ (mw / mp))
    return direct, via_psi


def exact_q_kernels(model):
    """``Q_p = diag(G_{p-1}) M_p`` (index ``p``) and ``Q_{p,n}`` (index ``p``)."""
    n = model.n
    Q = [None] + [np.diag(model.G[p - 1]) @ model.M[p - 1] for p in range(1, n + 1)]
    Qpn = [None] * (n + 1)
    Qpn[n] = np.eye(model.K)
    for p in range(n - 1, -1, -1):
        Qpn[p] = Q[p + 1] @ Qpn[p + 1]
    return Q, Qpn


def asymptotic_variance(model, phi, s=None):
    """Asymptotic variance of ``gamma_n^N(phi) / gamma_n(1)``.

    ``s`` is a list of ``n+1`` relative second-moment vectors of the random
    potentials (``None``: exact potentials, ``s_p == 1``).
    """
    phi = np.asarray(phi, dtype=float)
    marg = exact_marginals(model)
    _, Qpn = exact_q_kernels(model)
    g_n1 = marg.gamma[-1].sum()
    eta_phi = marg.eta[-1] @ phi
    total = 0.0
    for p in range(model.n + 1):
        sp = np.ones(model.K) if s is None else np.asarray(s[p], dtype=float)
        qphi = Qpn[p] @ phi
        total += marg.gamma[p].sum() * (marg.gamma[p] @ (sp * qphi**2)) / g_n1**2 - eta_phi**2
    return float(total)

