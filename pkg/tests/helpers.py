"""Independent brute-force oracles and small fixtures shared by the tests."""

import itertools

import numpy as np

from twistedsmc.core import FeynmanKacModel


def enumerate_z(m0, M, G):
    """Normalising constant by summing over every path of a finite-state model."""
    K, n = len(m0), len(M)
    total = 0.0
    for path in itertools.product(range(K), repeat=n + 1):
        w = m0[path[0]] * G[0][path[0]]
        for p in range(1, n + 1):
            w *= M[p - 1][path[p - 1]][path[p]] * G[p][path[p]]
        total += w
    return total


def enumerate_predictive(m0, M, G, p):
    """Unnormalised predictive measure at time p by path enumeration."""
    K = len(m0)
    out = np.zeros(K)
    for path in itertools.product(range(K), repeat=p + 1):
        w = m0[path[0]]
        for t in range(1, p + 1):
            w *= G[t - 1][path[t - 1]] * M[t - 1][path[t - 1]][path[t]]
        out[path[-1]] += w
    return out


class GaussianWalk(FeynmanKacModel):
    """1-d model with ``M_0 = N(0, 1)`` and ``M_p(x, .) = N(x, 1)``."""

    def __init__(self, n=0, y=None):
        self.n = n
        self.state_dim = 1
        self.y = np.zeros(n + 1) if y is None else np.asarray(y, dtype=float)

    def sample_initial(self, size, rng):
        return rng.standard_normal((size, 1))

    def sample_kernel(self, p, x, rng):
        return x + rng.standard_normal(x.shape)

    def log_potential(self, p, x, rng):
        return -0.5 * (np.ravel(x) - self.y[p]) ** 2


class StdNormalKernel(GaussianWalk):
    """``M_p(x, .) = N(0, 1)`` whatever ``x``."""

    def sample_kernel(self, p, x, rng):
        return rng.standard_normal(x.shape)


def mean_se(v):
    v = np.asarray(v, dtype=float)
    return v.mean(), v.std(ddof=1) / np.sqrt(v.size)
