"""Property checks on random finite-state models, run by ``oracle-check``."""

from __future__ import annotations

import itertools
from dataclasses import dataclass

import numpy as np

from ..oracle import (
    DiscreteFK,
    _m_of,
    asymptotic_variance,
    exact_acceptance_rates,
    exact_marginals,
    exact_q_kernels,
    exact_twisted_model,
    optimal_twists,
)


@dataclass
class CheckResult:
    name: str
    passed: bool
    detail: str


def _enumerate_z(fk):
    total = 0.0
    for path in itertools.product(range(fk.K), repeat=fk.n + 1):
        w = fk.m0[path[0]] * fk.G[0][path[0]]
        for p in range(1, fk.n + 1):
            w *= fk.M[p - 1][path[p - 1], path[p]] * fk.G[p][path[p]]
        total += w
    return total


def _random_case(rng, max_k=5, max_n=6):
    K = int(rng.integers(2, max_k + 1))
    n = int(rng.integers(1, max_n + 1))
    fk = DiscreteFK.random(rng, K, n)
    psi = [rng.uniform(0.1, 1.0, K) for _ in range(n + 1)]
    return fk, psi


def _rel(a, b):
    a, b = np.asarray(a, dtype=float), np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(np.abs(b), 1e-300)))


def check_enumeration(rng, cases):
    worst = 0.0
    for _ in range(cases):
        fk = DiscreteFK.random(rng, int(rng.integers(2, 4)), int(rng.integers(0, 5)))
        worst = max(worst, _rel(exact_marginals(fk).Z, _enumerate_z(fk)))
    return CheckResult("recursion matches path enumeration", worst < 1e-12, f"max rel err {worst:.2e}")


def check_twisted_invariance(rng, cases):
    worst = 0.0
    for _ in range(cases):
        fk, psi = _random_case(rng)
        base, tw = exact_marginals(fk), exact_marginals(exact_twisted_model(fk, psi))
        worst = max(worst, _rel(tw.Z, base.Z))
        for p in range(1, fk.n + 1):
            worst = max(worst, _rel(tw.gamma[p], base.gamma[p] * psi[p]))
        for p in range(fk.n):
            worst = max(worst, _rel(tw.gamma_hat[p], base.gamma_hat[p] * _m_of(fk, p + 1, psi[p + 1])))
    return CheckResult("twisted marginals and Z", worst < 1e-12, f"max rel err {worst:.2e}")


def check_factorisation(rng, cases):
    worst = 0.0
    for _ in range(cases):
        fk, psi = _random_case(rng)
        tw = exact_twisted_model(fk, psi)
        for p in range(1, fk.n + 1):
            phi = rng.uniform(0.1, 2.0, fk.K)
            lhs = fk.M[p - 1] @ (psi[p] * phi)
            rhs = (fk.M[p - 1] @ psi[p]) * (tw.M[p - 1] @ phi)
            worst = max(worst, _rel(lhs, rhs))
    return CheckResult("M(psi phi) = M(psi) M^psi(phi)", worst < 1e-12, f"max rel err {worst:.2e}")


def check_composition(rng, cases):
    worst = 0.0
    for _ in range(cases):
        fk, psi = _random_case(rng)
        phi = [rng.uniform(0.1, 1.0, fk.K) for _ in range(fk.n + 1)]
        a = exact_twisted_model(exact_twisted_model(fk, psi), phi)
        b = exact_twisted_model(fk, [x * y for x, y in zip(psi, phi)])
        worst = max(worst, _rel(a.m0, b.m0))
        for ma, mb in zip(a.M, b.M):
            worst = max(worst, _rel(ma, mb))
        for ga, gb in zip(a.G, b.G):
            worst = max(worst, _rel(ga, gb))
    return CheckResult("twist composition", worst < 1e-12, f"max rel err {worst:.2e}")


def check_optimal(rng, cases):
    worst = 0.0
    for _ in range(cases):
        fk, _ = _random_case(rng)
        tw = exact_twisted_model(fk, optimal_twists(fk))
        Z = exact_marginals(fk).Z
        worst = max(worst, _rel(tw.G[0], np.full(fk.K, Z)))
        for g in tw.G[1:]:
            worst = max(worst, _rel(g, np.ones(fk.K)))
    return CheckResult("optimal twists give constant potentials", worst < 1e-12,
                       f"max rel err {worst:.2e}")


def check_acceptance_identity(rng, cases):
    worst = 0.0
    for _ in range(cases):
        fk, psi = _random_case(rng)
        omega = [rng.uniform(0.05, 1.0, fk.K) for _ in range(fk.n + 1)]
        rho = []
        for w in omega:
            r = rng.uniform(0.05, 1.0, fk.K)
            rho.append(r * np.max(w / r))
        direct, via = exact_acceptance_rates(fk, psi, omega, rho)
        worst = max(worst, float(np.max(np.abs(direct - via))))
    return CheckResult("acceptance rate identity", worst < 1e-12, f"max abs err {worst:.2e}")


def check_semigroup(rng, cases):
    worst = 0.0
    for _ in range(cases):
        fk, _ = _random_case(rng)
        marg = exact_marginals(fk)
        _, Qpn = exact_q_kernels(fk)
        target = marg.gamma[-1].sum()
        for p in range(fk.n + 1):
            worst = max(worst, _rel(marg.gamma[p] @ (Qpn[p] @ np.ones(fk.K)), target))
    return CheckResult("gamma_p(Q_pn 1) = gamma_n(1)", worst < 1e-12, f"max rel err {worst:.2e}")


def check_variance_bounds(rng, cases):
    bad = 0
    for _ in range(cases):
        fk, _ = _random_case(rng)
        C = float(rng.uniform(0.0, 2.0))
        s = [rng.uniform(1.0, 1.0 + C, fk.K) for _ in range(fk.n)] + [np.ones(fk.K)]
        phi = rng.normal(size=fk.K)
        phi = phi - exact_marginals(fk).eta[-1] @ phi
        ok1 = asymptotic_variance(fk, phi, s) <= (C + 1) * asymptotic_variance(fk, phi) * (1 + 1e-12) + 1e-15
        one = np.ones(fk.K)
        ok2 = (asymptotic_variance(fk, one, s)
               <= (C + 1) * asymptotic_variance(fk, one) + fk.n * C + 1e-12)
        bad += not (ok1 and ok2)
    return CheckResult("random-weight variance bounds", bad == 0, f"{bad} of {cases} cases violate")


ALL_CHECKS = (check_enumeration, check_twisted_invariance, check_factorisation,
              check_composition, check_optimal, check_acceptance_identity, check_semigroup,
              check_variance_bounds)


def run_checks(seed=0, cases=100):
    rng = np.random.default_rng(seed)
    return [chk(rng, cases) for chk in ALL_CHECKS]
