import numpy as np
import pytest

from helpers import enumerate_predictive, enumerate_z, mean_se
from twistedsmc import ResamplingPolicy, run_filter
from twistedsmc.harness.checks import run_checks
from twistedsmc.oracle import (
    DiscreteFK,
    RandomWeightSpec,
    asymptotic_variance,
    exact_acceptance_rates,
    exact_marginals,
    exact_q_kernels,
    exact_twisted_model,
    optimal_twists,
)


def _fuzz(seed, cases=100, max_k=5, max_n=6):
    rng = np.random.default_rng(seed)
    for _ in range(cases):
        K = int(rng.integers(2, max_k + 1))
        n = int(rng.integers(1, max_n + 1))
        yield rng, DiscreteFK.random(rng, K, n)


def test_validation():
    with pytest.raises(ValueError):
        DiscreteFK([0.5, 0.6], [], [[1.0, 1.0]])
    with pytest.raises(ValueError):
        DiscreteFK([0.5, 0.5], [[[0.5, 0.4], [0.5, 0.5]]], [[1.0, 1.0]] * 2)
    with pytest.raises(ValueError):
        DiscreteFK([0.5, 0.5], [], [[1.0, 0.0]])


def test_n0_and_unit_potentials():
    fk = DiscreteFK([0.2, 0.8], [], [[3.0, 0.5]])
    assert exact_marginals(fk).Z == pytest.approx(0.2 * 3 + 0.8 * 0.5, rel=1e-15)
    fk = DiscreteFK.random(np.random.default_rng(0), 3, 4)
    fk.G = [np.ones(3)] * 5
    assert exact_marginals(fk).Z == pytest.approx(1.0, rel=1e-14)


def test_recursion_matches_enumeration():
    for _, fk in _fuzz(1, cases=20, max_k=3, max_n=4):
        assert exact_marginals(fk).Z == pytest.approx(enumerate_z(fk.m0, fk.M, fk.G), rel=1e-13)
        for p in range(fk.n + 1):
            np.testing.assert_allclose(exact_marginals(fk).gamma[p],
                                       enumerate_predictive(fk.m0, fk.M, fk.G, p), rtol=1e-13)


def test_unit_twist_is_identity():
    fk = DiscreteFK.random(np.random.default_rng(2), 3, 3)
    tw = exact_twisted_model(fk, [np.ones(3)] * 4)
    np.testing.assert_allclose(tw.m0, fk.m0, rtol=1e-15)
    for a, b in zip(tw.M, fk.M):
        np.testing.assert_allclose(a, b, rtol=1e-15)
    for a, b in zip(tw.G, fk.G):
        np.testing.assert_allclose(a, b, rtol=1e-15)


def test_twisted_marginals():
    for rng, fk in _fuzz(3, cases=50):
        psi = [rng.uniform(0.1, 3.0, fk.K) for _ in range(fk.n + 1)]
        base = exact_marginals(fk)
        tw = exact_marginals(exact_twisted_model(fk, psi))
        assert tw.Z == pytest.approx(base.Z, rel=1e-12)
        for p in range(1, fk.n + 1):
            np.testing.assert_allclose(tw.gamma[p], base.gamma[p] * psi[p], rtol=1e-12)
        for p in range(fk.n):
            np.testing.assert_allclose(tw.gamma_hat[p], base.gamma_hat[p] * (fk.M[p] @ psi[p + 1]),
                                       rtol=1e-12)


def test_factorisation_and_composition():
    for rng, fk in _fuzz(4, cases=50):
        psi = [rng.uniform(0.1, 3.0, fk.K) for _ in range(fk.n + 1)]
        phi = [rng.uniform(0.1, 3.0, fk.K) for _ in range(fk.n + 1)]
        tw = exact_twisted_model(fk, psi)
        for p in range(1, fk.n + 1):
            np.testing.assert_allclose(fk.M[p - 1] @ (psi[p] * phi[p]),
                                       (fk.M[p - 1] @ psi[p]) * (tw.M[p - 1] @ phi[p]), rtol=1e-12)
        a = exact_twisted_model(tw, phi)
        b = exact_twisted_model(fk, [x * y for x, y in zip(psi, phi)])
        np.testing.assert_allclose(a.m0, b.m0, rtol=1e-12)
        for ma, mb in zip(a.M, b.M):
            np.testing.assert_allclose(ma, mb, rtol=1e-12)
        for ga, gb in zip(a.G, b.G):
            np.testing.assert_allclose(ga, gb, rtol=1e-12)


def test_acceptance_untwisted_past_unit_proposal():
    rng = np.random.default_rng(5)
    fk = DiscreteFK.random(rng, 4, 3)
    omega = [rng.uniform(0.1, 1.0, 4) for _ in range(4)]
    ones = [np.ones(4)] * 4
    direct, via = exact_acceptance_rates(fk, ones, omega, ones)
    eta_hat = exact_marginals(fk).eta_hat
    for p in range(1, 4):
        mw = fk.M[p - 1] @ omega[p]
        assert direct[p] == pytest.approx((eta_hat[p - 1] @ mw**2) / (eta_hat[p - 1] @ mw),
                                          abs=1e-12)
    np.testing.assert_allclose(direct, via, atol=1e-12)
    assert direct[0] == pytest.approx(fk.m0 @ omega[0], abs=1e-15)


def test_acceptance_identity_fuzz():
    for rng, fk in _fuzz(6):
        psi = [rng.uniform(0.05, 1.0, fk.K) for _ in range(fk.n + 1)]
        omega = [rng.uniform(0.05, 1.0, fk.K) for _ in range(fk.n + 1)]
        rho = []
        for w in omega:
            r = rng.uniform(0.05, 1.0, fk.K)
            rho.append(r * np.max(w / r))
        direct, via = exact_acceptance_rates(fk, psi, omega, rho)
        np.testing.assert_allclose(direct, via, atol=1e-12, rtol=0)
        assert np.all((direct > 0) & (direct <= 1 + 1e-12))
        same, _ = exact_acceptance_rates(fk, omega, omega, omega)
        np.testing.assert_allclose(same, 1.0, atol=1e-12)


def test_acceptance_normalisation_violation():
    fk = DiscreteFK.random(np.random.default_rng(0), 2, 1)
    with pytest.raises(ValueError):
        exact_acceptance_rates(fk, [np.ones(2)] * 2, [np.ones(2)] * 2, [np.full(2, 0.5)] * 2)


def test_q_kernels():
    fk = DiscreteFK.random(np.random.default_rng(7), 3, 1)
    Q, Qpn = exact_q_kernels(fk)
    np.testing.assert_allclose(Qpn[0], np.diag(fk.G[0]) @ fk.M[0], rtol=1e-15)
    np.testing.assert_array_equal(Qpn[1], np.eye(3))
    for _, fk in _fuzz(8, cases=20):
        marg = exact_marginals(fk)
        _, Qpn = exact_q_kernels(fk)
        for p in range(fk.n + 1):
            assert marg.gamma[p] @ (Qpn[p] @ np.ones(fk.K)) == pytest.approx(marg.gamma[-1].sum(),
                                                                              rel=1e-12)


def test_variance_unit_s_matches_plain():
    fk = DiscreteFK.random(np.random.default_rng(9), 3, 4)
    phi = np.array([1.0, -2.0, 0.5])
    s1 = [np.ones(3)] * 5
    assert asymptotic_variance(fk, phi, s1) == pytest.approx(asymptotic_variance(fk, phi), rel=1e-15)


def test_variance_bounds_fuzz():
    for rng, fk in _fuzz(10):
        C = float(rng.uniform(0, 3))
        s = [rng.uniform(1, 1 + C, fk.K) for _ in range(fk.n)] + [np.ones(fk.K)]
        phi = rng.normal(size=fk.K)
        phi -= exact_marginals(fk).eta[-1] @ phi
        assert asymptotic_variance(fk, phi, s) <= (C + 1) * asymptotic_variance(fk, phi) + 1e-12
        one = np.ones(fk.K)
        assert (asymptotic_variance(fk, one, s)
                <= (C + 1) * asymptotic_variance(fk, one) + fk.n * C + 1e-12)


def test_random_weight_spec():
    fk = DiscreteFK.random(np.random.default_rng(0), 2, 3)
    s = RandomWeightSpec(0.5).s(fk)
    np.testing.assert_allclose(s[0], 1.25)
    np.testing.assert_array_equal(s[-1], 1.0)
    f = RandomWeightSpec(0.5).log_factor(0, 3, 10**5, np.random.default_rng(1))
    assert set(np.round(np.exp(f), 12)) == {0.5, 1.5}
    assert np.mean(np.exp(f)) == pytest.approx(1.0, abs=0.01)


def test_random_weight_marginals_unbiased():
    rng = np.random.default_rng(11)
    fk = DiscreteFK.random(rng, 2, 2)
    model = fk.as_model(RandomWeightSpec(0.5))
    f = np.array([0.3, 2.0])
    p = 2
    target = exact_marginals(fk).gamma[p] @ f
    policy = ResamplingPolicy("always")
    vals = np.empty(10**5)
    for i in range(vals.size):
        run = run_filter(model, 4, policy, rng)
        vals[i] = np.exp(run.log_z_predictive(p)) * (run.pred_weights[p] @ f[run.states[p]])
    m, se = mean_se(vals)
    assert abs(m - target) <= 4 * se


def test_optimal_twist_recursion():
    fk = DiscreteFK.random(np.random.default_rng(12), 3, 3)
    psi = optimal_twists(fk)
    np.testing.assert_array_equal(psi[-1], fk.G[-1])
    for p in range(3):
        np.testing.assert_allclose(psi[p], fk.G[p] * (fk.M[p] @ psi[p + 1]), rtol=1e-15)


def test_oracle_check_suite_passes():
    assert all(r.passed for r in run_checks(seed=3, cases=20))
