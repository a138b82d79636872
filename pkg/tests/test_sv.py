import math

import numpy as np
import pytest
from scipy import integrate, stats

from helpers import mean_se
from twistedsmc import ExpQuadraticTwist, ResamplingPolicy, TwistSchedule, build_twisted_model, run_filter
from twistedsmc.learning import DrawBatch, acceptance_from_logs, maximize_partial_twist
from twistedsmc.models import (
    GENERATING,
    TESTING,
    SvModel,
    SvParams,
    SvTiltFamily,
    SvTiltProposal,
    SvTwist,
    TiltError,
    cpg_log_normalizer,
    cpg_mean,
    cpg_sample,
    sv_potential,
    sv_simulate,
    sv_tilted_kernel,
)
from twistedsmc.twisting import (
    PotentialTwist,
    _estimate_m_psi_via_proposal,
    estimate_m_psi,
    rejection_sample,
    schedule_from_toml,
    schedule_to_toml,
)

P = SvParams(**TESTING)


def test_params():
    with pytest.raises(ValueError):
        SvParams(0.001, 0.5, 0.1)
    with pytest.raises(ValueError):
        SvParams(0.1, -0.5, 0.1)
    assert P.c == pytest.approx(2 * 0.45 / (0.11**2 * (1 - math.exp(-0.45))), rel=1e-15)
    assert P.q == pytest.approx(2 * 0.09 / 0.11**2 - 1, rel=1e-15)


def test_cpg_mapping_reproduces_cir_moments():
    x = np.array([0.05, 0.2, 0.7])
    np.testing.assert_allclose(cpg_mean(P.shape, P.u(x), P.c), P.conditional_mean(x), rtol=1e-12)
    # CIR conditional variance x e^-k (1-e^-k) s^2/k + th s^2 (1-e^-k)^2 / (2k)
    k, th, s2 = P.phi2, P.phi1 / P.phi2, P.phi3**2
    e = math.exp(-k)
    var = x * s2 * e * (1 - e) / k + th * s2 * (1 - e) ** 2 / (2 * k)
    np.testing.assert_allclose(P.conditional_var(x), var, rtol=1e-12)


def test_cir_conditional_mean_monte_carlo():
    x = 0.3
    draws = cpg_sample(P.shape, P.u(x), P.c, 0.0, np.random.default_rng(0), size=10**6)
    m, se = mean_se(draws)
    assert abs(m - P.conditional_mean(x)) <= 3 * se
    v = draws.var()
    se_v = math.sqrt(np.var((draws - m) ** 2) / draws.size)
    assert abs(v - P.conditional_var(x)) <= 3 * se_v


def test_strong_mean_reversion_forgets_state():
    Q = SvParams(0.09 * 40, 0.45 * 40, 0.11)
    a = cpg_sample(Q.shape, Q.u(0.01), Q.c, 0.0, np.random.default_rng(1), size=20000)
    b = cpg_sample(Q.shape, Q.u(5.0), Q.c, 0.0, np.random.default_rng(2), size=20000)
    assert stats.ks_2samp(a, b).pvalue > 0.01


@pytest.mark.parametrize("b", [0.0, 60.0, -80.0])
def test_tilted_cpg_mean(b):
    alpha, eta, rate = 3.5, 2.0, 100.0
    draws = cpg_sample(alpha, eta, rate, b, np.random.default_rng(3), size=10**6)
    m, se = mean_se(draws)
    assert abs(m - cpg_mean(alpha, eta, rate, b)) <= 3 * se
    if b == 0.0:
        assert cpg_mean(alpha, eta, rate) == pytest.approx((alpha + eta) / rate)


@pytest.mark.parametrize("b", [30.0, -40.0])
def test_tilted_cpg_normalizer(b):
    alpha, eta, rate = 3.5, 2.0, 100.0
    draws = cpg_sample(alpha, eta, rate, 0.0, np.random.default_rng(4), size=10**6)
    m, se = mean_se(np.exp(-b * draws))
    assert abs(m - math.exp(cpg_log_normalizer(alpha, eta, rate, b))) <= 3 * se


@pytest.mark.parametrize("frac", [0.3, -0.2, -0.4])
def test_tilted_cpg_normalizer_quadrature(frac):
    # Poisson mixture of gamma densities integrated against exp(-b y)
    alpha, eta, rate = P.shape, float(P.u(0.3)), P.c
    b = frac * rate
    ks = np.arange(400)
    pk = stats.poisson.pmf(ks, eta)
    f = lambda y: np.sum(pk * stats.gamma.pdf(y, alpha + ks, scale=1 / rate)) * np.exp(-b * y)
    val, _ = integrate.quad(f, 0, 5, limit=1000, points=[0.2, 0.5, 1, 2])
    assert math.log(val) == pytest.approx(cpg_log_normalizer(alpha, eta, rate, b), abs=1e-9)


def test_tilt_admissibility():
    with pytest.raises(TiltError):
        cpg_sample(1.0, 1.0, 10.0, -10.0, 0)
    with pytest.raises(TiltError):
        cpg_log_normalizer(1.0, 1.0, 10.0, -12.0)


def test_tilted_kernel_reweights_to_untilted():
    alpha, eta, rate, b = 3.5, 2.0, 100.0, -50.0
    rng = np.random.default_rng(5)
    n = 200000
    tilted = cpg_sample(alpha, eta, rate, b, rng, size=n)
    plain = cpg_sample(alpha, eta, rate, 0.0, rng, size=n)
    w = np.exp(b * tilted + cpg_log_normalizer(alpha, eta, rate, b))
    edges = np.quantile(plain, np.linspace(0, 1, 21))
    edges[0], edges[-1] = 0.0, np.inf
    stat = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        iw = w * ((tilted >= lo) & (tilted < hi))
        ip = ((plain >= lo) & (plain < hi)).astype(float)
        stat += (iw.mean() - ip.mean()) ** 2 / (iw.var() / n + ip.var() / n)
    # 20 bins with edges fitted on the plain sample: conservative with 20 dof
    assert stats.chi2.sf(stat, 20) > 0.01


def test_potential():
    x = 0.2
    assert sv_potential(0.0, x, 0.25) == pytest.approx((2 * math.pi * 0.25**2 * x) ** -0.5)
    assert sv_potential(0.3, x, 0.25) == pytest.approx(sv_potential(-0.3, x, 0.25))
    total, _ = integrate.quad(lambda r: sv_potential(r, x, 0.25), -np.inf, np.inf)
    assert total == pytest.approx(1.0, abs=1e-9)
    with pytest.raises(ValueError):
        sv_potential(0.1, -1.0, 0.25)


def test_simulate():
    x, r = sv_simulate(SvParams(**GENERATING), 500, rng=1)
    assert x.shape == (501,) and r.shape == (500,)
    assert np.all(x > 0)
    with pytest.raises(ValueError):
        sv_simulate(P, 5, x0=-1.0)
    a = sv_simulate(P, 50, 0.2, rng=7)
    b = sv_simulate(P, 50, 0.2, rng=7)
    np.testing.assert_array_equal(a[1], b[1])


def test_model_potentials():
    m = SvModel(P.with_returns([0.1, -0.2]))
    x = np.array([[0.1], [0.3]])
    np.testing.assert_array_equal(m.log_potential(0, x, None), 0.0)
    np.testing.assert_allclose(np.exp(m.log_potential(2, x, None)), sv_potential(-0.2, x.ravel(), 0.25))


def test_saturated_twist_accepts_immediately():
    t = SvTwist(0.0, 0.0, 0.0, b_l=-30.0)
    x, trials = sv_tilted_kernel(P, np.full(1000, 0.2), t, rng=0)
    assert np.all(trials == 1)
    assert x.shape == (1000, 1)


def test_zero_tilt_is_plain_rejection():
    t = SvTwist(-200.0, 60.0, -4.5, b_l=0.0, floor_log=math.log(1e-3))
    m = SvModel(P.with_returns([0.0]))
    x_prev = np.full((20000, 1), 0.2)
    a, _ = sv_tilted_kernel(P, x_prev, t, rng=1)
    b, _ = rejection_sample(1, x_prev, m, t, None, rng=2)
    assert stats.ks_2samp(a.ravel(), b.ravel()).pvalue > 0.01


def test_tilted_rejection_exact_law():
    # sampling M^omega through the tilted proposal agrees with plain rejection
    t = SvTwist(-300.0, 100.0, -8.3, b_l=-40.0, floor_log=math.log(1e-3))
    m = SvModel(P.with_returns([0.0]))
    x_prev = np.full((20000, 1), 0.25)
    a, ta = sv_tilted_kernel(P, x_prev, t, rng=3)
    b, tb = rejection_sample(1, x_prev, m, t, None, rng=4, max_trials=10**6)
    assert stats.ks_2samp(a.ravel(), b.ravel()).pvalue > 0.01


def _batch(rng, n_parents=100, k=5):
    parents = rng.gamma(P.stationary_shape, 1 / P.stationary_rate, size=(n_parents, 1))
    pts = cpg_sample(P.shape, P.u(np.repeat(parents, k, axis=0)), P.c, 0.0, rng)
    return DrawBatch(pts, np.full(n_parents, 1 / n_parents), k)


def test_partial_family_grid_optimum():
    rng = np.random.default_rng(6)
    batch = _batch(rng)
    fitted = ExpQuadraticTwist(-400.0, [120.0], 0.0)
    fam = SvTiltFamily(P, 3, fitted, 0.8, batch.points, math.log(2e-3))
    lp = np.zeros(batch.points.shape[0])
    theta, est = maximize_partial_twist(batch, lp, fam)
    shape = (100, 5)

    def alpha(th):
        lo, lr = fam.evaluate(th, batch.points)
        return acceptance_from_logs(lp.reshape(shape), lo.reshape(shape), batch.weights,
                                    lr.reshape(shape)).alpha

    fine = max(alpha(th) for th in np.linspace(*fam.bounds, 2001))
    assert est.alpha >= fine - 1e-3
    assert est.alpha >= alpha(0.0)


def test_family_twist_ratio_bounded():
    rng = np.random.default_rng(7)
    batch = _batch(rng)
    fam = SvTiltFamily(P, 2, ExpQuadraticTwist(300.0, [-50.0], 1.0), 1.0, batch.points, -6.0)
    t, prop = fam.make(-20.0)
    x = np.linspace(1e-3, 1.0, 500)
    assert np.all(t.log_eval(x) - prop.log_eval(x) <= 1e-12)
    assert np.all(t.log_eval(x) - prop.log_eval(x) >= -6.0 - 1e-9)


def test_proposal_mass_estimator_agrees_with_base():
    rng = np.random.default_rng(8)
    m = SvModel(P.with_returns([0.1, 0.0]))
    t = SvTwist(-250.0, 80.0, -6.4, b_l=-25.0, floor_log=math.log(1e-3))
    prop = SvTiltProposal(P, -25.0)
    x = np.full((2 * 10**5, 1), 0.22)
    a = np.exp(_estimate_m_psi_via_proposal(1, x, t, prop, 1, rng))
    b = estimate_m_psi(1, x, m, t, 1, rng)
    (ma, sa), (mb, sb) = mean_se(a), mean_se(b)
    assert abs(ma - mb) <= 4 * math.hypot(sa, sb)
    a0 = np.exp(_estimate_m_psi_via_proposal(0, None, t, prop, 10**6, rng))
    b0 = estimate_m_psi(0, None, m, t, 10**6, rng)
    assert a0 == pytest.approx(b0, rel=0.02)


def test_sv_schedule_roundtrip_and_run():
    _, r = sv_simulate(SvParams(**GENERATING), 20, rng=3)
    m = SvModel(P.with_returns(r))
    psi = [SvTwist(-100.0, 30.0, -2.3, b_l=-10.0, floor_log=math.log(2e-3)) for _ in range(20)]
    psi.append(PotentialTwist(m, 20, beta=0.5, shift=-1.0))
    rho = [SvTiltProposal(P, -10.0) for _ in range(20)] + [None]
    sched = TwistSchedule(psi, rho, n_tilde=2)
    back = schedule_from_toml(schedule_to_toml(sched), m)
    x = np.linspace(0.05, 0.6, 11)[:, None]
    for a, b in zip(sched.psi, back.psi):
        np.testing.assert_allclose(a.log_eval(x), b.log_eval(x), rtol=1e-15)
    assert back.proposal_rho[0].b_l == -10.0 and back.proposal_rho[-1] is None
    run = run_filter(build_twisted_model(m, back, m_estimator="proposal"), 50,
                     ResamplingPolicy(), rng=0)
    assert np.isfinite(run.log_z_hat)
