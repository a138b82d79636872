"""Twisted particle filters on a linear Gaussian model.

Simulates a short 3-d series, then compares the log-evidence estimates of a
bootstrap filter, a filter twisted by the exact optimal functions (run at a
single particle) and a filter using learned twists, against the Kalman value.

    python demos/lgssm_walkthrough.py
"""

import numpy as np

from twistedsmc import (
    LearnConfig,
    ResamplingPolicy,
    TwistSchedule,
    build_twisted_model,
    learn_twists,
    run_filter,
)
from twistedsmc.models import (
    LgssmModel,
    LgssmParams,
    kalman_log_evidence,
    lgssm_optimal_twists,
    lgssm_simulate,
    with_gaussian_proposals,
)


def main(seed=1):
    rng = np.random.default_rng(seed)
    P = LgssmParams.from_a(d=3, n=30)
    model = LgssmModel(P.with_observations(lgssm_simulate(P, rng)[1]))
    truth = kalman_log_evidence(model.params)
    print(f"Kalman log Z: {truth:.4f}")

    policy = ResamplingPolicy("adaptive", 0.5)
    bpf = [run_filter(model, 200, policy, rng, store_paths=False).log_z_hat for _ in range(20)]
    print(f"bootstrap, N=200:      mean error {np.mean(bpf) - truth:+.3f}, sd {np.std(bpf):.3f}")

    # optimal twists with closed-form integrals: one particle is enough
    opt = with_gaussian_proposals(lgssm_optimal_twists(model.params), model.params)
    tw = build_twisted_model(model, opt, exact_m=model.exact_log_m)
    one = run_filter(tw, 1, policy, rng).log_z_hat
    print(f"optimal twist, N=1:    error {one - truth:+.2e}")

    # learned twists, Monte Carlo potentials
    cfg = LearnConfig(iterations=3, alpha_min=(0.04, 0.02, 0.01), n_tilde=25, floor=5e-4)
    run = run_filter(model, 200, policy, rng)
    sched = TwistSchedule.unit(model.n, cfg.n_tilde)
    for it in range(cfg.iterations):
        sched = learn_twists(run, model, sched, cfg, rng, cfg.alpha_for(it))
        run = run_filter(build_twisted_model(model, sched), 200, policy, rng)
    final = build_twisted_model(model, sched)
    est = [run_filter(final, 200, policy, rng, store_paths=False) for _ in range(20)]
    z = [r.log_z_hat for r in est]
    trials = np.mean([r.rejection_trials.mean() for r in est])
    print(f"learned twist, N=200:  mean error {np.mean(z) - truth:+.3f}, sd {np.std(z):.3f}, "
          f"mean rejection trials {trials:.1f}")


if __name__ == "__main__":
    main()
