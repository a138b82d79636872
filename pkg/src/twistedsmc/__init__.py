"""Twisted Feynman-Kac particle filters with rejection-sampled kernels and
Monte Carlo potentials."""

from .core import (
    FeynmanKacModel,
    InvalidWeightsError,
    ParticleRun,
    PotentialError,
    ResamplingPolicy,
    ess,
    resample_categorical,
    run_filter,
    weighted_estimate,
)
from .twisting import (
    ConstantTwist,
    ExpQuadraticTwist,
    PotentialTwist,
    RunawayRejectionError,
    TabularTwist,
    TwistFunction,
    TwistSchedule,
    UnitTwist,
    acceptance_trace,
    build_twisted_model,
    estimate_m_psi,
    load_schedule,
    rejection_sample,
    save_schedule,
)
from .learning import (
    LearnConfig,
    estimate_acceptance,
    fit_log_quadratic,
    learn_twists,
    maximize_partial_twist,
    temper_schedule,
    temper_to_target,
)

__version__ = "0.1.0"
