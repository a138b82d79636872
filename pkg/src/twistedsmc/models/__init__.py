"""Concrete model families: linear Gaussian and square-root stochastic volatility."""

from .lgssm import (
    GaussianTiltProposal,
    LgssmModel,
    LgssmParams,
    gaussian_m_psi_exact,
    kalman_log_evidence,
    lgssm_optimal_twists,
    lgssm_simulate,
    transition_matrix,
    with_gaussian_proposals,
)
from .sv import (
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
    sv_log_potential,
    sv_partial_family,
    sv_potential,
    sv_simulate,
    sv_tilted_kernel,
)
