from .assumptions import AssumptionReport, CheckConfig, validate_assumptions  # noqa: F401
from .configuration_msm import MsmConfig  # noqa: F401
from .modeling_msm import (  # noqa: F401
    CovarianceSpec,
    MsmModel,
    PosteriorMarginals,
    affine_pushforward,
    brute_force_log_likelihood,
    enumerate_regime_paths,
    most_likely_regimes,
    msm_forward_backward,
    msm_log_likelihood,
    msm_prior_gradient,
    msm_prior_surrogate,
    permute_regimes,
    sample_msm,
)
