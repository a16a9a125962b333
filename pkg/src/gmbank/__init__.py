"""Gaussian-mixture filter banks for linear systems with non-Gaussian noise."""

from .filters import (
    FilterError,
    FilterKind,
    FilterRun,
    GaussianEstimate,
    ImpossibleMeasurementError,
    ReductionScheme,
    SingularGainError,
    ammse_gains,
    bank_step,
    kalman_step,
    matched_step,
    run_filter,
)
from .mixture import (
    GaussianComponent,
    GaussianMixture,
    LinearSystem,
    MixtureError,
    NoiseModel,
    kl_to_moment_matched,
    moment_match,
    sample_mixture,
)
from .stats import ansari_bradley, cep, confidence_interval, ks_two_sample, rmse

__all__ = [
    "FilterError", "FilterKind", "FilterRun", "GaussianEstimate", "ImpossibleMeasurementError",
    "ReductionScheme", "SingularGainError", "ammse_gains", "bank_step", "kalman_step",
    "matched_step", "run_filter", "GaussianComponent", "GaussianMixture", "LinearSystem",
    "MixtureError", "NoiseModel", "kl_to_moment_matched", "moment_match", "sample_mixture",
    "ansari_bradley", "cep", "confidence_interval", "ks_two_sample", "rmse",
]
__version__ = "0.1.0"
