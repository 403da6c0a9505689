"""Simulation, maximum-likelihood estimation and Cramer-Rao analysis of
closely spaced tones seen through a phase-sensitive quantum probe."""

from .errors import (ConfigError, FlatSpectrum, IngestError, LayoutError, NoConvergence,
                     QresError, QuadratureError, SingularInfo)
from .estimator import (EstimateResult, EstimationConfig, estimate_over_resamples, local_estimate, mle_estimate,
                        resolution_decision)
from .fisher import (FisherResult, crb_of_separation, fisher_exact, fisher_linearized, fisher_marginal,
                     scaling_exponents)
from .likelihood import (log_likelihood, log_likelihood_gradient, marginal_log_likelihood,
                         per_set_log_likelihood)
from .signal_model import (ParamVector, ProbeConfig, ToneParams, accumulated_phase,
                           detection_probability, linearized_probability, probability_gradient)
from .simulator import (Dataset, MeasurementSet, SignalModel, draw_set_parameters,
                        simulate_dataset, split_resample)
from .spectrum import lineshape_fi_scaling, power_spectrum, spectral_seed

__all__ = [name for name in dir() if not name.startswith("_")]
