"""Bayesian dynamic panel regression with a mixture of finite mixtures for unit heterogeneity."""
from .errors import ConfigError, DataError, PanelMFMError, SamplerError
from .model import (Allocations, MixingMeasure, ModelParams, PanelData, log_component_likelihood,
                    log_mixture_likelihood, residuals)
from .priors import (AtomPrior, KPrior, PriorConfig, RegressionPrior, WeightPrior, log_eppf,
                     log_pmf_K)
from .sampler import ChainState, DrawStore, SamplerSettings, run_chain

__version__ = "0.1.0"
