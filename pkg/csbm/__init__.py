"""
Bayes-optimal inference for the contextual stochastic block model.
Provides instance generation, AMP-BP and its variants, free-entropy based
parameter estimation and reference oracles.
"""

from .amp_bp import FixedPoint, MessageState, RunOptions, hard_labels, init_state, iterate, magnetization, mse_v, \
    overlap, run
from .config import Settings, get_settings, load_settings
from .dense import DenseParams, SeOptions, run_amp_amp, sample_dense_instance, se_predicted_overlap, \
    state_evolution, transform_adjacency
from .errors import (ConfigError, DivergenceError, EmptyTestSetError, EnumerationLimitError,
                     InvalidParameterError, ResourceBudgetError, SerializationError)
from .free_energy import BetheValue, EmOptions, ParamEstimate, bethe_free_entropy, em_fit, em_step, \
    free_entropy_gradient
from .model import Affinity, Instance, ModelParams, Supervision, affinity_from_snr, detectability_threshold, \
    make_supervision, params_from_phi_eps, sample_instance
from .multi import MultiParams, MultiState, overlap_multi, run_multi, sample_multi_instance
from .oracles import MarginalTable, McmcOptions, exact_marginals, exact_posterior, logistic_baseline, mcmc_marginals, \
    mcmc_samples
from .registry import Solver, SolverOutcome, SolverRegistry, default_registry

__version__ = "0.1.0"

__all__ = [
    'Affinity', 'BetheValue', 'ConfigError', 'DenseParams', 'DivergenceError', 'EmOptions', 'EmptyTestSetError',
    'EnumerationLimitError', 'FixedPoint', 'Instance', 'InvalidParameterError', 'MarginalTable', 'McmcOptions',
    'MessageState', 'ModelParams', 'MultiParams', 'MultiState', 'ParamEstimate', 'ResourceBudgetError',
    'RunOptions', 'SeOptions', 'SerializationError', 'Settings', 'Solver', 'SolverOutcome', 'SolverRegistry',
    'Supervision', 'affinity_from_snr', 'bethe_free_entropy', 'default_registry', 'detectability_threshold',
    'em_fit', 'em_step', 'exact_marginals', 'exact_posterior', 'free_entropy_gradient', 'get_settings',
    'hard_labels', 'init_state', 'iterate', 'load_settings', 'logistic_baseline', 'magnetization',
    'make_supervision', 'mcmc_marginals', 'mcmc_samples', 'mse_v', 'overlap', 'overlap_multi',
    'params_from_phi_eps', 'run', 'run_amp_amp', 'run_multi',
    'sample_dense_instance', 'sample_instance', 'sample_multi_instance', 'se_predicted_overlap',
    'state_evolution', 'transform_adjacency', '__version__',
]
