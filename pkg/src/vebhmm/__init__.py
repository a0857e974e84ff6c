"""Hierarchical hidden Markov models fitted by variational empirical Bayes.

Each trace gets its own variational posterior over a K-state HMM with
Normal emissions; the traces are coupled through shared prior
hyperparameters estimated by maximising the summed evidence lower bound.
"""
__version__ = "0.1.0"

from .baselines import run_baseline, select_model_per_trace
from .data import Ensemble, GroundTruth, Hyperparameters, Trace, TracePosterior, validate
from .empirical_bayes import VebConfig, VebResult, hyperparameter_mstep, veb_fit
from .errors import (ConvergenceError, DataError, DegenerateMomentError, DomainError,
                     NumericError, VebError)
from .evaluation import (count_errors, crossval_heldout, delta_g, delta_g_posterior,
                         effective_states, ensemble_bic, pseudocounts)
from .io import read_traces, write_traces
from .simulate import SimScenario, sample_ensemble
from .special import SolverConfig, digamma, match_dirichlet, solve_gamma_shape, trigamma
from .vbhmm import FitConfig, elbo, fit_trace, forward_backward

__all__ = [
    "__version__",
    "ConvergenceError", "DataError", "DegenerateMomentError", "DomainError", "NumericError",
    "VebError",
    "Ensemble", "GroundTruth", "Hyperparameters", "Trace", "TracePosterior", "validate",
    "SolverConfig", "digamma", "trigamma", "solve_gamma_shape", "match_dirichlet",
    "FitConfig", "forward_backward", "fit_trace", "elbo",
    "VebConfig", "VebResult", "veb_fit", "hyperparameter_mstep",
    "SimScenario", "sample_ensemble",
    "run_baseline", "select_model_per_trace",
    "pseudocounts", "count_errors", "effective_states", "ensemble_bic", "delta_g",
    "delta_g_posterior", "crossval_heldout",
    "read_traces", "write_traces",
]
