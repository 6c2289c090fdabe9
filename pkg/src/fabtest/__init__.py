"""Frequentist-assisted-by-Bayes (FAB) testing with priors linked to historical data."""

from .align import align_chain, posterior_point_estimates, procrustes_rotation
from .errors import FabError, InsufficientDataError, NumericalError, ValidationError
from .linking import EffectSummaries, FabFit, FeatureSource, run_fab_analysis
from .sim import SimDesign, run_null_experiment, run_power_experiment
from .tensor import ChainConfig, ChainOutput, TensorDataset, run_chain
from .ttest import bh_adjust, classical_p, fab_p, t_cdf

__version__ = "0.1.0"

__all__ = [
    "ChainConfig", "ChainOutput", "EffectSummaries", "FabError", "FabFit", "FeatureSource",
    "InsufficientDataError", "NumericalError", "SimDesign", "TensorDataset", "ValidationError",
    "align_chain", "bh_adjust", "classical_p", "fab_p", "posterior_point_estimates",
    "procrustes_rotation", "run_chain", "run_fab_analysis", "run_null_experiment",
    "run_power_experiment", "t_cdf",
]
