"""Bayesian sparse factor analysis with kernelized observations.

Views are either primal (reconstructed as ``X ~ Z W^T``) or kernelized
(their kernel rows against the training samples are reconstructed as
``K ~ Z A^T``). Inference is mean-field variational with ARD pruning of
latent factors, optional double ARD for relevance-vector selection and
gradient-learnt per-feature relevances for ARD-RBF kernels.
"""

from .estimator import KFAModel
from .inference import FitConfig, FitError, NumericalError, fit, predict, predict_classes, project
from .kernels import KernelConfig, center_kernel, center_test_kernel, compute_kernel
from .model import Hyperparams, ModelState, ViewData, ViewSpec, init_state, load_state, save_state
from .relevance import LambdaOptConfig, export_relevance, select_features

__version__ = "0.1.0"

__all__ = [
    "FitConfig", "FitError", "Hyperparams", "KFAModel", "KernelConfig", "LambdaOptConfig",
    "ModelState", "NumericalError", "ViewData", "ViewSpec", "center_kernel", "center_test_kernel",
    "compute_kernel", "export_relevance", "fit", "init_state", "load_state", "predict",
    "predict_classes", "project", "save_state", "select_features",
]
