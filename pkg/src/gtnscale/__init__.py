"""Generative MPS models and the scaling of their NLL with size, bond dimension and data."""

from .born import GtncModel, LossTrace, TrainConfig, accuracy, classify, mean_probability, nll, nll_gradient, train
from .errors import ExperimentError, FormatError, GtnError, NumericError, ParameterError, TrainingError
from .features import QfmConfig, qfm_encode, qfm_encode_batch, site_gram
from .mps import LogAmplitude, Mps, ProductState, canonicalize, log_amplitude, log_overlap, random_mps, sum_probability, superposition_mps
from .scaling import CurveSeries, ScalingFit, compose_pq, divergence_report, fit_linear, fit_log, fit_quadratic

__version__ = "0.1.0"
