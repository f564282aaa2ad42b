"""Amortised posterior estimation for diffusion MRI tissue models."""

__version__ = "0.1.0"

from .estimator import FlowPosterior, TrainingConfig, load_flow
from .exceptions import (
    ConfigurationError,
    DimensionError,
    InsufficientSamplesError,
    LowAcceptanceError,
    MicropostError,
    NumericError,
    OptimizerFailureError,
    ProtocolParseError,
    TrainingDivergedError,
    ValidationError,
)
from .forward_models import (
    BALL_STICK,
    EXTENDED_SANDI,
    MODEL_IDS,
    STANDARD_MODEL,
    ParameterSpace,
    ParameterVector,
    add_noise,
    generate_training_set,
    get_space,
    simulate,
    sphere_cs,
)
from .posterior import PosteriorSamples, PosteriorSummary, detect_degeneracy, rejection_sample, summarize
from .priors import PriorSpec, in_support, log_prior, sample_prior
from .protocol import AcquisitionProtocol, default_protocol, direction_average, load_protocol, make_multishell_protocol

__all__ = [
    "__version__",
    "FlowPosterior",
    "TrainingConfig",
    "load_flow",
    "MicropostError",
    "ConfigurationError",
    "ValidationError",
    "ProtocolParseError",
    "DimensionError",
    "NumericError",
    "TrainingDivergedError",
    "OptimizerFailureError",
    "LowAcceptanceError",
    "InsufficientSamplesError",
    "BALL_STICK",
    "STANDARD_MODEL",
    "EXTENDED_SANDI",
    "MODEL_IDS",
    "ParameterSpace",
    "ParameterVector",
    "add_noise",
    "generate_training_set",
    "get_space",
    "simulate",
    "sphere_cs",
    "PosteriorSamples",
    "PosteriorSummary",
    "detect_degeneracy",
    "rejection_sample",
    "summarize",
    "PriorSpec",
    "in_support",
    "log_prior",
    "sample_prior",
    "AcquisitionProtocol",
    "direction_average",
    "default_protocol",
    "load_protocol",
    "make_multishell_protocol",
]
