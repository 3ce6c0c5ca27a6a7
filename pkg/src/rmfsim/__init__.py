"""Simulation and statistical verification of replica-mean-field spiking networks."""

__version__ = "0.1.0"

from .errors import SimError
from .model import (
    INFINITE,
    ExperimentConfig,
    InitialCondition,
    NetworkParams,
    ValidatedParams,
    sample_initial,
    validate_params,
)
from .randomness import (
    LazyPoissonField,
    RoutingMarks,
    StreamKey,
    StreamTag,
    derive_path_seed,
    derive_stream,
)

__all__ = [
    "__version__",
    "SimError",
    "INFINITE",
    "ExperimentConfig",
    "InitialCondition",
    "NetworkParams",
    "ValidatedParams",
    "sample_initial",
    "validate_params",
    "LazyPoissonField",
    "RoutingMarks",
    "StreamKey",
    "StreamTag",
    "derive_path_seed",
    "derive_stream",
]
