"""Temporal surrogate architectures and the Dormand-Prince integrator."""

from .dopri5 import Dopri5Config, StiffnessError, dopri5_integrate
from .registry import (
    ABLATION_VARIANTS,
    ALL_TAGS,
    DISPLAY,
    MAIN_MODELS,
    REFERENCE_SIZES,
    UnknownModelError,
    benchmark_specs,
    build_model,
    build_variant,
    capacity_matched_specs,
    spec_param_count,
    literal_reference_specs,
    load_model,
    save_model,
    variant_spec,
)
from .temporal import CoRDModel, LSTMModel, MLPModel, NeuralODEModel, TCNModel, TemporalModel
