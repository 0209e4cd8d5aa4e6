"""JAR multimodal fusion, FLOPs cost model and loss-proportional task sampler."""

from ._core import (
    ConfigError,
    DimensionError,
    DivergenceError,
    FusionModel,
    GenerationError,
    InputError,
    compute_weights,
    flops_total,
    generate,
    run_cli,
    sample_batch_composition,
    sweep,
)

__all__ = [
    "ConfigError",
    "DimensionError",
    "DivergenceError",
    "FusionModel",
    "GenerationError",
    "InputError",
    "compute_weights",
    "flops_total",
    "generate",
    "run_cli",
    "sample_batch_composition",
    "sweep",
]
