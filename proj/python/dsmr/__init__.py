"""DSM refinement with a residual encoder-decoder."""

from ._core import (
    ConfigError,
    DataError,
    DimensionError,
    Model,
    Raster,
    cli,
    fill_holes,
    gradcheck,
    load_model,
    metrics,
    synth_pair,
)

__all__ = [
    "ConfigError",
    "DataError",
    "DimensionError",
    "Model",
    "Raster",
    "cli",
    "fill_holes",
    "gradcheck",
    "load_model",
    "metrics",
    "synth_pair",
]
