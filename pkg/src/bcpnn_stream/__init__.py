"""Stream-based BCPNN engine with an emulated dataflow accelerator and roofline model."""

from bcpnn_stream.config import ModelConfig, load_config, preset, validate_config
from bcpnn_stream.model import BCPNNModel, Population, Projection, build_model, new_population, new_projection

__version__ = "0.1.0"

__all__ = [
    "BCPNNModel",
    "ModelConfig",
    "Population",
    "Projection",
    "build_model",
    "load_config",
    "new_population",
    "new_projection",
    "preset",
    "validate_config",
]
