"""Functional and cycle-approximate model of a single-load ViT accelerator."""
from .config import (ConfigError, DerivedDims, HardwareConfig, ModelConfig, builtin_models,
                     derive_dims, get_model, load_hw_config, load_model_config)

__version__ = "0.1.0"

__all__ = ["ConfigError", "DerivedDims", "HardwareConfig", "ModelConfig", "builtin_models",
           "derive_dims", "get_model", "load_hw_config", "load_model_config", "__version__"]
