"""BYOL self-supervised pretraining with a pixel-level local contrastive loss."""

from .errors import (CheckpointError, ConfigError, GeometryError, LCSSLError, NumericDomainError,
                     PPMError, ShapeError)

__version__ = "0.1.0"

__all__ = ["LCSSLError", "ConfigError", "GeometryError", "ShapeError", "NumericDomainError",
           "CheckpointError", "PPMError", "__version__"]
