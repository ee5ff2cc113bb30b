"""Exception types shared across the package."""


class LCSSLError(Exception):
    """Base class; ``kind`` is the short tag the CLI prints."""

    kind = "error"


class ConfigError(LCSSLError, ValueError):
    kind = "config"


class GeometryError(LCSSLError, ValueError):
    kind = "geometry"


class ShapeError(LCSSLError, ValueError):
    kind = "shape"


class NumericDomainError(LCSSLError, ArithmeticError):
    kind = "numeric"


class CheckpointError(LCSSLError):
    kind = "checkpoint"


class PPMError(LCSSLError, ValueError):
    kind = "ppm"
