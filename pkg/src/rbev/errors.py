class RbevError(Exception):
    """Base class for library errors."""


class DimensionError(RbevError):
    """Shape or dimension mismatch between operands."""


class ConfigError(RbevError):
    """Invalid configuration or parameter-shape mismatch."""


class NumericError(RbevError):
    """Non-finite value encountered; message carries module/op context."""
