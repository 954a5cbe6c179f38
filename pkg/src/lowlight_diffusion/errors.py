"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Shapes are incompatible with the requested operation."""


class NumericalError(ArithmeticError):
    """An iterative routine failed or a value went out of its numeric domain."""


class ConfigError(ValueError):
    """Invalid configuration or parameter range."""


class CheckpointError(IOError):
    """A checkpoint file could not be read back faithfully."""


class FormatError(IOError):
    """Malformed image or manifest file."""
