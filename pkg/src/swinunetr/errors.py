"""Exception types raised across the package."""


class ShapeError(ValueError):
    """Operand extents are incompatible with the requested operation."""


class DegenerateInputError(ValueError):
    """Input is mathematically degenerate (e.g. normalizing a zero vector)."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(ValueError):
    """A binary file (volume or checkpoint) is malformed."""


class SamplingError(RuntimeError):
    """Random sub-volume sampling could not find an acceptable crop."""


class ConfigError(ValueError):
    """Configuration is inconsistent with data or with a loaded checkpoint."""
