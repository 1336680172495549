"""Exception types shared across the package."""


class ConfoundNetError(Exception):
    """Base class for all package errors."""


class DimensionError(ConfoundNetError):
    """Tensor shapes do not line up for the requested operation."""


class GeometryError(ConfoundNetError):
    """Invalid spatial geometry (non-integer conv output, odd pool dims)."""


class LabelError(ConfoundNetError):
    """Class label outside the valid range."""


class NumericsError(ConfoundNetError):
    """NaN or Inf escaped an engine kernel."""


class RotationError(ConfoundNetError):
    """Degenerate (zero-norm) rotation."""


class ConfigError(ConfoundNetError):
    """Bad configuration value or inconsistent layer geometry chain."""


class DataError(ConfoundNetError):
    """Dataset contents unusable for the requested run."""


class UsageError(ConfoundNetError):
    """API misuse, e.g. augmenting the test split."""


class StateError(ConfoundNetError):
    """Stale forward cache or missing/unexpected pose head."""


class FormatError(ConfoundNetError):
    """Malformed checkpoint or raster file."""


class IngestError(ConfoundNetError):
    """Dataset directory or metadata problem."""


class DivergenceError(ConfoundNetError):
    """Non-finite loss or gradient during training."""
