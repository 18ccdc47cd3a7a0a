"""Exception types shared across the package."""


class InvalidParameterError(ValueError):
    """An argument is outside the domain an operation accepts."""


class DegenerateTemporalError(InvalidParameterError):
    """Temporal variance is too small to condition on."""


class TimeRangeError(InvalidParameterError):
    """A render timestamp lies outside the normalized [0, 1] interval."""


class DataError(Exception):
    """Base class for on-disk dataset and scene problems."""


class ManifestError(DataError):
    """``manifest.json`` is missing, unreadable or malformed."""


class ImageCountError(DataError):
    """The number of frame files does not match M x N."""


class TimestampOrderError(DataError):
    """Timestamps are not strictly increasing."""


class SceneFormatError(DataError):
    """A scene file has the wrong magic, version, or is truncated."""


class NumericError(ArithmeticError):
    """Optimization produced an unusable state (for example an empty scene)."""
