"""Error taxonomy mirroring the trace consumers' exit-code contract."""


class ExporterError(Exception):
    """Base class for everything raised on purpose by this package."""


class UsageError(ExporterError):
    """Caller mistake: bad arguments, unusable model, empty prompt."""


class DataError(ExporterError):
    """Malformed or inconsistent trace bytes."""
