"""Error taxonomy shared across the package.

Two failure classes map onto the CLI exit-code contract: caller mistakes
(bad arguments, impossible configurations) and bad data (non-finite
payloads, corrupted or truncated files).
"""


class UsageError(ValueError):
    """The caller asked for something invalid. CLI exit code 1."""


class DataError(ValueError):
    """The input data is malformed or corrupted. CLI exit code 2."""
