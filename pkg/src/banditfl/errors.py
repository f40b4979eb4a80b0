"""Exception types shared across the package."""


class DimensionMismatchError(ValueError):
    """Two sequences that must have equal length do not."""


class DegenerateWeightsError(ValueError):
    """A weight vector contains an exact zero where strict positivity is required."""


class BracketFailureError(RuntimeError):
    """Root bracketing for the constraint multiplier never found a sign change."""


class ConfigError(ValueError):
    """An experiment configuration value is missing, unknown, or out of range."""


class DivergenceError(RuntimeError):
    """Local training produced a non-finite loss or gradient."""


class AggregationError(ValueError):
    """Client updates are inconsistent with the server model or with each other."""


class DataError(ValueError):
    """Dataset contents violate a precondition (e.g. label out of class range)."""


class IngestionError(ValueError):
    """A binary dataset file failed to parse."""


class MetricError(ValueError):
    """A metric was called on inputs outside its domain."""


class OracleScopeError(ValueError):
    """A brute-force oracle was asked for a problem size it cannot enumerate."""


class RecordParseError(ValueError):
    """A persisted record stream contains an unreadable line."""
