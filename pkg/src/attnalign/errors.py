"""Error hierarchy shared across the lab.

The CLI maps these to distinct exit codes (config=2, data=3, numeric=4),
so every raise site should pick the class that names the actual failure.
"""


class ConfigurationError(ValueError):
    """Invalid configuration: bad shapes, counts, flags, or field values."""


class DataError(ValueError):
    """Invalid or corrupt data: manifests, RLE payloads, answer sheets."""


class CapacityError(DataError):
    """More instances than the fixed track budget allows."""


class EmptyQueryError(DataError):
    """A query/token set is empty; the analysis for that role is skipped."""


class NumericsError(ArithmeticError):
    """NaN/Inf or divergence encountered during loss evaluation or training."""
