"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes: ConfigError -> 1, DataError -> 2,
NumericalError -> 3.
"""


class TumorSynthError(Exception):
    """Base class for all toolkit errors."""


class ConfigError(TumorSynthError):
    """Invalid configuration or command-line usage."""


class DataError(TumorSynthError):
    """Malformed files, invalid labels, or inconsistent geometry."""


class NumericalError(TumorSynthError):
    """Numerical failure: instability, non-finite values."""
