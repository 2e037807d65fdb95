"""Exception hierarchy shared by all otrec modules.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataFormatError -> 3, NumericalError -> 4.
"""


class OtrecError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(OtrecError):
    """Invalid or incomplete pipeline configuration."""


class DataFormatError(OtrecError):
    """Malformed input data: bad file format, unresolvable ids, missing artifacts."""


class NumericalError(OtrecError):
    """Numerical failure: divergence, non-convergence, singular matrices."""
