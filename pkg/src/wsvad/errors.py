"""Exception taxonomy shared across the package.

Every contract violation raises a typed error so callers (and the fuzz
tests) can distinguish bad inputs from bugs; nothing in the library
raises bare ValueError/RuntimeError for contract failures.
"""


class WsvadError(Exception):
    """Base class for all library errors."""


class DimensionError(WsvadError):
    """Operand shapes are incompatible with the operation."""


class ConfigError(WsvadError):
    """Model/block configuration is inconsistent (e.g. heads not dividing width)."""


class ContractError(WsvadError):
    """A documented precondition was violated by the caller."""


class ParameterError(WsvadError):
    """A numeric parameter is outside its documented range."""


class FormatError(WsvadError):
    """A feature file or checkpoint has a malformed header or payload."""


class FeatureIOError(WsvadError):
    """A feature file is truncated or otherwise unreadable."""


class ValidationError(WsvadError):
    """A manifest record failed validation; message names the video."""


class MetricUndefinedError(WsvadError):
    """A metric was requested on degenerate input (e.g. single-class AUC)."""
