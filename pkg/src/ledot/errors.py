"""Exception hierarchy shared by all ledot modules."""


class LedotError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(LedotError):
    """Numeric input contains NaN/Inf or is otherwise unusable."""


class DomainError(LedotError):
    """Argument outside the mathematical domain of an operation."""


class DegenerateVectorError(LedotError):
    """A vector that must have positive norm is (numerically) zero."""


class FormatError(LedotError):
    """Feature-file violates the on-disk format contract.

    ``code`` is a stable machine-readable identifier:
    ``malformed-header``, ``dimension-mismatch``, ``non-finite-payload``,
    ``truncated-blob`` or ``invalid-index``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code


class ConfigError(LedotError):
    """Inconsistent or incomplete run/synthetic configuration."""


class OntologyError(LedotError):
    """Label or class-table inconsistency (unknown label, bad anchor, ...)."""
