"""Exception hierarchy shared by all modules.

CLI exit-code mapping: usage problems exit 1, everything below exits 2.
"""


class HideForgeError(Exception):
    """Base class for all package errors."""


class DomainError(HideForgeError):
    """A mathematical precondition was violated (zero norm, T <= 0, ...)."""


class DegenerateInputError(DomainError):
    """Feature vector or activation matrix carries no usable signal."""


class ContractError(HideForgeError):
    """Caller broke an operation contract (shape, span, coverage, ...)."""


class ConfigurationError(HideForgeError):
    """Inconsistent or unknown configuration."""


class IngestionError(HideForgeError):
    """Dataset file violates its schema."""


class GenerationError(HideForgeError):
    """Benchmark generation could not satisfy its constraints."""
