"""Exception hierarchy shared across the package.

The CLI maps these onto process exit codes, so new error types should
subclass one of the existing categories rather than ``Exception``.
"""


class HistoganError(Exception):
    """Base class for all package errors."""


class InvalidInputError(HistoganError, ValueError):
    """An operation received data violating its preconditions."""


class ConfigurationError(HistoganError):
    """A config object or plan is internally inconsistent or unusable."""


class DependencyError(HistoganError):
    """A required upstream artifact (checkpoint, corpus, ...) is missing."""

    def __init__(self, message: str, produced_by: str | None = None):
        super().__init__(message)
        self.produced_by = produced_by


class NumericDomainError(HistoganError):
    """A numeric routine was handed input outside its mathematical domain."""


class DegenerateEmbeddingError(NumericDomainError):
    """An embedding has zero norm, so cosine similarity is undefined."""


class ValidationError(HistoganError):
    """A cross-artifact consistency check failed (e.g. train/test overlap)."""
