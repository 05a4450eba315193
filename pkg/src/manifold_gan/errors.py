"""Exception types shared across the package."""


class ContractViolation(ValueError):
    """An operation was called outside its documented preconditions."""


class FormatError(ValueError):
    """A binary or text file does not match the expected layout."""


class ConfigError(ValueError):
    """A run configuration is invalid or references missing resources."""

    def __init__(self, message, field=None):
        super().__init__(message)
        self.field = field


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss.

    ``snapshot`` carries the epoch, step and loss terms at the failing step.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
