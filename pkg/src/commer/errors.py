"""Exception types shared across the package."""


class CommerError(Exception):
    """Base class for all package errors."""


class ContractViolation(CommerError):
    """An operation was called outside its documented preconditions."""


class NumericFault(CommerError):
    """A NaN (or equivalent numeric breakdown) was produced during evaluation."""


class DeterminismError(CommerError):
    """Two evaluations that must agree bit-for-bit did not."""


class ConfigError(CommerError):
    """Inconsistent or incomplete run configuration."""


class IntegrityError(CommerError):
    """A persisted artifact failed hash, magic, or shape verification."""
