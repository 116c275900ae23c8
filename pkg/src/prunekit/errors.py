"""Shared exception types."""


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class ContractError(ValueError):
    """An argument violates a documented precondition."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or out of range."""


class VerificationError(RuntimeError):
    """An equivalence or integrity check failed."""
