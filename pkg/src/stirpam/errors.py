"""Shared exception types."""


class DomainError(ValueError):
    """Input outside the mathematical domain of an operation."""


class CapacityError(RuntimeError):
    """Requested exact computation exceeds a hard size guard."""
