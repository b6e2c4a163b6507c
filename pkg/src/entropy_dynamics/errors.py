"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Malformed input: wrong shape, bad normalization, missing field.

    ``path`` names the offending field (e.g. ``"rule.alpha"``) when known.
    """

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        super().__init__(f"{path}: {message}" if path else message)


class DomainError(ValueError):
    """A numeric argument is outside the domain of the operation."""


class CapacityError(RuntimeError):
    """An exhaustive search would exceed the configured guard."""


class ScopeError(ValueError):
    """The operation is only defined for a narrower class of tasks."""


class NumericError(ArithmeticError):
    """Non-finite values appeared where finite values are required."""
