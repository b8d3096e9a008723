"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Malformed input data: bad schema, dimension mismatch, label out of range."""


class InfeasibleAnnotationError(RuntimeError):
    """A weak annotation admits no labelling under the inference constraints."""


class BudgetExceededError(RuntimeError):
    """An exhaustive enumeration would exceed the configured budget."""


class InvariantBreachError(RuntimeError):
    """An internal invariant failed (e.g. a non-monotone outer-loop step)."""
