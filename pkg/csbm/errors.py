"""
Exception types raised by the csbm package.

Each one subclasses the builtin a caller would already expect, so plain
``except ValueError`` keeps working.
"""


class InvalidParameterError(ValueError):
    """A model or solver parameter is outside its valid range."""


class ResourceBudgetError(MemoryError):
    """A requested allocation exceeds the configured memory budget."""

    def __init__(self, what: str, requested: int, allowed: int, env_var: str):
        self.what = what
        self.requested = requested
        self.allowed = allowed
        self.env_var = env_var
        super().__init__(
            f"{what} needs {requested:,} but the budget allows {allowed:,}. "
            f"Raise it with the {env_var} environment variable or shrink the instance."
        )


class DivergenceError(FloatingPointError):
    """A message-passing iteration produced a non-finite value."""

    def __init__(self, quantity: str, iteration: int):
        self.quantity = quantity
        self.iteration = iteration
        super().__init__(
            f"Non-finite value in {quantity} at iteration {iteration}. "
            "Try damping, or check that |lambda| < sqrt(d)."
        )


class EmptyTestSetError(ValueError):
    """Every node is revealed, so there is nothing to score."""


class EnumerationLimitError(ValueError):
    """Exact enumeration was requested on too many nodes."""


class ConfigError(ValueError):
    """A configuration file or environment value could not be used."""


class SerializationError(ValueError):
    """A serialized instance is malformed."""
