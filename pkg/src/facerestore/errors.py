class DimensionError(ValueError):
    """Raised when tensor or image extents are incompatible with an operation."""


class ConfigError(ValueError):
    """Raised for invalid configuration values or unknown configuration keys."""


class ContractError(RuntimeError):
    """Raised when a caller violates an operation precondition."""


class NonFiniteLossError(FloatingPointError):
    """A loss term became NaN or infinite during training."""

    def __init__(self, term, step=None):
        self.term = term
        self.step = step
        where = f" at step {step}" if step is not None else ""
        super().__init__(f"non-finite value in loss term '{term}'{where}")
