"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid model, rope or stream configuration."""


class ShapeError(ValueError):
    """Array dimensions do not line up."""


class ContractViolation(RuntimeError):
    """A caller broke an ordering or state precondition."""


class ValidationError(ValueError):
    """Malformed data-pipeline input."""


class ContextLimitExceeded(RuntimeError):
    """A growing-context mode went past its configured ceiling."""

    def __init__(self, context_len: int, ceiling: int):
        super().__init__(f"context length {context_len} exceeds ceiling {ceiling}")
        self.context_len = context_len
        self.ceiling = ceiling
