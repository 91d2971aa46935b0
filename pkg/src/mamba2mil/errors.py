"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(RuntimeError):
    """A caller violated an API contract (stale tape, empty axis, ...)."""


class NumericError(FloatingPointError):
    """A non-finite value appeared where a finite one is required."""


class EmptyBagError(ValueError):
    pass
