"""Exception types shared across the package."""


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


class ContractError(ValueError):
    """A call violated an operation's precondition."""


class ConfigError(ValueError):
    """Invalid or inconsistent configuration."""


class SchemaError(ValueError):
    """A file does not match a supported schema version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""
