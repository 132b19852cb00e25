"""Exception types shared across the package."""


class MatsegError(Exception):
    pass


class ShapeError(MatsegError, ValueError):
    """Operand shapes are incompatible with an operation."""


class ContractError(MatsegError, RuntimeError):
    """A caller violated an operation's precondition."""


class ValidationError(MatsegError, ValueError):
    """An argument value is outside its accepted domain."""


class ConfigError(MatsegError, ValueError):
    pass


class FormatError(MatsegError, ValueError):
    """A file does not follow the expected binary/text layout."""


class IntegrityError(MatsegError, ValueError):
    """A checkpoint is well-formed but its contents do not match the model."""


class DivergenceError(MatsegError, RuntimeError):
    pass
