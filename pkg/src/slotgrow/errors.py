"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class ContractError(ValueError):
    """A precondition of an operation was violated."""


class ConfigError(ValueError):
    """A configuration value is invalid."""


class NumericalError(RuntimeError):
    """A non-finite value appeared where a finite one is required."""


class FormatError(ValueError):
    """A binary file could not be decoded.

    ``code`` distinguishes the failure: ``"bad_magic"``, ``"version"``,
    ``"truncated"`` or ``"malformed"``.
    """

    def __init__(self, code: str, message: str):
        super().__init__(f"{code}: {message}")
        self.code = code
