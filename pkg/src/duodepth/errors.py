"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or combination."""


class ShapeError(ValueError):
    """Array shape violates an operation's contract."""


class FormatError(ValueError):
    """Malformed file content. Carries the byte offset where parsing failed."""

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EncodingError(ValueError):
    """Value cannot be represented in the requested file encoding."""


class DegenerateInputError(ValueError):
    """Input is degenerate for the requested computation (e.g. constant map)."""


class ContractViolation(RuntimeError):
    """A pluggable component returned something outside its contract."""


class TrainingAbort(RuntimeError):
    """Training must stop; names the offending loss component."""

    def __init__(self, component: str, value: float):
        super().__init__(f"non-finite loss component '{component}': {value}")
        self.component = component
        self.value = value
