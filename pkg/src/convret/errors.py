"""Exception types shared across the package."""


class ConvretError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(ConvretError):
    """Tensor shapes are incompatible with the requested operation."""


class ContractError(ConvretError):
    """A caller violated an operation precondition."""


class EvaluationError(ConvretError):
    """A numeric evaluation produced a non-finite value."""


class ParseError(ConvretError):
    """A corpus or checkpoint file could not be parsed."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class IntegrityError(ConvretError):
    """Cross-references inside a corpus do not resolve."""


class CapacityError(ConvretError):
    """A candidate pool is too small for the requested operation."""


class ConfigError(ConvretError):
    """A configuration value is out of its allowed range."""


class CheckpointError(ConvretError):
    """A checkpoint file is corrupt or has an incompatible version."""


class TrainingError(ConvretError):
    """Training aborted, e.g. on a non-finite gradient."""
