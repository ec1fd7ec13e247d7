"""Exception types shared across the package."""


class SpikeShieldError(Exception):
    """Base class for all package errors."""


class DimensionError(SpikeShieldError, ValueError):
    """Operand shapes are incompatible."""


class ConfigurationError(SpikeShieldError, ValueError):
    """A parameter or configuration value violates its contract."""


class DomainError(SpikeShieldError, ValueError):
    """An input lies outside the domain of the operation."""


class UsageError(SpikeShieldError, RuntimeError):
    """An API was called in an unsupported way."""


class ParseError(SpikeShieldError, ValueError):
    """A file could not be parsed.

    Attributes:
        offset: byte offset at which parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class IntegrityError(SpikeShieldError, ValueError):
    """Parsed data is internally inconsistent (e.g. label/image count mismatch)."""


class TrainingDivergedError(SpikeShieldError, FloatingPointError):
    """Training produced a non-finite loss."""


class StageError(SpikeShieldError, RuntimeError):
    """An experiment stage failed; ``stage`` names it."""

    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
