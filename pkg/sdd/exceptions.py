"""
Error hierarchy for the SDD toolkit.

Every error raised on purpose by the package derives from SddError so the CLI
can tell a runtime failure (exit 2) from a bug.
"""
from typing import Optional


class SddError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(SddError, ValueError):
    """An argument violates an operation's precondition."""


class ConfigError(SddError, ValueError):
    """Invalid settings, model configuration or training configuration."""


class ShapeError(SddError, ValueError):
    """Tensor shapes do not match what a graph layer expects."""

    def __init__(self, message: str, layer: Optional[str] = None):
        self.layer = layer
        super().__init__(f"[{layer}] {message}" if layer else message)


class StateError(SddError, RuntimeError):
    """An operation was called out of order (e.g. backward before forward)."""


class DomainError(SddError, ValueError):
    """Input lies outside a function's mathematical domain."""


class UndefinedMetricError(SddError, ValueError):
    """A metric is undefined for the given labels (e.g. single-class AUC)."""


class NonFiniteGradientError(SddError, ArithmeticError):
    """A NaN/inf gradient reached the optimizer."""

    def __init__(self, layer: str, step: int):
        self.layer = layer
        self.step = step
        super().__init__(f"Non-finite gradient in layer '{layer}' at step {step}")


class ImpossibleSpecError(SddError, ValueError):
    """A dataset specification cannot be satisfied."""


class ContainerError(SddError, IOError):
    """Base class for event-container read/write failures."""


class ContainerVersionError(ContainerError):
    """Container manifest declares an unsupported format_version."""


class TruncatedBlobError(ContainerError):
    """A channel blob ends in the middle of a sample."""


class LengthMismatchError(ContainerError):
    """A channel blob holds a different number of samples than the manifest declares."""


class MissingBlobError(ContainerError):
    """A channel blob named in the manifest does not exist."""


class CheckpointError(SddError, IOError):
    """Checkpoint file is malformed or incompatible."""


class SinkError(SddError, IOError):
    """A detection sink failed to accept a record."""


class UsageError(SddError, ValueError):
    """A command line names an unknown flag, a missing file or a malformed input."""
