"""Exception types shared across the package."""


class JcaError(Exception):
    """Base class for all package errors."""


class DimensionError(JcaError, ValueError):
    """Operand shapes are incompatible."""


class ConfigError(JcaError, ValueError):
    """A configuration value is out of its allowed domain."""


class AlignmentError(JcaError, ValueError):
    """Sequences that must share a length (or clip count) do not."""


class FormatError(JcaError, ValueError):
    """A binary feature/label/checkpoint file is malformed."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class EvaluationError(JcaError, ArithmeticError):
    """A scalar objective evaluated to a non-finite value."""


class CheckpointError(JcaError, ValueError):
    """Checkpoint dimensions do not match the data it is applied to."""


class SequenceLookupError(JcaError, KeyError):
    """Requested sequence id is not present in the manifest."""
