"""Exception hierarchy. CLI exit codes map onto these classes."""


class FineFlowError(Exception):
    """Base class for all package errors."""


class ShapeError(FineFlowError):
    """Tensor construction or operand shapes violate an operation's contract."""


class DataError(FineFlowError):
    """Dataset, split, or file-content problem (CLI exit code 2)."""


class DecodeError(DataError):
    """Malformed or unsupported image bytes; message names the byte offset."""


class CheckpointError(DataError):
    """Checkpoint container cannot be parsed or fails validation."""


class ConfigError(FineFlowError):
    """Invalid run configuration or flag usage (CLI exit code 1)."""


class NumericError(FineFlowError):
    """Non-finite value reached a place that requires finite numbers (CLI exit code 3)."""
