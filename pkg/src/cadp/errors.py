"""Exception types shared across the package."""


class CadpError(Exception):
    """Base class for all package errors."""


class ShapeError(CadpError):
    """An operation received tensors with incompatible shapes."""

    def __init__(self, op: str, message: str):
        super().__init__(f"{op}: {message}")
        self.op = op


class NumericalError(CadpError):
    """A computation produced non-finite values or was aborted for numerical reasons."""

    def __init__(self, message: str, op: str | None = None, node: int | None = None):
        detail = message
        if op is not None:
            detail = f"{op}: {detail}"
        if node is not None:
            detail = f"{detail} (node {node})"
        super().__init__(detail)
        self.op = op
        self.node = node


class UsageError(CadpError):
    """An API was called in an unsupported way (wrong order, wrong kind of argument)."""


class OracleInvalidError(CadpError):
    """The finite-difference oracle detected a non-deterministic loss function."""


class ConfigError(CadpError):
    """A config file or preset could not be parsed or validated."""


class DataFormatError(CadpError):
    """An input data file is malformed (bad magic, truncation, count mismatch)."""


class CheckpointError(CadpError):
    """Base class for checkpoint problems."""


class CheckpointFormatError(CheckpointError):
    """Checkpoint file is not in the expected binary format or is truncated."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint file has an unsupported format version."""


class ArchitectureMismatchError(CheckpointError):
    """Checkpoint architecture hash does not match the expected architecture."""
