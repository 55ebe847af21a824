"""Exception types shared across the package."""


class GraceError(Exception):
    """Base class for all package errors."""


class ShapeError(GraceError):
    """Operand dimensions are incompatible."""


class InputError(GraceError):
    """An argument violates a documented precondition."""


class ContractError(GraceError):
    """An API contract was violated (e.g. backward on a non-scalar root)."""


class NumericError(GraceError):
    """A non-finite value appeared where a finite one is required."""


class ConfigError(InputError):
    """Bad configuration key or value (maps to CLI exit code 2)."""


class CheckpointError(GraceError):
    """Base class for checkpoint I/O failures."""


class CheckpointFormatError(CheckpointError):
    """Corrupt header or malformed record."""


class CheckpointVersionError(CheckpointError):
    """Checkpoint format version is not supported."""


class CheckpointTruncatedError(CheckpointError):
    """File ended in the middle of a record."""
