"""Exception types shared across the package."""


class LmnError(Exception):
    """Base class for all package errors."""


class ShapeError(LmnError, ValueError):
    """Operands have incompatible dimensions."""


class ContractError(LmnError, ValueError):
    """An operation precondition was violated."""


class CorruptionError(LmnError, RuntimeError):
    """An internal invariant was breached (e.g. a shard failed to answer)."""


class DivergenceError(LmnError, RuntimeError):
    """Training produced a non-finite loss or gradient."""


class CheckpointError(LmnError, RuntimeError):
    """A checkpoint file is malformed or truncated."""
