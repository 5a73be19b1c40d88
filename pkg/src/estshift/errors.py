"""Exception hierarchy shared by every module.

The CLI maps the three top-level families onto exit codes:
``ConfigError`` -> 1, ``DataError`` -> 2, ``DivergenceError`` -> 3.
"""


class EstShiftError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(EstShiftError, ValueError):
    """Operand shapes or ranks do not agree."""


class DegenerateReductionError(EstShiftError, ValueError):
    def __init__(self, msg="degenerate reduction"):
        super().__init__(msg)


class NonFiniteError(EstShiftError, FloatingPointError):
    """A public operation produced NaN or Inf."""


class CacheConsumedError(EstShiftError, RuntimeError):
    def __init__(self, kind="layer"):
        super().__init__(f"{kind} backward cache already consumed")


class ModeError(EstShiftError, RuntimeError):
    """A train-only path was called in infer mode or vice versa."""


class BatchTooSmallError(EstShiftError, ValueError):
    def __init__(self, m):
        super().__init__(f"batch too small for batch statistics (m={m})")


class ConfigError(EstShiftError, ValueError):
    pass


class DataError(EstShiftError):
    pass


class BadMagicError(DataError):
    pass


class TruncatedFileError(DataError):
    pass


class CountMismatchError(DataError):
    pass


class CheckpointError(DataError):
    pass


class CheckpointMagicError(CheckpointError):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class TruncatedCheckpointError(CheckpointError):
    def __init__(self, msg="truncated checkpoint"):
        super().__init__(msg)


class DivergenceError(EstShiftError, FloatingPointError):
    """Training produced a non-finite loss."""
