"""Exception hierarchy. The CLI maps each category to an exit code."""


class Hive3DError(Exception):
    """Base class for all package errors."""


class ConfigError(Hive3DError, ValueError):
    """Invalid configuration or arguments."""


class ShapeError(Hive3DError, ValueError):
    """Tensor extents do not conform to an operator's contract."""


class TapeError(Hive3DError, RuntimeError):
    """Backward requested for a value that was not recorded on the tape."""


class NumericError(Hive3DError, ArithmeticError):
    """Non-finite values where finite ones are required."""


class ContractError(Hive3DError, ValueError):
    """A precondition on input data was violated (e.g. unsorted trace)."""


class FormatError(Hive3DError, ValueError):
    """A file is truncated or structurally malformed."""


class IntegrityError(FormatError):
    """A checksum or magic mismatch was detected while reading a file."""

    def __init__(self, message, offset=None):
        super().__init__(message if offset is None else f"{message} (offset {offset})")
        self.offset = offset


class EmptyEvaluationError(Hive3DError, ValueError):
    """A metric was requested over zero samples or a single class."""
