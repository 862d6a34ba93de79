from typing import Optional


class OverlapBenchError(Exception):
    """Base class for every error raised by overlap-bench."""

    exit_code: int = 1


class UsageError(OverlapBenchError, ValueError):
    """Bad command-line usage or an unreadable configuration file."""

    exit_code = 1


class ConfigError(UsageError):
    """A run configuration violates the v1 schema."""


class ShapeError(OverlapBenchError, ValueError):
    """Tensor dimensions do not agree."""

    exit_code = 2


class DataFormatError(OverlapBenchError, ValueError):
    """Input files or bundles are malformed."""

    exit_code = 2


class PartitionError(DataFormatError):
    """A dataset cannot be split according to an overlap spec."""


class NumericError(OverlapBenchError, ArithmeticError):
    """NaN or Inf appeared in a forward result or gradient."""

    exit_code = 3


class TrainingError(NumericError):
    """Training diverged or produced a non-finite gradient."""


class BackwardError(OverlapBenchError, RuntimeError):
    """Reverse pass requested in a way the tape cannot honor."""

    exit_code = 1


class CellError(OverlapBenchError):
    """A grid cell failed; carries the cell coordinates and the original error."""

    def __init__(self, o: int, p: float, rep: int, cause: Exception):
        super().__init__(f"cell (o={o}, p={p}, rep={rep}) failed: {cause}")
        self.o = o
        self.p = p
        self.rep = rep
        self.cause = cause
        self.exit_code = getattr(cause, "exit_code", 1)


def exit_code_for(error: BaseException) -> Optional[int]:
    """Map an exception to the CLI exit code contract, None for foreign errors."""
    if isinstance(error, OverlapBenchError):
        return error.exit_code
    return None
