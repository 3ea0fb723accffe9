"""
Exception hierarchy shared by every engine.

The CLI maps these onto exit codes: ConfigError -> 2, any other UbdError -> 3.
"""
from typing import Optional, Sequence


class UbdError(Exception):
    """Base class for all lab errors."""


class ShapeError(UbdError):
    """Operands do not conform to an op's arity rules."""

    def __init__(self, op: str, message: str, dims: Optional[Sequence] = None):
        self.op = op
        self.dims = tuple(dims) if dims is not None else ()
        detail = f" (dims: {', '.join(str(d) for d in self.dims)})" if self.dims else ""
        super().__init__(f"{op}: {message}{detail}")


class NonFiniteError(UbdError):
    """NaN or Inf produced by an op."""

    def __init__(self, op: str):
        self.op = op
        super().__init__(f"non-finite values produced by '{op}'")


class TapeError(UbdError):
    """Backward called on something the tape cannot differentiate."""


class DataFormatError(UbdError):
    """Corrupt or truncated UBDS file."""

    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} at byte offset {offset}")


class DatasetError(UbdError):
    """Invalid dataset request (bad spec, missing classes, too few images)."""


class ConfigError(UbdError):
    """Invalid experiment configuration."""


class StageError(UbdError):
    """A pipeline stage failed; carries the stage name."""

    def __init__(self, stage: str, cause: BaseException):
        self.stage = stage
        self.cause = cause
        super().__init__(f"stage '{stage}' failed: {cause}")
