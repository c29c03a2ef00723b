"""Exception types shared across the package."""


class DilamError(Exception):
    """Base class for all library errors."""

    code = "error"


class DimensionError(DilamError, ValueError):
    code = "dimension"


class NonFiniteError(DilamError, ArithmeticError):
    code = "non-finite"


class GraphError(DilamError, RuntimeError):
    code = "graph"


class ConfigError(DilamError, ValueError):
    code = "config"


class DataError(DilamError, ValueError):
    code = "data"


class ContainerError(DilamError):
    """Problems reading or writing the binary artifact container."""

    code = "container"


class VersionMismatchError(ContainerError):
    code = "version-mismatch"


class TruncatedFileError(ContainerError):
    code = "truncated"


class CorruptFileError(ContainerError):
    code = "corrupt"


class ChecksumMismatchError(DilamError):
    """An artifact was produced for a different frozen backbone."""

    code = "checksum-mismatch"


class UnknownTaskError(DilamError, KeyError):
    code = "unknown-task"


class StageError(DilamError, RuntimeError):
    """A pipeline stage failed; carries the stage name."""

    code = "stage"

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause!r}")
        self.stage = stage
        self.cause = cause
