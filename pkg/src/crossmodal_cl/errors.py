"""Exception types raised across the package."""


class CrossModalError(Exception):
    """Base class for every error raised by this package."""


class ZeroNormVector(CrossModalError, ValueError):
    def __init__(self, message="vector has (near) zero norm", index=None):
        if index is not None:
            message = f"{message} (row {index})"
        super().__init__(message)
        self.index = index


class DimensionMismatch(CrossModalError, ValueError):
    pass


class EmptySequence(CrossModalError, ValueError):
    pass


class BatchTooSmall(CrossModalError, ValueError):
    pass


class IndexOutOfRange(CrossModalError, IndexError):
    pass


class LabelOutOfRange(CrossModalError, ValueError):
    pass


class GraphBatchMismatch(CrossModalError, ValueError):
    pass


class StaleCache(CrossModalError, RuntimeError):
    pass


class InvalidSpec(CrossModalError, ValueError):
    pass


class InvalidConfig(CrossModalError, ValueError):
    pass


class ParseError(CrossModalError, ValueError):
    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyDataset(CrossModalError, ValueError):
    pass


class OracleUnavailable(CrossModalError, RuntimeError):
    pass


class DivergenceDetected(CrossModalError, RuntimeError):
    """Training produced a non-finite loss.

    ``last_good`` holds the parameter snapshot taken before the failing step
    and ``step`` the global step index at which it happened.
    """

    def __init__(self, message, step=None, last_good=None):
        super().__init__(message)
        self.step = step
        self.last_good = last_good
