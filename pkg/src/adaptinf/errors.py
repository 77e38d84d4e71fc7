"""Exception hierarchy shared across the package."""


class AdaptInfError(Exception):
    """Base class for all package errors."""


class InvalidMatrixError(AdaptInfError, ValueError):
    """Matrix is not symmetric or has non-finite entries."""


class DomainError(AdaptInfError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class IngestionError(AdaptInfError, ValueError):
    """Feature data could not be loaded or is malformed."""


class DegenerateNoiseError(AdaptInfError, ValueError):
    """Outcome noise variance is not strictly positive."""


class FloorViolationError(AdaptInfError, ValueError):
    """A logged propensity is zero or below its declared floor."""


class SolverError(AdaptInfError, RuntimeError):
    """Root finder failed to converge.

    Attributes
    ----------
    residual : float
        Sup-norm of the (scaled) score residual at the last iterate.
    iterations : int
        Number of Newton iterations performed.
    """

    def __init__(self, message: str, residual: float, iterations: int):
        super().__init__(f"{message} (residual={residual:.3e}, iterations={iterations})")
        self.residual = residual
        self.iterations = iterations


class ConfigError(AdaptInfError, ValueError):
    """Invalid experiment configuration.

    The message carries the dotted key path and, when known, the line in the
    source file.
    """

    def __init__(self, message: str, key: str | None = None, line: int | None = None):
        where = ""
        if key:
            where += f"{key}: "
        if line is not None:
            where = f"line {line}: " + where
        super().__init__(where + message)
        self.key = key
        self.line = line
