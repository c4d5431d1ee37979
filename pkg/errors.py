"""Exception hierarchy shared by every module; main.py maps it to exit codes."""


class LabError(Exception):
    exit_code = 1


class ParameterError(LabError, ValueError):
    exit_code = 2


class GridMismatchError(ParameterError):
    pass


class SizeCapError(ParameterError):
    pass


class ConfigError(LabError):
    exit_code = 2


class ConvergenceError(LabError):
    """Raised when an eigensolve misses its residual target.

    ``residuals`` holds the best residuals reached so callers can log or
    persist them alongside a partial manifest.
    """

    exit_code = 3

    def __init__(self, message: str, residuals=None, iterations: int = 0):
        super().__init__(message)
        self.residuals = [] if residuals is None else list(residuals)
        self.iterations = iterations
