"""
Domain exceptions for utap-lab
Every error carries the process exit code of its category
"""


class UtapLabError(Exception):
    """Base class for all expected failures"""

    exit_code = 1


class ConfigError(UtapLabError):
    """Unknown key, unparsable value or violated configuration invariant"""

    exit_code = 2

    def __init__(self, message: str, line: int = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class ShapeError(UtapLabError, ValueError):
    """Tensor, image or probe dimensions do not agree"""

    exit_code = 3


class FormatError(UtapLabError):
    """Malformed or truncated binary file"""

    exit_code = 4


class PrerequisiteError(UtapLabError):
    """An artifact produced by another experiment is missing"""

    exit_code = 5

    def __init__(self, artifact: str, producer: str):
        self.artifact = artifact
        self.producer = producer
        super().__init__(f"missing {artifact}; run the '{producer}' experiment first")


class DivergenceError(UtapLabError):
    """Loss became NaN or infinite during an optimization loop"""

    exit_code = 6

    def __init__(self, what: str, iteration: int, value: float):
        self.iteration = iteration
        super().__init__(f"{what} diverged at iteration {iteration} (loss={value})")


class DatasetError(UtapLabError, ValueError):
    """Dataset is degenerate for the requested operation"""

    exit_code = 7


class PoolError(UtapLabError, ValueError):
    """Model pool membership is inconsistent"""

    exit_code = 8
