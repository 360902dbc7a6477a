"""Exception hierarchy shared across the package.

The CLI maps these onto its exit codes, so new errors should subclass one of
the three families below rather than ``SandError`` directly.
"""

from __future__ import annotations


class SandError(Exception):
    """Base class for every error raised by this package."""


# -- usage / configuration family (exit code 1) -------------------------------


class UsageError(SandError):
    pass


class ConfigError(UsageError):
    pass


# -- data family (exit code 2) -------------------------------------------------


class DataError(SandError):
    pass


class ShapeError(DataError, ValueError):
    """Operand shapes are incompatible."""


class DegenerateRowError(DataError, ValueError):
    """A softmax row has every entry masked."""


class CapacityError(DataError):
    """Sequence longer than the model's positional table."""


class ParseError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)


class LabelError(DataError, ValueError):
    pass


class EmptyBatchError(DataError, ValueError):
    pass


class UndefinedMetricError(DataError, ValueError):
    """The metric has no value for the given labels (e.g. a single class)."""


class ChecksumError(DataError):
    pass


# -- training family (exit code 3) --------------------------------------------


class TrainingDiverged(SandError):
    """Loss or gradients became non-finite.

    ``result`` carries whatever the trainer had at the last good epoch so the
    caller can still persist it.
    """

    def __init__(self, message: str, result=None):
        super().__init__(message)
        self.result = result


class NonFiniteGradientError(TrainingDiverged):
    def __init__(self, name: str, message: str | None = None):
        self.param_name = name
        super().__init__(message or f"non-finite gradient in parameter {name!r}")
