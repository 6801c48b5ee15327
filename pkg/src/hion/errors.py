class HionError(Exception):
    """Base class for errors raised by this package."""


class NumericOverflowError(HionError, ArithmeticError):
    """A computation produced inf or NaN."""


class SingularityError(HionError, ZeroDivisionError):
    """Division by a jet whose value is zero."""


class ConfigError(HionError, ValueError):
    """A config or checkpoint failed validation; ``field`` names the culprit."""

    def __init__(self, message: str, field: str | None = None):
        super().__init__(message)
        self.field = field


class TrainingAborted(HionError, RuntimeError):
    """An epoch produced a non-finite loss; parameters were rolled back."""

    def __init__(self, message: str, breakdown=None):
        super().__init__(message)
        self.breakdown = breakdown


class SimulationAborted(HionError, RuntimeError):
    """The plant state went non-finite; ``trajectory`` holds the good rows."""

    def __init__(self, message: str, trajectory=None):
        super().__init__(message)
        self.trajectory = trajectory
