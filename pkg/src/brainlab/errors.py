"""Exception hierarchy shared by every module."""


class BrainLabError(Exception):
    """Base class for all errors raised by this package."""


class InvalidInputError(BrainLabError, ValueError):
    pass


class InvalidOutcomeError(InvalidInputError):
    """An outcome does not belong to the policy family's outcome space."""


class NotEnumerableError(BrainLabError):
    """Exhaustive enumeration is impossible or exceeds the configured cap."""


class SupportError(BrainLabError, ValueError):
    """A support-containment requirement between distributions is violated."""


class UnsupportedError(BrainLabError):
    """The requested quantity is not provided by this model kind."""


class ConfigError(BrainLabError, ValueError):
    pass


class DivergenceError(BrainLabError, FloatingPointError):
    """A loss or gradient became non-finite during optimization."""

    def __init__(self, message: str, step: int | None = None):
        super().__init__(message if step is None else f"step {step}: {message}")
        self.step = step
