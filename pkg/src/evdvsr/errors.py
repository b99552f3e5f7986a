"""Exception types shared across the package."""


class EvdvsrError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(EvdvsrError, ValueError):
    """An operation received inputs violating its preconditions."""


class ConfigError(EvdvsrError, ValueError):
    """A config file or override is malformed or references unknown keys."""


class DataError(EvdvsrError, ValueError):
    """An on-disk dataset, event file, or log is missing or inconsistent."""


class TrainingDivergenceError(EvdvsrError, RuntimeError):
    """The training loss became non-finite.

    Carries the iteration index at which divergence was detected.
    """

    def __init__(self, iteration: int, message: str = ""):
        self.iteration = iteration
        super().__init__(message or f"non-finite loss at iteration {iteration}")
