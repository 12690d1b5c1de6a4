"""Exception hierarchy shared by every LQELab package."""


class LqeError(Exception):
    """Base class for all LQELab errors."""


class InvalidInputError(LqeError, ValueError):
    """An input value violates the contract of the operation."""


class InvalidArgumentError(LqeError, ValueError):
    """A configuration argument (k, threshold, ...) is out of range."""


class StaleCacheError(LqeError, RuntimeError):
    """A backward pass was handed a cache produced by different parameters."""


class UndefinedCorrelationError(LqeError, ValueError):
    """Correlation requested on a series with zero variance or too few samples."""


class GenerationError(LqeError, RuntimeError):
    """Scene generation could not place objects within the retry budget."""


class SceneSchemaError(LqeError, ValueError):
    """A serialized scene document does not match the documented schema."""


class CheckpointError(LqeError, ValueError):
    """A checkpoint is unreadable or incompatible with the requested use."""


class ConfigError(LqeError, ValueError):
    """Unknown or invalid configuration key. The message names the key."""


class TrainingDivergedError(LqeError, RuntimeError):
    """Training hit a non-finite loss.

    Carries the last parameters that produced a finite loss and the log
    recorded up to that point, so callers can still persist them.
    """

    def __init__(self, message: str, last_good=None, log=None, step: int = -1):
        super().__init__(message)
        self.last_good = last_good
        self.log = log
        self.step = step
