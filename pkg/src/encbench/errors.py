"""Exception hierarchy shared across the package."""


class EncbenchError(Exception):
    """Base class for all package errors."""


class DimensionError(EncbenchError, ValueError):
    """Tensor or image shapes are incompatible with an operation."""


class InputError(EncbenchError, ValueError):
    """An argument value is outside the accepted domain."""


class StateError(EncbenchError, RuntimeError):
    """An object is in the wrong state for the requested call."""


class ConfigError(EncbenchError, ValueError):
    """A configuration is invalid or incomplete."""


class FormatError(EncbenchError, ValueError):
    """A serialized file or document could not be decoded."""


class KeyFormatError(FormatError):
    """Key document is not well-formed JSON or lacks fields."""


class KeyLengthError(FormatError):
    """Key arrays do not have the length implied by the block size."""


class NonBijectiveError(FormatError):
    """Key permutation is not a bijection."""


class AttackError(EncbenchError, RuntimeError):
    """The attack loss became non-finite."""

    def __init__(self, message: str, iteration: int):
        super().__init__(f"{message} (iteration {iteration})")
        self.iteration = iteration


class TrainingError(EncbenchError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int, batch: int):
        super().__init__(f"{message} (epoch {epoch}, batch {batch})")
        self.epoch = epoch
        self.batch = batch
