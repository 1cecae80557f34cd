"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration or hyperparameter combination."""


class DataError(RuntimeError):
    """A dataset file is missing or holds invalid content."""


class ContractError(ValueError):
    """A function was called with arguments violating its contract."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read or does not match the model."""


class NumericalAbort(RuntimeError):
    """Raised when a training loss becomes non-finite.

    ``terms`` holds the per-term loss values at the failing step.
    """

    def __init__(self, message, terms=None):
        super().__init__(message)
        self.terms = dict(terms or {})
