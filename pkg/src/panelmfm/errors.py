class PanelMFMError(Exception):
    """Base class for package errors."""


class ConfigError(PanelMFMError, ValueError):
    """Invalid configuration or input data (CLI exit code 1)."""


class DataError(ConfigError):
    pass


class SamplerError(PanelMFMError, RuntimeError):
    """Numerical failure inside the sampler (CLI exit code 2)."""

    def __init__(self, message, iteration=None, snapshot=None):
        if iteration is not None:
            message = f"iteration {iteration}: {message}"
        super().__init__(message)
        self.iteration = iteration
        self.snapshot = snapshot
