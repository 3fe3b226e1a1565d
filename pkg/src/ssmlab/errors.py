class SSMLabError(Exception):
    pass


class ConfigurationError(SSMLabError, ValueError):
    """Invalid scheme parameters, config keys or incompatible options."""


class DomainError(SSMLabError, ValueError):
    """An argument lies outside the mathematical domain of the operation."""


class NumericError(SSMLabError, FloatingPointError):
    """A non-finite value appeared during a computation."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step
