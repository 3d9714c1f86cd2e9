"""Exception hierarchy shared across the package."""


class EgadError(Exception):
    """Base class for every error raised by egad."""


class ShapeError(EgadError, ValueError):
    pass


class NumericError(EgadError, FloatingPointError):
    """A NaN or Inf appeared where only finite values are allowed."""


class DivergenceError(NumericError):
    """Training or latent recovery produced a non-finite loss."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = list(trace or [])


class FormatError(EgadError, ValueError):
    """A file does not follow the expected binary or text layout."""


class ConfigError(EgadError, ValueError):
    pass


class DataError(EgadError, ValueError):
    pass
