"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class DataFormatError(ValueError):
    """Malformed input data (carries file/line context in the message)."""


class EmptyDatasetError(ValueError):
    """A filter or load step produced a dataset with no interactions."""


class NumericError(ArithmeticError):
    """A computation produced a non-finite value."""
