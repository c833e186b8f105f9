"""Exception types shared across the package."""


class ConfigurationError(ValueError):
    """Invalid experiment configuration (bad key, divisibility, range)."""


class FormatError(ValueError):
    """Malformed dataset or checkpoint file."""


class StateError(RuntimeError):
    """Operation invoked in a protocol state that does not support it."""
