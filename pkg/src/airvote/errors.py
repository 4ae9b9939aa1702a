"""Exception types shared across the simulator."""


class IDXFormatError(ValueError):
    """An IDX file carries the wrong magic number or a malformed header."""


class ConsistencyError(ValueError):
    """Two inputs that must agree (e.g. image and label counts) do not."""


class TruncatedFileError(OSError):
    """A binary file ended before the size announced by its header."""


class DegenerateChannelError(RuntimeError):
    """A fading coefficient is exactly zero, so channel inversion is undefined."""


class ConfigError(ValueError):
    """An experiment configuration is invalid or self-contradictory."""


class InvalidRegimeError(ValueError):
    """Bound parameters fall outside the regime where the bound is stated."""
