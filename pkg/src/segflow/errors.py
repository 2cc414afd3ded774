"""Exception types shared across the package."""


class InvalidInputError(ValueError):
    """Raised when an argument violates an operator's precondition."""


class DegenerateMaskError(InvalidInputError):
    """A mask channel has (near) zero mass, so pooling over it is undefined."""


class UndefinedMetricError(ValueError):
    """A metric is undefined for the given inputs (e.g. empty ground truth)."""


class NonFiniteLossError(RuntimeError):
    """A training step produced a non-finite loss.

    ``diagnostics`` carries whatever the step knew at the time of failure.
    """

    def __init__(self, message, diagnostics=None):
        super().__init__(message)
        self.diagnostics = dict(diagnostics or {})


class ConfigError(ValueError):
    """Invalid or conflicting configuration."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read or does not match the requested config."""


class DatasetError(IOError):
    """Malformed dataset layout or unreadable file; the message names the path."""
