"""Exception hierarchy shared across the package."""


class MamlError(Exception):
    """Base class for all errors raised by mamlpp."""


class StructuralError(MamlError, ValueError):
    """Shapes, names or layouts do not fit together."""


class NumericError(MamlError, FloatingPointError):
    """A non-finite value was produced.

    ``details`` carries whatever context the raiser had (offending node,
    per-step loss breakdown, ...).
    """

    def __init__(self, message, details=None):
        super().__init__(message)
        self.details = dict(details or {})


class DataError(MamlError):
    """Dataset ingestion failed."""


class SamplingError(DataError):
    """An episode could not be drawn from the requested pool section."""


class ConfigError(MamlError, ValueError):
    """Invalid experiment configuration."""


class CheckpointError(MamlError):
    """A checkpoint file could not be read."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class SelectionError(MamlError, ValueError):
    """Too few completed epochs to choose an ensemble from."""
