"""Exception hierarchy shared by every ceskd module."""


class CESKDError(Exception):
    """Base class for all errors raised by this package."""


class ConfigurationError(CESKDError, ValueError):
    """Invalid model, pool or run configuration."""


class DomainError(CESKDError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class StateError(CESKDError, RuntimeError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class NonFiniteError(CESKDError, FloatingPointError):
    """NaN or Inf encountered in a loss or gradient."""


class DataError(CESKDError, ValueError):
    """Dataset contents violate a domain constraint (labels, values)."""


class ParseError(DataError):
    """Malformed binary or text input.

    ``offset`` is the byte offset (binary formats) or line number (text
    formats) where parsing failed, when known.
    """

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at offset {offset})"
        super().__init__(message)
        self.offset = offset


class CheckpointError(CESKDError):
    """Checkpoint file is corrupt, from another format version, or incompatible."""


class ConfigError(ConfigurationError):
    """Experiment config file error; carries the 1-based line number."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class MissingArtifactError(CESKDError):
    """An upstream artifact (curriculum, checkpoint) needed by a command is absent."""
