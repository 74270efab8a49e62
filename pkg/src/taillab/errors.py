"""Exception types shared across the package."""

from __future__ import annotations


class NotPositiveSemidefiniteError(ValueError):
    """A covariance could not be factored even at the largest jitter."""


class EmbeddingParseError(ValueError):
    """An embedding file is malformed; carries the byte offset of the fault."""

    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


class CheckpointError(ValueError):
    """A model checkpoint is malformed or of an unsupported version."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss; carries the offending epoch."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch


class ConfigError(ValueError):
    """A run configuration value or key is invalid; carries the key name."""

    def __init__(self, message: str, key: str | None = None):
        super().__init__(message)
        self.key = key
