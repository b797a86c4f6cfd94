"""Exception types shared across the package."""


class CaqaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(CaqaError, ValueError):
    """Operands with incompatible or invalid dimensions."""


class ConfigError(CaqaError, ValueError):
    """Invalid hyperparameter or configuration value."""


class CorpusError(CaqaError, ValueError):
    """Malformed dataset, embedding, or rules input."""


class CheckpointError(CaqaError, RuntimeError):
    """Unreadable, truncated, or incompatible checkpoint file."""


class DivergenceError(CaqaError, RuntimeError):
    """Training produced a non-finite loss."""

    def __init__(self, epoch: int, batch: int):
        super().__init__(f"non-finite loss at epoch {epoch}, batch {batch}")
        self.epoch = epoch
        self.batch = batch


class ReportError(CaqaError, ValueError):
    """Report inputs are empty or misaligned."""
