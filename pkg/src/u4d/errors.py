"""Shared error types for configuration, training, and persistence."""

from u4d.autodiff import ContractError, ShapeError, TapeConsumedError  # noqa: F401


class ConfigError(ValueError):
    """Invalid experiment configuration (CLI exit code 2)."""


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss (CLI exit code 3)."""


class CheckpointError(RuntimeError):
    """Checkpoint file is corrupt or incompatible (CLI exit code 4)."""
