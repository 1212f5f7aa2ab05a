"""Exception types shared across the package."""


class CapsNetError(Exception):
    """Base class for all package errors."""


class ConfigurationError(CapsNetError):
    """Invalid shapes, presets, or config files (exit code 1)."""


class UsageError(CapsNetError):
    """An API contract was violated by the caller (exit code 1)."""


class NumericError(CapsNetError):
    """A non-finite value was produced; carries the producing operation."""

    def __init__(self, message, op=None):
        super().__init__(message)
        self.op = op


class GenerationError(CapsNetError):
    """Synthetic sample generation could not satisfy its constraints."""


class CheckpointError(CapsNetError):
    """Checkpoint file is corrupt or does not match the run config."""
