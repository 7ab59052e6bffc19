"""Exception hierarchy shared across the package."""


class AsymDistillError(Exception):
    """Base class for package errors."""


class ConfigurationError(AsymDistillError, ValueError):
    """Invalid experiment, probe or dataset configuration."""


class ValidationError(AsymDistillError, ValueError):
    """Input data violates a documented contract."""


class ManifestError(AsymDistillError):
    """Manifest cannot be read or lacks data a requested pairing needs."""


class SplitError(ManifestError):
    """A source appears in more than one split."""


class ChecksumError(AsymDistillError):
    """Checkpoint bytes do not match their recorded digest."""


class ShapeMismatchError(AsymDistillError, ValueError):
    """Stored parameters do not fit the target model."""


class NonFiniteLossError(AsymDistillError, FloatingPointError):
    """Training produced a NaN or infinite loss."""

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}


class DegenerateInputError(AsymDistillError, ValueError):
    """Input has no variance where the computation requires some."""
