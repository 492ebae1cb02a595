"""Exception types shared across the package."""


class SlimfitError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(SlimfitError):
    """Tensor shapes are incompatible with the requested operation."""


class ConfigError(SlimfitError):
    """A configuration value is missing, malformed, or out of range."""


class CodecError(SlimfitError):
    """A compression codec received input it cannot encode or decode."""


class RegistryError(SlimfitError):
    """A layer id or name does not resolve against the model's registry."""


class TrainingDiverged(SlimfitError):
    """Raised when the training loss becomes non-finite.

    Carries a diagnostic snapshot of the iteration where divergence was
    detected so the caller can report it.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
