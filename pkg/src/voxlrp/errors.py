"""Exception types shared across the package."""


class VoxlrpError(Exception):
    """Base class for all package errors."""


class ShapeError(VoxlrpError, ValueError):
    """Tensor extents do not match what an operation requires."""


class ConfigError(VoxlrpError, ValueError):
    """Invalid model, training, or generator configuration."""


class StateError(VoxlrpError, RuntimeError):
    """Stale cache, non-finite parameters, or otherwise unusable state."""


class PreprocessError(VoxlrpError, ValueError):
    """Volume cannot be preprocessed (e.g. degenerate mask)."""


class NiftiError(VoxlrpError, ValueError):
    """Malformed NIfTI-1 file; `field` names the offending header field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class ManifestError(VoxlrpError, ValueError):
    """Malformed dataset manifest."""


class ModelFileError(VoxlrpError, ValueError):
    """Malformed or corrupted model file; `field` names the failing check."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class TrainingDiverged(VoxlrpError, RuntimeError):
    """Training aborted because the loss became non-finite."""
