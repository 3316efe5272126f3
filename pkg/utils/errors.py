"""
Exception types shared across the ganaug modules
"""
from typing import Any, Dict, Optional


class GanAugError(Exception):
    """Base class for every error raised on purpose by ganaug"""
    pass


class ConfigError(GanAugError):
    """Invalid configuration, override or command line usage"""

    def __init__(self, message: str, key: Optional[str] = None):
        super().__init__(message)
        self.key = key


class ManifestError(GanAugError):
    """A manifest file could not be read or violates its invariants"""

    def __init__(self, message: str, row: Optional[int] = None, path: Optional[str] = None):
        if row is not None:
            message = f"row {row}: {message}"
        super().__init__(message)
        self.row = row
        self.path = path


class ImageError(GanAugError, ValueError):
    """Unusable image data (empty, non-finite, unsupported layout)"""
    pass


class InputError(GanAugError, ValueError):
    """Arguments that break an operation's preconditions"""
    pass


class ShapeMismatchError(GanAugError, ValueError):
    """Tensor or image shapes that do not fit together"""
    pass


class NonFiniteError(GanAugError):
    """NaN or Inf showed up in a loss, activation or generated image"""

    def __init__(self, message: str, step: Optional[int] = None,
                 components: Optional[Dict[str, Any]] = None):
        if step is not None:
            message = f"step {step}: {message}"
        if components:
            detail = ", ".join(f"{k}={v}" for k, v in components.items())
            message = f"{message} ({detail})"
        super().__init__(message)
        self.step = step
        self.components = components or {}


class CheckpointError(GanAugError):
    """Checkpoint container is truncated, foreign or from another format version"""
    pass


class StageError(GanAugError):
    """An experiment stage failed; the original exception is chained"""

    def __init__(self, stage: str, message: str):
        super().__init__(f"stage '{stage}' failed: {message}")
        self.stage = stage


class LockError(GanAugError):
    """The experiment directory is owned by another live process"""
    pass
