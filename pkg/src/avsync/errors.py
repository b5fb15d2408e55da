"""Exception types raised across the package."""

from __future__ import annotations


class AVSyncError(Exception):
    """Base class for every error raised by avsync."""


# media
class DecodeError(AVSyncError):
    pass


class MissingAudio(AVSyncError):
    pass


class DurationMismatch(AVSyncError):
    pass


class LandmarkCountMismatch(AVSyncError, ValueError):
    pass


class DegenerateBox(AVSyncError, ValueError):
    pass


class TooShort(AVSyncError, ValueError):
    pass


class OutOfRangePerturbation(AVSyncError, ValueError):
    pass


class SpanOutOfBounds(AVSyncError, IndexError):
    pass


class LengthMismatch(AVSyncError, ValueError):
    pass


# features
class ModelLoadError(AVSyncError):
    pass


class ShapeError(AVSyncError, ValueError):
    pass


class AudioTooShort(AVSyncError, ValueError):
    pass


class AlignmentError(AVSyncError, ValueError):
    pass


class InsufficientClasses(AVSyncError, ValueError):
    pass


class NonConvergence(AVSyncError):
    pass


# metrics
class ZeroNormRow(AVSyncError, ValueError):
    """A feature row has zero norm, so cosine similarity is undefined."""

    def __init__(self, rows):
        self.rows = list(rows)
        super().__init__(f"zero-norm feature rows at timesteps {self.rows[:10]}")


class ShapeMismatch(AVSyncError, ValueError):
    pass


class ClipTooShort(AVSyncError, ValueError):
    pass


# losses / harness
class NonFiniteLoss(AVSyncError, FloatingPointError):
    def __init__(self, message, step=None):
        self.step = step
        super().__init__(message if step is None else f"{message} (step {step})")


class BackboneUnavailable(AVSyncError):
    pass


class SpecInvalid(AVSyncError, ValueError):
    pass


# probes / cli
class DegenerateCurve(AVSyncError, ValueError):
    pass


class EmptySeries(AVSyncError, ValueError):
    pass


class ManifestError(AVSyncError):
    pass
