"""Exception and warning types shared across the package."""


class StitchError(Exception):
    """Base class for all package errors."""


class DegenerateConfiguration(StitchError):
    """The DLT system is rank-deficient (collinear or coincident points)."""


class ExcessiveCanvas(StitchError):
    """The stitching canvas grew beyond the allowed multiple of the input area."""


class ShapeMismatch(StitchError):
    pass


class BadShape(StitchError):
    pass


class AttackDiverged(StitchError):
    """An attack step produced a degenerate homography."""


class NonFiniteLoss(StitchError):
    """Raised when a training loss becomes NaN/Inf.

    ``snapshot`` carries a copy of the parameter state at the time of failure.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot


class ImageTooSmall(StitchError):
    pass


class UnpairedFile(StitchError):
    pass


class UnreadableImage(StitchError):
    pass


class BadFractions(StitchError):
    pass


class ZeroGradientWarning(UserWarning):
    """The attack gradient was identically zero; the step is a no-op."""
