"""Exception types shared across the package."""


class CfeditError(Exception):
    """Base class for all package errors."""


class ShapeError(CfeditError):
    """Dimension mismatch between grids, gates, alignments, or layers."""


class BoundsError(CfeditError):
    """Cell index or coordinate outside the valid grid range."""


class ModeError(CfeditError):
    """Operation requires discrete/permutation inputs but got relaxed ones."""


class UnsupportedLayerError(CfeditError):
    """Layer kind not in the fixed vocabulary, or not usable in this context."""


class TrainingError(CfeditError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class FormatError(CfeditError):
    """Malformed model bundle, IDX file, record, or config."""


class ExhaustedError(CfeditError):
    """No candidate edits remain."""
