"""Exception hierarchy shared by all modules.

Split along the CLI exit-code boundary: DataError -> 3, NumericError -> 4,
usage problems stay with argparse (exit 2).
"""


class MmcsError(Exception):
    """Base class for errors raised by this package."""


class DataError(MmcsError):
    """Bad or missing input data: files, manifests, masks, shapes, labels."""


class UnknownLabelError(DataError):
    """A label was requested that is not present in the mask."""


class EmptyDatasetError(DataError):
    """An operation that needs at least one instance/record got none."""


class ScaleRangeError(DataError):
    """A rescale factor fell outside the accepted [1/16, 16] range."""


class PlacementError(DataError):
    """Synthetic instance placement exhausted its rejection-sampling budget."""


class ManifestError(DataError):
    """Manifest file could not be parsed; carries a line number when known."""

    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class CheckpointError(DataError):
    """Checkpoint file is unreadable, corrupt, or version-mismatched."""


class NumericError(MmcsError):
    """Non-finite values where finite ones are required (e.g. NaN gradients)."""
