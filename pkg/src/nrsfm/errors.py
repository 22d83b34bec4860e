"""Exception hierarchy.

Every error carries an ``exit_code`` so the command line can map failures to
a stable set of process exit codes without inspecting messages.
"""


class NRSFMError(Exception):
    """Base class for all package errors."""

    exit_code = 1

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step

    def __str__(self):
        msg = super().__str__()
        if self.step is not None:
            return f"step {self.step}: {msg}"
        return msg


class TrackingFormatError(NRSFMError, ValueError):
    """Malformed TRK file; the message names the offending line."""

    exit_code = 3

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class PreconditionError(NRSFMError, ValueError):
    """An operation was called on input it does not accept."""

    exit_code = 4


class SolvabilityError(NRSFMError):
    """A frame or point has too few observations for the requested rank."""

    exit_code = 4


class StatisticsError(NRSFMError):
    """Too few residuals to estimate a robust scale."""

    exit_code = 4


class DegenerateFrameError(NRSFMError):
    """A frame carries no usable information (no observations, zero motion)."""

    exit_code = 5


class DegenerateMotionError(NRSFMError):
    """The metric constraints do not pin down the upgrade."""

    exit_code = 5


class AlignmentError(NRSFMError):
    """Similarity alignment against a degenerate point set."""

    exit_code = 5


class OverRejectionError(NRSFMError):
    """Outlier rejection left the problem unsolvable."""

    exit_code = 6
