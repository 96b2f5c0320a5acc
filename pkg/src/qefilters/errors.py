"""Exception hierarchy shared across the package.

The CLI maps these onto exit codes: usage problems exit 1, data and
configuration problems exit 2, training divergence exits 3.
"""


class QEFiltersError(Exception):
    """Base class for all package errors."""


class ConfigurationError(QEFiltersError):
    """An invalid parameter, shape, or configuration value."""


class DataError(QEFiltersError):
    """Invalid input data: bad labels, malformed files, broken invariants."""


class RangeViolationError(DataError):
    """A wavelength fell outside the declared spectral range."""


class DimensionMismatchError(DataError):
    """Array shapes that must agree do not."""


class TrainingDivergedError(QEFiltersError):
    """A non-finite loss appeared during training."""

    def __init__(self, epoch: int, message: str = ""):
        self.epoch = epoch
        super().__init__(message or f"training diverged at epoch {epoch}")
