"""Exception types shared across the package."""


class KoopctlError(Exception):
    """Base class for package errors."""


class SequencingError(KoopctlError):
    """A pushed snapshot does not continue the time-index stream."""


class CapacityError(KoopctlError):
    """Not enough snapshots retained for the requested operation."""


class NotReadyError(KoopctlError):
    """Fewer than b new snapshots are available for an update batch."""


class RankError(KoopctlError):
    """A data matrix failed its full-row-rank precondition."""

    def __init__(self, message, numerical_rank=None, tol=None):
        super().__init__(message)
        self.numerical_rank = numerical_rank
        self.tol = tol


class TrainingError(KoopctlError):
    """Initial training aborted; carries the offending epoch."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch


class IntegrationError(KoopctlError):
    """Non-finite values encountered while stepping a plant."""


class FeasibilityError(KoopctlError):
    """An iterative update was attempted on an infeasible batch."""


class ControlAbort(KoopctlError):
    """The closed loop exceeded its certificate-reuse budget."""
