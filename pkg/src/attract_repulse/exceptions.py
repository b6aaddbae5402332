"""Exception and warning types raised across the package."""


class InvalidInputError(ValueError):
    """An argument violates a documented precondition."""


class FormatError(ValueError):
    """A data file does not follow its declared on-disk layout."""


class CheckpointError(RuntimeError):
    """A checkpoint could not be read back faithfully."""


class NonFiniteLossError(FloatingPointError):
    """Training produced a NaN/inf loss or gradient.

    ``record`` holds whatever is needed to replay the offending batch
    (step, batch seed, loss breakdown).
    """

    def __init__(self, message, record=None):
        super().__init__(message)
        self.record = record or {}


class EmptyPositiveSetWarning(UserWarning):
    """At least one anchor had no positive partner and was skipped."""
