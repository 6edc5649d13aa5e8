"""Exception types shared across the toolkit."""


class ParameterError(ValueError):
    """An argument violates a documented precondition (range, shape, length)."""


class DataError(ValueError):
    """Input data is structurally valid but unusable (degenerate, empty)."""


class FormatError(ValueError):
    """A serialized artifact does not match its documented on-disk format."""


class UndefinedCorrelationError(DataError):
    """Pearson correlation requested on constant input."""


class NumericalError(RuntimeError):
    """A numerical routine failed to converge or produced an invalid result."""


class SingularSystemError(NumericalError):
    """A linear system is singular; regularization is required."""


class TrainingError(RuntimeError):
    """Iterative training diverged. Carries the loss trace in ``trace``."""

    def __init__(self, message, trace=None):
        super().__init__(message)
        self.trace = trace
