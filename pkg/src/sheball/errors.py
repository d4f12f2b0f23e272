"""Exception types shared across the package."""


class DomainError(ValueError):
    """Argument outside the domain of a kernel or operator."""


class NotPSDError(RuntimeError):
    """A covariance matrix or embedding failed a definiteness check."""


class DegeneracyError(RuntimeError):
    """Splitting population collapsed (tied scores or stalled levels)."""


class SchemaError(ValueError):
    """Experiment configuration failed validation.

    The message starts with the dotted field path of the offending entry.
    """


class SolverError(RuntimeError):
    """Numerical failure in a time stepper."""

    def __init__(self, msg, step=None):
        super().__init__(msg if step is None else f"{msg} (step {step})")
        self.step = step
