"""Exception types shared across the package."""


class NumericError(RuntimeError):
    """A computation produced a non-finite value.

    Carries the diffusion timestep at which the value went bad when known.
    """

    def __init__(self, message, t=None):
        super().__init__(message)
        self.t = t


class IntegrityError(Exception):
    """A stored artifact does not match its recorded content hash."""


class StageIncompleteError(RuntimeError):
    """An edit-session operation was requested before its prerequisite stage ran."""


class TrainingFailure(RuntimeError):
    """A trained component missed its quality floor."""
