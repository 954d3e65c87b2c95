class TokdpoError(Exception):
    """Base class for library errors."""


class InvalidTrajectory(TokdpoError, ValueError):
    pass


class InvalidState(TokdpoError, ValueError):
    pass


class PromptMismatch(TokdpoError, ValueError):
    pass


class DegeneratePair(TokdpoError, ValueError):
    pass


class EnumerationCapExceeded(TokdpoError, ValueError):
    pass


class ZeroReferenceProbability(TokdpoError, ValueError):
    pass


class InvalidPotential(TokdpoError, ValueError):
    pass


class MissingEntry(TokdpoError, KeyError):
    pass


class ConvergenceError(TokdpoError, RuntimeError):
    pass


class TrainingDiverged(TokdpoError, RuntimeError):
    """Raised when a loss turns non-finite.

    ``last_good`` holds the parameters from the last finite step.
    """

    def __init__(self, message, last_good=None, step=None):
        super().__init__(message)
        self.last_good = last_good
        self.step = step


class CheckpointError(TokdpoError, ValueError):
    pass
