"""Exception types raised across the package."""


class InvalidParameterError(ValueError):
    """A distribution or model parameter is outside its valid domain."""


class AccuracyError(RuntimeError):
    """Numerical routine failed to reach the requested tolerance.

    The best available estimate is kept on ``estimate``.
    """

    def __init__(self, message, estimate=None, error=None):
        super().__init__(message)
        self.estimate = estimate
        self.error = error


class BracketError(ValueError):
    """Root finding was asked to search an interval without a sign change."""


class ShapeError(ValueError):
    """Array shapes do not agree with the model or with each other."""


class InvalidSplitError(ValueError):
    """Requested splitting point lies outside the allowed layer range."""


class CalibrationError(ValueError):
    """Target loss probability cannot be reached inside the shape bracket."""

    def __init__(self, message, bracket=None, bracket_probs=None):
        super().__init__(message)
        self.bracket = bracket
        self.bracket_probs = bracket_probs


class TrainingFailure(RuntimeError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, step=None):
        super().__init__(message)
        self.step = step


class SurrogateUnavailableError(RuntimeError):
    """Surrogate rewards were requested before a surrogate was fitted."""


class InvalidDatasetError(ValueError):
    """Dataset is too small or malformed for the requested fit."""
