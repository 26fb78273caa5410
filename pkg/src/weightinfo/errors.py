"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Array dimensions inconsistent with the declared architecture."""


class ConfigError(ValueError):
    """Invalid configuration value or unknown configuration key."""


class ParseError(ValueError):
    """Malformed on-disk artifact (IDX file, metrics CSV, config JSON)."""


class CapacityError(RuntimeError):
    """A dense-matrix path was requested above its dimension guard."""


class NumericError(RuntimeError):
    """Non-finite intermediate, singular matrix, or failed factorization."""


class ConvergenceError(NumericError):
    """An oracle retraining loop did not reach its gradient tolerance."""


class DivergenceError(RuntimeError):
    """Training loss or energy became non-finite.

    Carries whatever partial results were accumulated before the abort so
    callers can persist them for post-mortem.
    """

    def __init__(self, message, iteration=None, metrics=None, estimates=None, last_params=None):
        super().__init__(message)
        self.iteration = iteration
        self.metrics = metrics if metrics is not None else []
        self.estimates = estimates if estimates is not None else []
        self.last_params = last_params
