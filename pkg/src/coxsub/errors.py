"""Exception types shared across the package."""


class CoxSubError(Exception):
    """Base class for all coxsub failures.

    ``stage`` is set by orchestration code (e.g. the end-to-end subsampling
    driver) to record which pipeline stage raised.
    """

    stage: str | None = None

    def __str__(self) -> str:  # noqa: D105
        base = super().__str__()
        if self.stage:
            return f"[{self.stage}] {base}"
        return base


class DataError(CoxSubError):
    """Invalid or unparseable input data."""


class EstimationError(CoxSubError):
    """An estimation routine could not produce a result."""


class SingularHessianError(EstimationError):
    """The (weighted) information matrix is not positive definite."""


class ConvergenceError(EstimationError):
    """Newton iteration failed to converge.

    Carries the last iterate and the per-iteration log-likelihood trace so
    callers can diagnose or restart.
    """

    def __init__(self, message, beta=None, score_norm=None, iterations=None, trace=None):
        super().__init__(message)
        self.beta = beta
        self.score_norm = score_norm
        self.iterations = iterations
        self.trace = list(trace) if trace is not None else []


class PilotError(EstimationError):
    """All pilot-sample fitting attempts failed."""


class DegenerateStratumError(CoxSubError):
    """A sampling stratum has no usable probability mass."""


class CalibrationError(CoxSubError):
    """Censoring-rate calibration could not bracket the target."""
