"""Exception hierarchy shared across the package."""


class PreobsError(Exception):
    """Base class for all errors raised by this package."""


class IntegrationDivergedError(PreobsError):
    """A fixed-step integration produced a non-finite value.

    Carries the offending step index and time so callers can locate the
    blow-up in long horizons.
    """

    def __init__(self, step: int, t: float):
        self.step = step
        self.t = t
        super().__init__(f"integration diverged at step {step} (t = {t:.6g}): non-finite value")


class AngleNearPiError(PreobsError):
    """Rotation logarithm requested too close to the pi-angle cut."""


class ProjectionFailedError(PreobsError):
    """Orthogonal projection onto SO(3) is degenerate (singular input)."""


class InvalidCovarianceError(PreobsError):
    """A covariance matrix is not symmetric positive semidefinite."""


class RankDeficientError(PreobsError):
    """A least-squares problem does not determine its unknowns.

    ``nullspace_dim`` is the number of undetermined directions.
    """

    def __init__(self, nullspace_dim: int, message: str = ""):
        self.nullspace_dim = nullspace_dim
        msg = message or "least-squares problem is rank deficient"
        super().__init__(f"{msg} (nullspace dimension {nullspace_dim})")


class UnsupportedFeedforwardError(PreobsError):
    """Noise-weighted estimation requires a system without feedforward (D = 0)."""


class ObserverStepError(PreobsError):
    """A discrete observer update failed; carries diagnostics."""

    def __init__(self, message: str, diagnostics: dict | None = None):
        self.diagnostics = diagnostics or {}
        super().__init__(message)


class NoConvergenceError(PreobsError):
    """An iterative solver stopped without meeting its decrease criterion."""

    def __init__(self, message: str, final_cost: float):
        self.final_cost = final_cost
        super().__init__(f"{message} (final cost {final_cost:.6g})")


class ScenarioError(PreobsError):
    """A scenario file failed to parse or validate.

    ``field`` names the offending entry when known.
    """

    def __init__(self, message: str, field: str | None = None):
        self.field = field
        if field:
            message = f"{field}: {message}"
        super().__init__(message)
