"""Exception hierarchy.

Two families exist because the command-line front end maps them to
different exit codes: :class:`IdiError` covers statistical or pipeline
failures (exit 1) and :class:`InputError` covers malformed files and
configuration (exit 2).
"""


class IdiError(Exception):
    """Base class for estimation and pipeline failures."""

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self)}


class EmptyRiskSetError(IdiError):
    """An event occurred at a time where the weighted risk set is empty."""

    def __init__(self, time, message=None):
        self.time = float(time)
        super().__init__(message or f"empty risk set at event time t={self.time!r}")


class SeparationError(IdiError):
    """Coefficient divergence (monotone likelihood / complete separation)."""


class NonIdentifiableError(IdiError):
    """A covariate column carries no information (constant)."""


class DegenerateWeightError(IdiError):
    """A weight would be infinite or undefined."""


class EmptyGroupError(IdiError):
    """A required group is empty."""


class StepError(IdiError):
    """Failure inside one labelled step of the IDI pipeline."""

    def __init__(self, step, cause):
        self.step = step
        self.cause = cause
        super().__init__(f"[{step}] {type(cause).__name__}: {cause}")

    def to_dict(self):
        out = super().to_dict()
        out["step"] = self.step
        out["cause"] = type(self.cause).__name__
        return out


class BootstrapFailure(IdiError):
    """Too many bootstrap replicates failed."""

    def __init__(self, n_failed, n_total, messages=()):
        self.n_failed = n_failed
        self.n_total = n_total
        self.messages = list(messages)
        super().__init__(
            f"{n_failed} of {n_total} bootstrap replicates failed "
            f"(limit 5%); first error: {self.messages[0] if self.messages else 'n/a'}"
        )


class StudyFailure(IdiError):
    """Too many Monte Carlo replicates failed for some method."""


class InputError(Exception):
    """Malformed input file or configuration."""

    def to_dict(self):
        return {"error": type(self).__name__, "message": str(self)}


class CohortFormatError(InputError):
    pass


class ConfigError(InputError):
    pass


class ConvergenceWarning(UserWarning):
    pass
