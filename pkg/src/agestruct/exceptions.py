"""Exception hierarchy shared by all modules."""


class AgestructError(Exception):
    """Base class for package errors."""


class ModelLoadError(AgestructError):
    """A model file could not be turned into a model specification."""


class EvaluationError(AgestructError):
    """A model rule failed to evaluate at a probe point."""

    def __init__(self, name, a, x, cause=None):
        self.name = name
        self.a = a
        self.x = x
        self.cause = cause
        msg = f"rule {name!r} failed at a={a!r}, x={x!r}"
        if cause is not None:
            msg += f": {cause}"
        super().__init__(msg)


class ValidationFailed(AgestructError):
    """The model does not satisfy the hypotheses required by an operation."""

    def __init__(self, report, message=None):
        self.report = report
        failed = ", ".join(c.name for c in report.failed())
        super().__init__(message or f"model validation failed: {failed}")


class NumericalError(AgestructError):
    """A numerical procedure could not produce a trustworthy result."""


class ConvergenceError(NumericalError):
    """Fixed-point closure did not converge within the iteration budget."""

    def __init__(self, step, residual, max_iter):
        self.step = step
        self.residual = residual
        self.max_iter = max_iter
        super().__init__(
            f"fixed-point iteration did not converge at step {step} "
            f"after {max_iter} iterations (last residual {residual:.3e})"
        )


class NegativeValueError(NumericalError):
    """A quantity that must stay non-negative went below -tol."""


class BracketError(NumericalError):
    """A root bracket could not be established within the configured cap."""


class InconclusiveError(NumericalError):
    """Root counting did not stabilise; the answer is unknown."""


class EnvelopeError(AgestructError):
    """A user-supplied envelope is violated at a probe point."""

    def __init__(self, what, witness):
        self.what = what
        self.witness = witness
        super().__init__(f"{what} envelope violated at {witness}")
