"""Exception hierarchy.

The CLI maps the three families onto exit codes: configuration problems
exit with 2, data problems with 3 and numerical failures with 4.
"""


class NonignorableError(Exception):
    """Base class for every error raised by the package."""


class ConfigurationError(NonignorableError, ValueError):
    pass


class DataError(NonignorableError, ValueError):
    pass


class MissingOutcomeError(DataError):
    """Raised when y is read from a record with r = 0."""


class OracleUnavailable(DataError):
    """The full-data mean needs latent outcomes that real data never carry."""


class NumericalError(NonignorableError, ArithmeticError):
    pass


class EmptyNeighborhood(NumericalError):
    """Every kernel weight at a query point is zero."""


class DegenerateConditional(NumericalError):
    pass


class NotFitted(NonignorableError, RuntimeError):
    pass


class SingularJacobian(NumericalError):
    pass


class BootstrapUnstable(NumericalError):
    pass


class NoConvergence(NumericalError):
    """Root finding stopped without meeting the residual tolerance.

    The last iterate and its residual norm are kept for diagnostics.
    """

    def __init__(self, message, last=None, residual_norm=None, iterations=None):
        super().__init__(message)
        self.last = last
        self.residual_norm = residual_norm
        self.iterations = iterations
