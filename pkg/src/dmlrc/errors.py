"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class DmlRcError(Exception):
    exit_code = 4


class ConfigError(DmlRcError, ValueError):
    exit_code = 2


class DataError(DmlRcError, ValueError):
    exit_code = 3


class NumericalError(DmlRcError, ArithmeticError):
    exit_code = 4


class SingularDesignError(NumericalError):
    """Design matrix is rank deficient.

    ``block`` names the offending calibration block (constituent index) when
    raised from the calibration fit, otherwise ``None``.
    """

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class SampleSizeError(DataError):
    pass


class DegenerateVarianceError(NumericalError):
    pass


class ConvergenceError(NumericalError):
    def __init__(self, message, iterations):
        super().__init__(message)
        self.iterations = iterations


class DegenerateOrthogonalizationError(NumericalError):
    pass


class InternalConsistencyError(NumericalError):
    pass


class InfeasibleTruncationError(ConfigError):
    pass


class FoldFailure(NumericalError):
    """A cross-fitting fold failed; ``diagnostics`` holds what was computed."""

    def __init__(self, message, diagnostics):
        super().__init__(message)
        self.diagnostics = diagnostics
