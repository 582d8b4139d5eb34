"""Exception types shared across the package."""


class ContractError(ValueError):
    """An operation was called with arguments violating its preconditions."""


class FormatError(ValueError):
    """A binary or text input does not match its declared format."""


class ConsistencyError(ValueError):
    """Two inputs that must agree (e.g. image/label counts) do not."""


class ConfigError(ValueError):
    """An experiment configuration is malformed or infeasible."""


class NumericDivergenceError(ArithmeticError):
    """A computation produced non-finite values."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records if records is not None else []


class SolverConvergenceError(RuntimeError):
    """The mean-field fixed-point iteration exhausted its sweep budget.

    Carries the final ``SolverReport`` so callers can inspect residuals.
    """

    def __init__(self, message, report, records=None):
        super().__init__(message)
        self.report = report
        self.records = records if records is not None else []
