"""Exception hierarchy. Each class carries the CLI exit code it maps to."""


class EarlySepsisError(Exception):
    exit_code = 1


class ConfigError(EarlySepsisError, ValueError):
    """Bad user input: unknown config keys, out-of-range hyperparameters."""

    exit_code = 1


class ParameterError(ConfigError):
    pass


class DataError(EarlySepsisError):
    """Cohort, file or contract violation."""

    exit_code = 2


class ContractError(DataError):
    pass


class ShapeError(ContractError, ValueError):
    pass


class CohortError(DataError):
    pass


class EvaluationError(DataError):
    pass


class NumericalError(EarlySepsisError, ArithmeticError):
    exit_code = 3


class FactorizationError(NumericalError):
    """Cholesky failed; ``pivot`` is the index of the first non-positive pivot."""

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


class ConditioningError(NumericalError):
    def __init__(self, message, encounter_id=None):
        super().__init__(message)
        self.encounter_id = encounter_id
