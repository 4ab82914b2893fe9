"""Exception and warning types shared across the package.

The CLI maps :class:`InputError` subclasses to exit code 1 and
:class:`NumericalError` subclasses to exit code 2.
"""


class TrialForgeError(Exception):
    """Base class for all package errors."""


class InputError(TrialForgeError):
    """Invalid user input: bad data, bad formula, bad configuration."""


class SchemaError(InputError):
    """A required column or variable is missing or mismatched."""


class ValidationError(InputError):
    """Input rows violate a dataset invariant."""


class FormulaError(InputError):
    """A model formula or predicate string could not be parsed."""


class ParameterError(InputError):
    """An argument value is outside its documented domain."""


class ConfigError(InputError):
    """A run configuration is internally inconsistent."""


class EmptyDataError(InputError):
    """No rows remain after filtering."""


class IntegrityError(TrialForgeError):
    """Internal consistency failure between pipeline stages."""


class NumericalError(TrialForgeError):
    """A numerical procedure failed in a way that cannot be recovered."""


class SingularDesignError(NumericalError):
    """The design matrix is rank deficient beyond repair."""


class StratumEmptyError(NumericalError):
    """A weight-model stratum contains no fitting rows."""


class StageError(TrialForgeError):
    """A pipeline stage failed; carries the stage name and the cause."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


class NonConvergenceWarning(UserWarning):
    """A model fit stopped before meeting its convergence criteria."""


class NumericsWarning(UserWarning):
    """A numerical guard (clamping, covariance repair) was triggered."""


class DataWarning(UserWarning):
    """The data look legal but statistically suspicious."""
