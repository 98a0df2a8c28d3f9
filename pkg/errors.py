"""
Exception hierarchy for the loop-soup laboratory

Every failure raised on purpose by the sampling, analysis and orchestration
modules derives from LoopLabError, so the command line can map it to an exit
code. Parameter problems also derive from ValueError.
"""

from typing import List, Optional


class LoopLabError(Exception):
    """Base class for all laboratory errors."""


class UnsupportedParametersError(LoopLabError, ValueError):
    """Raised for dimensions, radii or boundary modes the laboratory does not support."""


class SizeCapExceededError(LoopLabError):
    """Raised when a box is too large for the requested factorization."""


class SingularSystemError(LoopLabError):
    """Raised when a linear solve fails; cannot happen for Dirichlet killing."""


class FactorizationError(LoopLabError):
    """Raised on numerical breakdown of a Cholesky-type factorization."""


class KernelRangeError(LoopLabError):
    """Raised when a heat-kernel evaluation would overflow its guards."""


class PreconditionError(LoopLabError, ValueError):
    """Raised when an operation is called outside its domain."""


class ReplicaUnderflowError(PreconditionError):
    """Raised when an estimator is asked for too few replicas."""


class InconsistentBoxError(PreconditionError):
    """Raised when loop layers sampled on different boxes are combined."""


class NonPositiveValuesError(LoopLabError, ValueError):
    """Raised when a log-log fit receives a value that is not strictly positive."""


class InsufficientScalesError(LoopLabError, ValueError):
    """Raised when a fit or audit receives fewer scales than it needs."""


class SchemaMismatchError(LoopLabError):
    """Raised when a dump or record carries an unexpected schema."""


class StorageError(LoopLabError):
    """Raised when the record store cannot persist a batch of records."""


class UnknownFormatError(LoopLabError, ValueError):
    """Raised when a report format is not one of csv, jsonl or svg."""


class ConfigValidationError(LoopLabError):
    """
    Raised when an experiment configuration fails validation.

    The individual problems are kept so the command line can print one
    message per offending field.
    """

    def __init__(self, errors: List[str], source: Optional[str] = None):
        """
        Initialize the error.

        Args:
            errors: One message per offending field
            source: Optional path of the configuration file
        """
        self.errors = list(errors)
        self.source = source
        prefix = f"{source}: " if source else ""
        super().__init__(prefix + "; ".join(self.errors))
