"""Exception hierarchy shared by all gapa modules.

The CLI maps these onto exit codes: configuration/ingestion/persistence
problems exit 2, numerical and training failures exit 3.
"""


class GapaError(Exception):
    """Base class for all errors raised by this package."""


class ShapeError(GapaError):
    """Operands have incompatible dimensions."""


class NotPositiveDefiniteError(GapaError):
    """Factorization failed at every jitter level of the schedule."""


class NumericalConsistencyError(GapaError):
    """A computed quantity violates a numerical invariant (e.g. a variance
    more negative than round-off can explain)."""


class IngestionError(GapaError):
    """A data file could not be parsed."""


class ConfigurationError(GapaError):
    """Invalid user-supplied configuration or arguments."""


class TrainingError(GapaError):
    """An optimizer diverged or produced non-finite quantities."""


class PersistenceError(GapaError):
    """A model file is malformed, truncated, or has the wrong version."""


class DomainError(GapaError):
    """An input lies outside the mathematical domain of an operation."""
