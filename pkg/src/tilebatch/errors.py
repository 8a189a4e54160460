"""Exception hierarchy shared by every tilebatch module."""


class TileBatchError(Exception):
    """Base class for all tilebatch errors."""


class ConfigurationError(TileBatchError, ValueError):
    """Invalid strategy catalog, batch, or task description."""


class EmptyTaskError(TileBatchError, ValueError):
    """A task with zero tiles reached a path that cannot represent it."""


class EmptyBatchError(TileBatchError, ValueError):
    """Every task in the batch is empty; there is nothing to launch."""


class CapacityError(TileBatchError, OverflowError):
    """The tile prefix no longer fits the index type."""


class MappingRangeError(TileBatchError, IndexError):
    """Block index outside ``[0, total_tiles)``."""


class DispatchError(TileBatchError, LookupError):
    """No task function registered for a task's type, or a block failed."""

    def __init__(self, message, block=None):
        super().__init__(message)
        self.block = block


class RoutingError(TileBatchError, ValueError):
    """Malformed routing table."""


class VerificationFailure(TileBatchError):
    """Framework output disagrees with the reference oracle."""

    def __init__(self, message, coordinate=None, report=None):
        super().__init__(message)
        self.coordinate = coordinate
        self.report = report


class ModelError(TileBatchError, ValueError):
    """Cost model input is missing demand data or is otherwise unusable."""
