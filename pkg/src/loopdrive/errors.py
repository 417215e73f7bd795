"""Exception types raised across the package."""


class LoopDriveError(Exception):
    """Base class for all package errors."""


# geometry
class DegenerateAction(LoopDriveError, ValueError):
    pass


class InvalidGrid(LoopDriveError, ValueError):
    pass


class EmptyPolyline(LoopDriveError, ValueError):
    pass


# scenarios / environment
class ParseError(LoopDriveError, ValueError):
    pass


class SchemaError(LoopDriveError, ValueError):
    """A scenario file parsed but violates an invariant; ``field`` names it."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class SteppedDoneEpisode(LoopDriveError, RuntimeError):
    pass


# policy
class ShapeMismatch(LoopDriveError, ValueError):
    pass


class NonScalarLoss(LoopDriveError, ValueError):
    pass


class VersionMismatch(LoopDriveError, ValueError):
    pass


# training
class EmptyBatch(LoopDriveError, ValueError):
    pass


class LengthMismatch(LoopDriveError, ValueError):
    pass


class MissingOldProbabilities(LoopDriveError, ValueError):
    pass


class IndexOutOfRange(LoopDriveError, IndexError):
    pass


class EmptyScenarioPool(LoopDriveError, ValueError):
    pass


# metrics
class NoSafeFrames(LoopDriveError, ValueError):
    pass


class TooFewFrames(LoopDriveError, ValueError):
    pass
