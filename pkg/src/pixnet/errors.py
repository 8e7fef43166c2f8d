"""Exception hierarchy shared by every pipeline stage."""


class PixnetError(Exception):
    """Base class for all pipeline errors."""


# imagery
class NonDivisibleGeometry(PixnetError):
    pass


class MissingTile(PixnetError):
    def __init__(self, row, col):
        super().__init__(f"tile ({row}, {col}) missing from grid")
        self.row = row
        self.col = col


class GeometryMismatch(PixnetError):
    pass


class BadMagic(PixnetError):
    pass


class TruncatedFile(PixnetError):
    pass


class DimensionOverflow(PixnetError):
    pass


# synthgen
class EventOutOfBounds(PixnetError):
    pass


class EmptyEpochList(PixnetError):
    pass


# calib
class FlatDivisionByZero(PixnetError):
    pass


class AlignmentAmbiguous(PixnetError):
    pass


class DegenerateFrame(PixnetError):
    pass


class ShiftExceedsFrame(PixnetError):
    pass


# triggers
class NonFiniteInput(PixnetError):
    pass


class InsufficientData(PixnetError):
    pass


class EmptyPeakList(PixnetError):
    pass


class SingularNormalMatrix(PixnetError):
    pass


class InsufficientOverlap(PixnetError):
    pass


# netproto
class ProtocolError(PixnetError):
    """Error carrying a wire-level error code."""

    code = "ProtocolError"


class VersionMismatch(ProtocolError):
    code = "VersionMismatch"


class ProtocolViolation(ProtocolError):
    code = "ProtocolViolation"


class UnknownWorker(ProtocolError):
    code = "UnknownWorker"


class UnknownTask(ProtocolError):
    code = "UnknownTask"


class ConfigMismatch(ProtocolError):
    code = "ConfigMismatch"


class FramingError(ProtocolError):
    code = "FramingError"


class RunAborted(PixnetError):
    pass


class BindFailure(PixnetError):
    pass


# dispatch
class CoordinateOutOfTile(PixnetError):
    pass


class IoFailure(PixnetError):
    pass


class BadPredicate(PixnetError):
    pass


class SinkUnreachable(PixnetError):
    pass
