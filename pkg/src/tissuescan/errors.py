class TissueScanError(Exception):
    """Base class for all recoverable failures raised by the package."""


class BehindCameraError(TissueScanError):
    pass


class InvalidPixelError(TissueScanError):
    pass


class DegenerateGeometryError(TissueScanError):
    pass


class InsufficientTextureError(TissueScanError):
    pass


class TooFewRoisError(TissueScanError):
    pass


class NoConsensusError(TissueScanError):
    pass


class StaleTransformError(TissueScanError):
    """A control-law factor is missing or older than the stale timeout."""

    def __init__(self, name: str, age: float | None = None):
        self.name = name
        self.age = age
        detail = "missing" if age is None else f"{age:.3f} s old"
        super().__init__(f"transform {name!r} is {detail}")


class StaleEstimateError(TissueScanError):
    pass


class EndOfTrajectory(TissueScanError):
    pass


class DegenerateNormalError(TissueScanError):
    pass


class UndefinedCorrelationError(TissueScanError):
    pass
