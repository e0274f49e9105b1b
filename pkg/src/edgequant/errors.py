"""Exception types shared across the toolkit."""


class EdgeQuantError(Exception):
    """Base class for all toolkit errors."""


class InvalidArgumentError(EdgeQuantError, ValueError):
    pass


class InvalidStateError(EdgeQuantError):
    """Operation not allowed in the object's current state (e.g. re-quantizing)."""


class UnsupportedPatternError(EdgeQuantError):
    pass


class CalibrationRequiredError(EdgeQuantError):
    pass


class CalibrationIncompleteError(CalibrationRequiredError):
    def __init__(self, tensor_id: str):
        super().__init__(f"calibration stats missing for tensor '{tensor_id}'")
        self.tensor_id = tensor_id


class ContainerError(EdgeQuantError):
    """Malformed model container."""


class BadMagicError(ContainerError):
    pass


class TruncatedPayloadError(ContainerError):
    pass


class LengthMismatchError(ContainerError):
    pass


class ImageFormatError(EdgeQuantError):
    pass


class TrainingDivergedError(EdgeQuantError):
    pass


class NoFeasibleModelError(EdgeQuantError):
    def __init__(self, message: str, near_miss=None):
        super().__init__(message)
        self.near_miss = near_miss
