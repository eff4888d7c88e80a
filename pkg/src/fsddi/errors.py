"""Exception types raised across the simulator."""


class FsddiError(Exception):
    pass


class ConfigurationError(FsddiError, ValueError):
    """Shapes, indices or settings that do not fit together."""


class InvalidLabelError(FsddiError, ValueError):
    pass


class NumericOverflowError(FsddiError, FloatingPointError):
    def __init__(self, layer, message="non-finite value"):
        super().__init__(f"{message} in layer {layer!r}")
        self.layer = layer


class NotInClassError(FsddiError, ValueError):
    """Sample has no pixel of the requested class."""


class DegenerateGradientError(FsddiError, ArithmeticError):
    """Class-masked gradient is exactly zero and cannot be normalized."""


class DivergenceError(FsddiError, FloatingPointError):
    def __init__(self, message, client=None, batch=None, round=None):
        super().__init__(message)
        self.client = client
        self.batch = batch
        self.round = round


class ProtocolError(FsddiError, ValueError):
    """Client messages disagree with what the server expects."""


class StageError(FsddiError, RuntimeError):
    def __init__(self, stage, cause):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause
