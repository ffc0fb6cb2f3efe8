class IsdsError(Exception):
    """Base class of every error raised on purpose by `isds`."""


class ShapeError(IsdsError, ValueError):
    pass


class SequenceTooShortError(ShapeError):
    pass


class NumericError(IsdsError, ArithmeticError):
    pass


class DivergenceError(NumericError):
    def __init__(self, message: str, stage: str = None, epoch: int = None, step: int = None):
        self.stage = stage
        self.epoch = epoch
        self.step = step
        where = ", ".join(
            f"{k}={v}"
            for k, v in (("stage", stage), ("epoch", epoch), ("step", step))
            if v is not None
        )
        super().__init__(f"{message} ({where})" if where else message)


class GuardExceededError(IsdsError, ValueError):
    pass


class ConfigError(IsdsError, ValueError):
    def __init__(self, message: str, field: str = None):
        self.field = field
        super().__init__(f"{field}: {message}" if field else message)


class ChecksumError(IsdsError, ValueError):
    pass
