"""Exception types shared across the package."""


class RejectedInput(ValueError):
    """An operation received an input outside its contract."""


class RejectedConfiguration(ValueError):
    """A spec/configuration object failed validation."""


class ConfigError(RejectedConfiguration):
    """An experiment config failed validation; carries the offending field."""

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


class CalibrationError(RuntimeError):
    """Threshold calibration could not reach the target; carries the best run."""

    def __init__(self, message: str, best_arl: float, best_threshold: float):
        super().__init__(message)
        self.best_arl = best_arl
        self.best_threshold = best_threshold
