"""Exception hierarchy. Each family maps onto one CLI exit code."""


class FusionError(Exception):
    exit_code = 1


class ConfigError(FusionError):
    exit_code = 2


class DataError(FusionError):
    exit_code = 3


class ImageDecodeError(DataError):
    pass


class ShapeError(DataError, ValueError):
    pass


class MetricError(DataError):
    """A metric could not be evaluated; ``metric`` names which one."""

    def __init__(self, metric, message):
        super().__init__(f"{metric}: {message}")
        self.metric = metric


class UndefinedCorrelationError(MetricError):
    def __init__(self, message="zero-variance operand"):
        super().__init__("SCD", message)


class WeightsError(DataError):
    pass


class CheckpointError(DataError):
    pass


class VersionError(CheckpointError):
    pass


class IntegrityError(CheckpointError):
    pass


class NumericError(FusionError):
    exit_code = 4


class NonFiniteLossError(NumericError):
    def __init__(self, step, value):
        super().__init__(f"non-finite loss {value!r} at step {step}")
        self.step = step
