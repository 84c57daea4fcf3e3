class GMUError(Exception):
    """Base class for all package errors."""


class DataError(GMUError):
    pass


class AnnotationError(DataError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class FeatureFormatError(DataError):
    """Bad magic or unsupported version in a feature file."""


class FeatureTruncatedError(DataError):
    pass


class NonFiniteFeatureError(DataError):
    pass


class ConfigMismatchError(DataError):
    pass


class DegenerateBatchError(GMUError):
    """Boundary labels in a batch are all positive or all negative."""


class NumericError(GMUError):
    def __init__(self, message: str, batch_id: int | None = None):
        self.batch_id = batch_id
        super().__init__(message)
