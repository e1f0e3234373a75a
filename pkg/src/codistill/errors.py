"""Exception hierarchy shared across the package."""


class CodistillError(Exception):
    """Base class for all package errors."""


class DimensionError(CodistillError, ValueError):
    pass


class ConfigError(CodistillError, ValueError):
    """Invalid configuration value or unknown key."""

    def __init__(self, message, key=None):
        super().__init__(message)
        self.key = key


class DataError(CodistillError, ValueError):
    """Non-finite or otherwise unusable input data."""


class EmptyInputError(DataError):
    pass


class InsufficientDataError(DataError):
    pass


class VocabularyError(CodistillError, IndexError):
    pass


class AlignmentError(CodistillError):
    def __init__(self, message, utt_id=None):
        if utt_id is not None:
            message = f"{utt_id}: {message}"
        super().__init__(message)
        self.utt_id = utt_id


class TrainingDivergenceError(CodistillError, FloatingPointError):
    def __init__(self, param_name):
        super().__init__(f"non-finite gradient for parameter {param_name!r}")
        self.param_name = param_name


class CheckpointError(CodistillError):
    pass


class ManifestError(CodistillError):
    pass


class UndefinedMetricError(CodistillError, ValueError):
    pass


class FormatError(CodistillError, ValueError):
    """Malformed on-disk artifact."""
