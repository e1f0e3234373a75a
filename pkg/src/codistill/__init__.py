"""Desk-scale speech representation learning by distilling code-input teachers."""

from .errors import (
    AlignmentError,
    CheckpointError,
    CodistillError,
    ConfigError,
    DataError,
    DimensionError,
    InsufficientDataError,
    ManifestError,
    TrainingDivergenceError,
    UndefinedMetricError,
    VocabularyError,
)

__version__ = "0.1.0"
