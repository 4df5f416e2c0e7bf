"""Shared exception types."""


class OsrlabError(Exception):
    """Base class for osrlab failures that are not plain usage errors."""


class DatasetFormatError(OsrlabError):
    """Manifest or image file does not match the dataset format."""


class EmbeddingFormatError(OsrlabError):
    """Embedding text file has a malformed header or row."""


class ModelIOError(OsrlabError):
    """Parameter file is missing, corrupt, or inconsistent with its config."""


class TrainingDiverged(OsrlabError):
    """Training produced a non-finite loss."""
