"""Exception hierarchy for Medcap.

Each exception carries the CLI exit code it maps to, so command handlers can
translate failures without inspecting messages.
"""

from typing import Optional

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_BACKEND = 4
EXIT_INTERNAL = 5


class MedcapError(Exception):
    """Base class for all Medcap errors."""

    exit_code = EXIT_INTERNAL


class ConfigError(MedcapError):
    """Invalid or missing configuration value."""

    exit_code = EXIT_CONFIG

    def __init__(self, message: str, key: Optional[str] = None) -> None:
        super().__init__(message)
        self.key = key


class CheckpointError(MedcapError):
    """Checkpoint file missing, unreadable, or from an incompatible format."""

    exit_code = EXIT_CONFIG


class WeightLoadError(MedcapError):
    """Pretrained backbone weights could not be loaded."""

    exit_code = EXIT_CONFIG


class DataError(MedcapError):
    """Input data is unusable (bad records, missing classes, unreadable files)."""

    exit_code = EXIT_DATA


class ParseError(DataError):
    """Malformed JSON, JSON-lines, or lexicon file."""

    def __init__(self, message: str, line: Optional[int] = None) -> None:
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class SchemaError(DataError):
    """A dataset record lacks a required field."""

    def __init__(self, message: str, index: Optional[int] = None) -> None:
        if index is not None:
            message = f"record index {index}: {message}"
        super().__init__(message)
        self.index = index


class DecodeError(DataError):
    """File exists but is not a decodable image."""


class IoError(DataError):
    """File could not be read or written."""


class BackendError(MedcapError):
    """Caption backend failed or was unreachable."""

    exit_code = EXIT_BACKEND


class ShapeError(MedcapError, ValueError):
    """Tensor shape does not match the configured layout."""


class ZeroVectorError(MedcapError, ValueError):
    """Cosine similarity requested for a zero-norm vector."""


class DimensionError(MedcapError, ValueError):
    """Vectors of different dimensions were compared."""


class StageError(MedcapError):
    """Failure inside one pipeline stage, tagged with the stage name."""

    def __init__(self, stage: str, cause: BaseException) -> None:
        super().__init__(f"stage={stage}: {cause}")
        self.stage = stage
        self.cause = cause
        self.exit_code = cause.exit_code if isinstance(cause, MedcapError) else EXIT_INTERNAL
