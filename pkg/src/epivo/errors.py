"""Exception hierarchy.

Every error raised on purpose by the package derives from :class:`EpivoError`
so callers (the CLI in particular) can map failures to exit codes.
"""

from __future__ import annotations


class EpivoError(Exception):
    """Base class for all package errors."""


class GeometryError(EpivoError):
    """Invalid or degenerate geometric input."""


class DegenerateTranslationError(GeometryError):
    pass


class CalibrationError(GeometryError):
    pass


class DegenerateLineError(GeometryError):
    pass


class InvalidRotationError(GeometryError):
    pass


class NoValidMatchError(EpivoError):
    pass


class DegenerateConfigurationError(GeometryError):
    """Point configuration does not determine a unique model (coplanar, duplicated, ...)."""


class NonDifferentiableError(EpivoError):
    """Smallest eigenvalue is repeated, so the eigenvector gradient is undefined."""


class NoValidPoseError(EpivoError):
    pass


class RobustFailureError(EpivoError):
    pass


class ScaleFailureError(EpivoError):
    pass


class DegenerateGraphError(EpivoError):
    pass


class GenerationError(EpivoError):
    pass


class TrainingDivergenceError(EpivoError):
    def __init__(self, message: str, trace):
        super().__init__(message)
        self.trace = list(trace)


class MissingInputError(EpivoError):
    pass


class DataError(EpivoError):
    """Malformed or inconsistent input data (exit code 1)."""


class ParseError(DataError):
    def __init__(self, message: str, path=None, line: int | None = None):
        loc = ""
        if path is not None:
            loc = f"{path}"
        if line is not None:
            loc = f"{loc}:{line}" if loc else f"line {line}"
        super().__init__(f"{loc}: {message}" if loc else message)
        self.path = path
        self.line = line


class ConfigError(EpivoError):
    """Invalid run configuration (exit code 2)."""


class PipelineStageError(EpivoError):
    """A pipeline stage failed; ``stage`` names it and ``frame`` locates it when known."""

    def __init__(self, stage: str, cause: Exception, frame: int | None = None):
        where = f" (frame {frame})" if frame is not None else ""
        super().__init__(f"[{stage}]{where} {cause}")
        self.stage = stage
        self.cause = cause
        self.frame = frame
