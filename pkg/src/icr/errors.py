"""Exception hierarchy shared across the package.

Everything raised on purpose derives from IcrError so the CLI can map
library failures to exit code 1 and argument/config problems to exit 2.
"""

from __future__ import annotations


class IcrError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(IcrError):
    """Invalid run configuration (bad flag combination, violated bounds)."""


class TaskConfigError(ConfigError):
    """Task definition file is malformed or violates label/template rules."""


class IngestionError(IcrError):
    """A data file could not be loaded. Carries the offending line when known."""

    def __init__(self, message: str, line: int | None = None):
        if line is not None:
            message = f"{message} at line {line}"
        super().__init__(message)
        self.line = line


class RenderError(IcrError):
    """Prompt rendering failed (missing field, bad template)."""


class BackendError(IcrError):
    """A model backend failed to produce a label distribution."""


class ExtractionError(BackendError):
    """No verbalizer could be matched in the provider response."""

    def __init__(self, message: str, raw_response: str = ""):
        super().__init__(message)
        self.raw_response = raw_response


class EmbeddingError(IcrError):
    """An embedding provider failed or has no vector for the requested item."""


class SelectionError(IcrError):
    """Demonstration selection failed. Carries the candidate id when known."""

    def __init__(self, message: str, candidate_id: int | None = None):
        if candidate_id is not None:
            message = f"{message} (candidate id {candidate_id})"
        super().__init__(message)
        self.candidate_id = candidate_id


class EvaluationError(IcrError):
    """Evaluation could not be completed."""


class ArtifactError(IcrError):
    """An artifact file is malformed or inconsistent with the given task."""
