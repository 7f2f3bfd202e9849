"""Exceptions raised by the map metadata pipeline.

Every error subclasses ``ValueError`` so tool handlers and scripts that only
know about ``ValueError`` keep working.
"""
from typing import Optional


class MapMetaError(ValueError):
    """Base class for every pipeline error."""


class SheetParseError(MapMetaError):
    """A sheet annotation file could not be parsed."""

    def __init__(self, message: str, source: str = "<sheet>", line: Optional[int] = None,
                 field: Optional[str] = None):
        self.source = source
        self.line = line
        self.field = field
        where = source if line is None else f"{source}:{line}"
        if field:
            where = f"{where} [{field}]"
        super().__init__(f"{where}: {message}")


class ValidationError(MapMetaError):
    """A value violates a domain invariant."""


class DegeneratePolygonError(ValidationError):
    """A region polygon has zero area."""


class EmbeddingFormatError(MapMetaError):
    """An embedding file is empty or has inconsistent dimensions."""


class ContractError(MapMetaError):
    """A function was called with arguments outside its contract."""


class UntrainableSheetError(MapMetaError):
    """A sheet has no multi-word ground-truth group to learn from."""


class TrainingDivergedError(MapMetaError):
    """The training loss became non-finite."""


class CheckpointError(MapMetaError):
    """A model checkpoint is malformed or from an unknown version."""


class ProbabilityMapError(MapMetaError):
    """A probability map has the wrong size or out-of-range values."""


class FrameMismatchError(MapMetaError):
    """A region does not overlap the raster frame it is drawn into."""


class GraphError(MapMetaError):
    """A linkage graph edge is invalid."""


class GeocoderTransportError(MapMetaError):
    """The geocoding backend could not be reached after all retries.

    Distinct from an empty result, which is a normal answer.
    """


class ConfigError(MapMetaError):
    """The pipeline configuration is invalid."""
