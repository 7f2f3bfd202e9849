"""
Textual feature vectors for text regions.

A region's representation is its word embedding followed by five scalars:
normalized center x, normalized center y, angle / 180, normalized font area
and the capitalization flag.
"""
import hashlib
import json
import logging
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, Mapping, Optional, Tuple, Union

import numpy as np

from app.modules import mcp
from app.modules.errors import ContractError, EmbeddingFormatError
from app.modules.ingest import MapSheet, TextRegion, parse_sheet

logger = logging.getLogger(__name__)

EMBEDDING_DIM = 50
SCALAR_FEATURES = 5
ANGLE_DIVISOR = 180.0
OOV_POLICIES = ("zeros", "hash")

FeatureVector = np.ndarray


@dataclass(frozen=True)
class EmbeddingTable:
    """Read-only token -> vector lookup, keyed by lowercased token."""
    dimension: int
    vectors: Mapping[str, np.ndarray]
    oov_policy: str = "zeros"

    def __post_init__(self):
        if self.oov_policy not in OOV_POLICIES:
            raise ContractError(f"unknown OOV policy '{self.oov_policy}'")

    def __len__(self) -> int:
        return len(self.vectors)

    def __contains__(self, token: str) -> bool:
        return token.lower() in self.vectors


def load_embeddings(path: Union[str, Path], dimension: Optional[int] = None,
                    oov_policy: str = "zeros") -> EmbeddingTable:
    """Load a plain-text ``token v1 ... vD`` embedding file.

    The dimension comes from the first line unless ``dimension`` overrides it;
    every other line must agree.
    """
    vectors: Dict[str, np.ndarray] = {}
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            token, values = parts[0], parts[1:]
            if dimension is None:
                dimension = len(values)
            if len(values) != dimension:
                raise EmbeddingFormatError(
                    f"{path}:{lineno}: expected {dimension} values for '{token}', got {len(values)}")
            try:
                vec = np.array([float(v) for v in values], dtype=np.float64)
            except ValueError:
                raise EmbeddingFormatError(f"{path}:{lineno}: non-numeric value for '{token}'") from None
            vec.setflags(write=False)
            # first occurrence wins, as in GloVe files
            vectors.setdefault(token.lower(), vec)
    if not vectors or not dimension:
        raise EmbeddingFormatError(f"{path}: no embedding vectors found")
    logger.debug("Loaded %d embeddings of dimension %d from %s", len(vectors), dimension, path)
    return EmbeddingTable(dimension=dimension, vectors=vectors, oov_policy=oov_policy)


def write_embeddings(table: EmbeddingTable, path: Union[str, Path]) -> Path:
    path = Path(path)
    with open(path, "w", encoding="utf-8") as fh:
        for token, vec in table.vectors.items():
            fh.write(token + " " + " ".join(repr(float(v)) for v in vec) + "\n")
    return path


def _hashed_unit_vector(token: str, dimension: int) -> np.ndarray:
    digest = hashlib.blake2b(token.encode("utf-8"), digest_size=8).digest()
    rng = np.random.default_rng(int.from_bytes(digest, "little"))
    vec = rng.standard_normal(dimension)
    return vec / np.linalg.norm(vec)


def _lookup(table: EmbeddingTable, token: str) -> np.ndarray:
    vec = table.vectors.get(token)
    if vec is not None:
        return vec
    if table.oov_policy == "hash":
        return _hashed_unit_vector(token, table.dimension)
    return np.zeros(table.dimension)


def embed_word(table: EmbeddingTable, token: str) -> np.ndarray:
    """Embed a transcription; several whitespace-separated tokens are averaged."""
    pieces = token.lower().split()
    if not pieces:
        raise ContractError("cannot embed an empty token")
    if len(pieces) == 1:
        return np.array(_lookup(table, pieces[0]), dtype=np.float64)
    return np.mean([_lookup(table, p) for p in pieces], axis=0)


def font_area(region: TextRegion) -> float:
    """Average area per character: width * height / len(text)."""
    return region.width * region.height / len(region.text.strip())


def normalize(value: float, lo: float, hi: float) -> float:
    """Affine min-max map of [lo, hi] onto [-1, 1]; a flat column maps to 0."""
    if hi == lo:
        return 0.0
    return 2.0 * (value - lo) / (hi - lo) - 1.0


@dataclass(frozen=True)
class NormalizationContext:
    """Per-sheet ranges used to normalize the scalar features."""
    cx_min: float
    cx_max: float
    cy_min: float
    cy_max: float
    f_min: float
    f_max: float
    angle_divisor: float = ANGLE_DIVISOR

    @classmethod
    def from_regions(cls, regions: Iterable[TextRegion]) -> "NormalizationContext":
        regions = list(regions)
        if not regions:
            raise ContractError("normalization needs at least one region")
        cxs = [r.center[0] for r in regions]
        cys = [r.center[1] for r in regions]
        fs = [font_area(r) for r in regions]
        return cls(min(cxs), max(cxs), min(cys), max(cys), min(fs), max(fs))

    @classmethod
    def from_sheet(cls, sheet: MapSheet) -> "NormalizationContext":
        return cls.from_regions(sheet.regions)


def build_feature_vector(region: TextRegion, ctx: NormalizationContext,
                         table: EmbeddingTable) -> FeatureVector:
    scalars = np.array([
        normalize(region.center[0], ctx.cx_min, ctx.cx_max),
        normalize(region.center[1], ctx.cy_min, ctx.cy_max),
        region.angle / ctx.angle_divisor,
        normalize(font_area(region), ctx.f_min, ctx.f_max),
        float(region.caps_flag),
    ])
    return np.concatenate([embed_word(table, region.text), scalars])


@dataclass(frozen=True)
class SheetFeatures:
    """Feature matrix of one sheet, rows in region order."""
    ids: Tuple[str, ...]
    matrix: np.ndarray

    @cached_property
    def row(self) -> Dict[str, int]:
        return {rid: i for i, rid in enumerate(self.ids)}

    def vector(self, region_id: str) -> FeatureVector:
        return self.matrix[self.row[region_id]]


def build_sheet_features(sheet: MapSheet, table: EmbeddingTable) -> SheetFeatures:
    ctx = NormalizationContext.from_sheet(sheet)
    matrix = np.stack([build_feature_vector(r, ctx, table) for r in sheet.regions])
    matrix.setflags(write=False)
    return SheetFeatures(ids=tuple(r.id for r in sheet.regions), matrix=matrix)


@mcp.tool()
async def features_describe_region(sheet_path: str, region_id: str, embeddings_path: str = None) -> str:
    """Show the scalar features of one text region.

    Args:
        sheet_path: Path to the sheet annotation file
        region_id: Region to describe
        embeddings_path: Optional embedding file (defaults to MAPMETA_EMBEDDINGS)
    """
    try:
        from app.modules import current_config

        path = embeddings_path or current_config().embeddings
        if not path:
            return json.dumps({"status": "error", "message": "No embeddings file configured"})
        table = load_embeddings(path)
        sheet = parse_sheet(sheet_path)
        region = sheet.region(region_id)
        vec = build_feature_vector(region, NormalizationContext.from_sheet(sheet), table)
        return json.dumps({
            "status": "success",
            "region": region.id,
            "text": region.text,
            "in_vocabulary": region.text in table,
            "font_area": font_area(region),
            "scalars": {
                "cx": vec[-5], "cy": vec[-4], "angle": vec[-3], "font": vec[-2], "caps": vec[-1],
            },
            "dimension": int(vec.shape[0]),
        }, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
