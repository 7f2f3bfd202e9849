"""
Consensus between the textual and visual predictors.

A textual candidate j of query i is kept iff the mean probability over its
rasterized footprint B_j is strictly greater than theta:

    (1 / |B_j|) * sum(B_j * S) > theta
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from app.modules import mcp
from app.modules.errors import ContractError, FrameMismatchError, SheetParseError
from app.modules.features import SheetFeatures, build_sheet_features, load_embeddings
from app.modules.ingest import MapSheet, TextRegion, parse_sheet
from app.modules.textual_linker import LinkerModel, load_model, retrieve_candidates
from app.modules.visual_linker import (DEFAULT_GRID_SIZE, ProbabilityMap, ProbabilityMapDirectory,
                                       RasterFrame, SurrogateMaps, binarize, candidate_frame,
                                       polygon_mask)

logger = logging.getLogger(__name__)

MapProvider = Callable[[MapSheet, TextRegion, Sequence[TextRegion], RasterFrame], ProbabilityMap]


@dataclass(frozen=True)
class ConsensusConfig:
    theta: float = 0.5
    grid_size: int = DEFAULT_GRID_SIZE
    binarize_visual: bool = True
    binarize_p: float = 0.5
    textual_only: bool = False
    text_threshold: Optional[float] = None

    def __post_init__(self):
        if not 0.0 < self.theta < 1.0:
            raise ContractError(f"theta {self.theta} outside (0, 1)")
        if not 0.0 < self.binarize_p < 1.0:
            raise ContractError(f"binarization threshold {self.binarize_p} outside (0, 1)")


@dataclass(frozen=True)
class LinkDecision:
    """One textual candidate and the consensus verdict on it."""
    query_id: str
    candidate_id: str
    textual_p: float
    consensus_score: Optional[float]
    linked: bool


def rasterize_box(region: TextRegion, frame: RasterFrame) -> np.ndarray:
    """N x N boolean mask of the cells whose center falls inside the region.

    A region thinner than a cell still covers the cell holding its center.
    """
    if not region.shape.intersects(frame.square):
        raise FrameMismatchError(f"region '{region.id}' lies outside the raster frame")
    mask = polygon_mask(region.shape, frame)
    if not mask.any():
        gx, gy = frame.to_grid(*region.center)
        col = min(max(int(math.floor(gx)), 0), frame.size - 1)
        row = min(max(int(math.floor(gy)), 0), frame.size - 1)
        mask[row, col] = True
    return mask


def consensus_score(mask: np.ndarray, prob_map: ProbabilityMap) -> float:
    if mask.shape != prob_map.grid.shape:
        raise FrameMismatchError(f"mask {mask.shape} and map {prob_map.grid.shape} differ in size")
    count = int(np.count_nonzero(mask))
    if count == 0:
        raise ContractError("consensus over an empty mask")
    return float(prob_map.grid[mask.astype(bool)].sum() / count)


def consensus_decision(score: float, theta: float) -> bool:
    return score > theta


def score_query(model: LinkerModel, sheet: MapSheet, features: SheetFeatures, query_id: str,
                maps: Optional[MapProvider] = None, config: Optional[ConsensusConfig] = None,
                image: Optional[np.ndarray] = None) -> List[LinkDecision]:
    """Decisions for every textual candidate of one query, in sheet order."""
    config = config or ConsensusConfig()
    candidates = retrieve_candidates(model, sheet, features, query_id, config.text_threshold)
    if not candidates:
        return []
    if config.textual_only:
        return [LinkDecision(query_id, c.region_id, c.probability, None, True) for c in candidates]

    query = sheet.region(query_id)
    regions = [sheet.region(c.region_id) for c in candidates]
    frame = candidate_frame(query, regions, image, config.grid_size)
    prob_map = (maps or SurrogateMaps())(sheet, query, regions, frame)
    if config.binarize_visual:
        prob_map = binarize(prob_map, config.binarize_p)

    decisions = []
    for candidate, region in zip(candidates, regions):
        score = consensus_score(rasterize_box(region, frame), prob_map)
        decisions.append(LinkDecision(query_id, candidate.region_id, candidate.probability, score,
                                      consensus_decision(score, config.theta)))
    return decisions


def link_query(model: LinkerModel, sheet: MapSheet, features: SheetFeatures, query_id: str,
               maps: Optional[MapProvider] = None, config: Optional[ConsensusConfig] = None,
               image: Optional[np.ndarray] = None) -> Set[str]:
    """Ids of the regions linked to the query after consensus."""
    return {d.candidate_id for d in score_query(model, sheet, features, query_id, maps, config, image)
            if d.linked}


def link_sheet(model: LinkerModel, sheet: MapSheet, features: SheetFeatures,
               maps: Optional[MapProvider] = None, config: Optional[ConsensusConfig] = None,
               image: Optional[np.ndarray] = None) -> List[LinkDecision]:
    """Query every region of the sheet; returns all decisions, linked or not."""
    decisions: List[LinkDecision] = []
    for region in sheet.regions:
        decisions.extend(score_query(model, sheet, features, region.id, maps, config, image))
    logger.debug("Sheet %s: %d textual candidates, %d linked", sheet.sheet_id,
                 len(decisions), sum(d.linked for d in decisions))
    return decisions


def linked_edges(decisions: Iterable[LinkDecision]) -> Set[Tuple[str, str]]:
    return {(d.query_id, d.candidate_id) for d in decisions if d.linked}


def textual_edges(decisions: Iterable[LinkDecision]) -> Set[Tuple[str, str]]:
    """Every textual candidate, before consensus filtering."""
    return {(d.query_id, d.candidate_id) for d in decisions}


def _fmt(value: Optional[float]) -> str:
    return "-" if value is None else repr(float(value))


def emit_edges(decisions: Iterable[LinkDecision]) -> str:
    """``edge`` lines for linked pairs, ``candidate`` lines for rejected ones."""
    lines = []
    for d in decisions:
        kind = "edge" if d.linked else "candidate"
        lines.append(f"{kind} {d.query_id} {d.candidate_id} {_fmt(d.textual_p)} {_fmt(d.consensus_score)}")
    return "".join(line + "\n" for line in lines)


def write_edges(decisions: Iterable[LinkDecision], path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(emit_edges(decisions), encoding="utf-8")
    return path


def parse_edges(text: str, source: str = "<edges>") -> List[LinkDecision]:
    decisions = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        parts = raw.split()
        if not parts or parts[0].startswith("#"):
            continue
        if parts[0] not in ("edge", "candidate") or len(parts) != 5:
            raise SheetParseError("expected 'edge|candidate <query> <linked> <p> <score>'",
                                  source, lineno, "edge")
        try:
            textual_p = float(parts[3])
            score = None if parts[4] == "-" else float(parts[4])
        except ValueError:
            raise SheetParseError("non-numeric probability", source, lineno, "edge") from None
        decisions.append(LinkDecision(parts[1], parts[2], textual_p, score, parts[0] == "edge"))
    return decisions


def read_edges(path: Union[str, Path]) -> List[LinkDecision]:
    path = Path(path)
    return parse_edges(path.read_text(encoding="utf-8"), source=str(path))


@mcp.tool()
async def consensus_link_sheet(sheet_path: str, output_path: str = None, model_path: str = None,
                               embeddings_path: str = None, theta: float = None,
                               textual_only: bool = False) -> str:
    """Run textual retrieval plus consensus over every region of a sheet.

    Args:
        sheet_path: Path to the sheet annotation file
        output_path: Optional edge-list file to write
        model_path: Optional checkpoint (defaults to MAPMETA_MODEL)
        embeddings_path: Optional embedding file (defaults to MAPMETA_EMBEDDINGS)
        theta: Optional consensus threshold
        textual_only: Skip the visual predictor
    """
    try:
        from app.modules import current_config

        config = current_config().with_overrides(
            **{k: v for k, v in {"theta": theta, "textual_only": textual_only}.items() if v is not None})
        model = load_model(model_path or config.model)
        table = load_embeddings(embeddings_path or config.embeddings, oov_policy=config.oov_policy)
        sheet = parse_sheet(sheet_path)
        maps = ProbabilityMapDirectory(config.map_dir) if config.map_dir else None
        decisions = link_sheet(model, sheet, build_sheet_features(sheet, table), maps,
                               config.consensus_config())
        if output_path:
            write_edges(decisions, output_path)
        return json.dumps({
            "status": "success",
            "sheet_id": sheet.sheet_id,
            "candidates": len(decisions),
            "edges": sorted([q, j] for q, j in linked_edges(decisions)),
        }, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
