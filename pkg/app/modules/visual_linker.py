"""
Visual side of the linker: raster frames and probability maps.

A frame is the tight bounding box of a query and its candidates, padded to a
square with the crop's mean color and resized to N x N. Probability maps give,
per cell, the probability that the pixel belongs to a region linked to the
query. They are either produced by an external segmenter and loaded from disk,
or computed by the geometric surrogate below.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence, Tuple, Union

import numpy as np
import shapely
from PIL import Image
from shapely.geometry import Polygon, box

from app.modules import mcp
from app.modules.errors import ContractError, ProbabilityMapError
from app.modules.features import font_area
from app.modules.ingest import MapSheet, TextRegion, parse_sheet

logger = logging.getLogger(__name__)

DEFAULT_GRID_SIZE = 256
GRAY = (128.0, 128.0, 128.0)
MAP_SUFFIXES = (".pgm", ".png", ".npy", ".txt")
WIDE_GRAY_MODES = ("I", "I;16", "I;16B", "I;16L", "I;16N")
IMAGE_SUFFIXES = (".png", ".ppm", ".jpg", ".jpeg", ".tif", ".tiff")


@dataclass(frozen=True)
class RasterFrame:
    """Maps sheet pixels into an N x N grid.

    The bbox (x0, y0, width, height) is centered in a square of side
    max(width, height) and scaled by N / side.
    """
    x0: float
    y0: float
    width: float
    height: float
    size: int = DEFAULT_GRID_SIZE
    pad_color: Tuple[float, float, float] = GRAY

    def __post_init__(self):
        if self.size < 1:
            raise ContractError(f"grid size must be positive, got {self.size}")
        if max(self.width, self.height) <= 0:
            raise ContractError("frame has zero extent")

    @property
    def side(self) -> float:
        return max(self.width, self.height)

    @property
    def scale(self) -> float:
        return self.size / self.side

    @property
    def offset(self) -> Tuple[float, float]:
        """Padding (sheet pixels) left of and above the bbox."""
        return (self.side - self.width) / 2.0, (self.side - self.height) / 2.0

    @property
    def square(self) -> Polygon:
        ox, oy = self.offset
        return box(self.x0 - ox, self.y0 - oy, self.x0 - ox + self.side, self.y0 - oy + self.side)

    def to_grid(self, x, y):
        ox, oy = self.offset
        return (np.subtract(x, self.x0) + ox) * self.scale, (np.subtract(y, self.y0) + oy) * self.scale

    def to_sheet(self, gx, gy):
        ox, oy = self.offset
        return np.divide(gx, self.scale) - ox + self.x0, np.divide(gy, self.scale) - oy + self.y0

    def cell_centers(self) -> Tuple[np.ndarray, np.ndarray]:
        """Sheet coordinates of every cell center, as (rows, cols) arrays."""
        idx = np.arange(self.size) + 0.5
        gx, gy = np.meshgrid(idx, idx)
        return self.to_sheet(gx, gy)


@dataclass(frozen=True)
class ProbabilityMap:
    grid: np.ndarray
    frame: RasterFrame

    def __post_init__(self):
        n = self.frame.size
        if self.grid.shape != (n, n):
            raise ProbabilityMapError(f"map is {self.grid.shape}, frame expects {(n, n)}")
        if not np.all(np.isfinite(self.grid)) or self.grid.min() < 0.0 or self.grid.max() > 1.0:
            raise ProbabilityMapError("probability map values must lie in [0, 1]")


def candidate_frame(query: TextRegion, candidates: Sequence[TextRegion],
                    image: Optional[np.ndarray] = None, size: int = DEFAULT_GRID_SIZE) -> RasterFrame:
    if not candidates:
        raise ContractError(f"no candidates for query '{query.id}'")
    bounds = np.array([r.bounds for r in (query, *candidates)])
    x0, y0 = bounds[:, 0].min(), bounds[:, 1].min()
    x1, y1 = bounds[:, 2].max(), bounds[:, 3].max()
    pad = GRAY
    if image is not None:
        crop = _crop(image, x0, y0, x1, y1)
        if crop.size:
            pad = tuple(float(v) for v in crop.reshape(-1, crop.shape[-1]).mean(axis=0)[:3])
    return RasterFrame(float(x0), float(y0), float(x1 - x0), float(y1 - y0), size, pad)


def _crop(image: np.ndarray, x0: float, y0: float, x1: float, y1: float) -> np.ndarray:
    h, w = image.shape[:2]
    left, top = max(int(math.floor(x0)), 0), max(int(math.floor(y0)), 0)
    right, bottom = min(int(math.ceil(x1)), w), min(int(math.ceil(y1)), h)
    if image.ndim == 2:
        image = np.repeat(image[:, :, None], 3, axis=2)
    return image[top:bottom, left:right]


def polygon_mask(polygon: Polygon, frame: RasterFrame) -> np.ndarray:
    """Boolean N x N mask of cells whose center lies inside the polygon."""
    xs, ys = frame.cell_centers()
    return shapely.contains_xy(polygon, xs, ys)


def compatibility(query: TextRegion, candidate: TextRegion) -> float:
    """exp(-gap / mean height) * cos^2(angle difference) * font-area ratio, in [0, 1]."""
    mean_height = (query.height + candidate.height) / 2.0
    gap = query.shape.distance(candidate.shape)
    d_angle = math.radians(query.angle - candidate.angle)
    fq, fc = font_area(query), font_area(candidate)
    return math.exp(-gap / mean_height) * math.cos(d_angle) ** 2 * min(fq, fc) / max(fq, fc)


def phrase_scores(query: TextRegion, candidates: Sequence[TextRegion]) -> np.ndarray:
    """Per candidate, the strongest chain of compatible words leading to it from the query.

    A chain scores its weakest pairwise compatibility, so the third word of
    "Black Crater Lake" inherits the query's link through "Crater" although
    the two are a word apart.
    """
    regions = [query, *candidates]
    n = len(regions)
    strength = np.eye(n)
    for i in range(n):
        for j in range(i + 1, n):
            strength[i, j] = strength[j, i] = compatibility(regions[i], regions[j])
    # max-min closure (widest paths)
    for k in range(n):
        strength = np.maximum(strength, np.minimum(strength[:, k:k + 1], strength[k:k + 1, :]))
    return strength[0, 1:]


def surrogate_probability_map(query: TextRegion, candidates: Sequence[TextRegion],
                              frame: RasterFrame) -> ProbabilityMap:
    """Fill each candidate footprint with its phrase score; background is 0."""
    grid = np.zeros((frame.size, frame.size))
    for candidate, score in zip(candidates, phrase_scores(query, candidates)):
        mask = polygon_mask(candidate.shape, frame)
        grid[mask] = np.maximum(grid[mask], score)
    return ProbabilityMap(grid, frame)


def _graymap_grid(img: Image.Image) -> np.ndarray:
    # Pillow rescales any maxval to 255 (mode L) or 65535 (integer modes)
    if img.mode in WIDE_GRAY_MODES:
        return np.asarray(img, dtype=np.float64) / 65535.0
    return np.asarray(img.convert("L"), dtype=np.float64) / 255.0


def load_probability_map(path: Union[str, Path], frame: RasterFrame,
                         resample: bool = False) -> ProbabilityMap:
    """Load a PGM/PNG graymap (8 or 16 bit), a .npy array or a whitespace text matrix.

    A map whose size differs from the frame is an error unless ``resample``
    is set, in which case it is area-resized to N x N.
    """
    path = Path(path)
    suffix = path.suffix.lower()
    try:
        if suffix in (".pgm", ".png"):
            with Image.open(path) as img:
                grid = _graymap_grid(img)
        elif suffix == ".npy":
            grid = np.load(path).astype(np.float64)
        else:
            grid = np.loadtxt(path, dtype=np.float64, ndmin=2)
    except (OSError, ValueError) as e:
        raise ProbabilityMapError(f"{path}: {e}") from e
    if resample and grid.ndim == 2 and grid.size and grid.shape != (frame.size, frame.size):
        logger.debug("Resampling %s from %s to %d", path, grid.shape, frame.size)
        grid = resize_area(grid, frame.size)
    try:
        return ProbabilityMap(grid, frame)
    except ProbabilityMapError as e:
        raise ProbabilityMapError(f"{path}: {e}") from None


def write_probability_map(prob_map: ProbabilityMap, path: Union[str, Path]) -> Path:
    path = Path(path)
    if path.suffix.lower() in (".pgm", ".png"):
        Image.fromarray(np.rint(prob_map.grid * 255.0).astype(np.uint8)).save(path)
    elif path.suffix.lower() == ".npy":
        np.save(path, prob_map.grid)
    else:
        np.savetxt(path, prob_map.grid, fmt="%.6f")
    return path


def binarize(prob_map: ProbabilityMap, p: float = 0.5) -> ProbabilityMap:
    if not 0.0 < p < 1.0:
        raise ContractError(f"binarization threshold {p} outside (0, 1)")
    return ProbabilityMap((prob_map.grid > p).astype(np.float64), prob_map.frame)


def _area_weights(n_in: int, n_out: int) -> np.ndarray:
    """(n_out, n_in) overlap of each output cell with the input cells; rows sum to 1."""
    edges = np.arange(n_out + 1) * (n_in / n_out)
    cells = np.arange(n_in)
    overlap = np.minimum(edges[1:, None], cells + 1) - np.maximum(edges[:-1, None], cells)
    weights = np.clip(overlap, 0.0, None)
    return weights / weights.sum(axis=1, keepdims=True)


def resize_area(grid: np.ndarray, size: Union[int, Tuple[int, int]]) -> np.ndarray:
    """Area-averaged resize of a 2-D grid, or an H x W x C image, to ``size``.

    ``size`` is N for a square result or (rows, cols). Works in float64 and
    clips to the input's range, so a constant grid comes back bit-identical.
    """
    grid = np.asarray(grid, dtype=np.float64)
    rows, cols = (int(size), int(size)) if np.ndim(size) == 0 else (int(size[0]), int(size[1]))
    if grid.ndim not in (2, 3) or 0 in grid.shape[:2]:
        raise ContractError(f"cannot resize an array of shape {grid.shape}")
    if rows < 1 or cols < 1:
        raise ContractError(f"target size must be positive, got {(rows, cols)}")
    out = np.einsum("ij,jk...,lk->il...", _area_weights(grid.shape[0], rows), grid,
                    _area_weights(grid.shape[1], cols))
    return np.clip(out, grid.min(), grid.max())


def render_model_input(image: np.ndarray, query: TextRegion,
                       frame: RasterFrame) -> Tuple[np.ndarray, np.ndarray]:
    """The segmenter's inputs: the padded, resized RGB crop and the query mask."""
    side = int(math.ceil(frame.side))
    ox, oy = frame.offset
    canvas = np.empty((side, side, 3), dtype=np.uint8)
    canvas[:] = np.rint(frame.pad_color).astype(np.uint8)
    crop = _crop(image, frame.x0, frame.y0, frame.x0 + frame.width, frame.y0 + frame.height)
    top, left = int(round(oy)), int(round(ox))
    h, w = min(crop.shape[0], side - top), min(crop.shape[1], side - left)
    canvas[top:top + h, left:left + w] = crop[:h, :w, :3]
    rgb = np.rint(resize_area(canvas, frame.size)).astype(np.uint8)
    return rgb, polygon_mask(query.shape, frame)


def load_sheet_image(path: Union[str, Path]) -> np.ndarray:
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def find_sheet_image(image_dir: Union[str, Path, None], sheet_id: str) -> Optional[np.ndarray]:
    if not image_dir:
        return None
    for suffix in IMAGE_SUFFIXES:
        candidate = Path(image_dir) / f"{sheet_id}{suffix}"
        if candidate.exists():
            return load_sheet_image(candidate)
    return None


class SurrogateMaps:
    """Map provider computing the geometric surrogate for every query."""

    def __call__(self, sheet: MapSheet, query: TextRegion, candidates: Sequence[TextRegion],
                 frame: RasterFrame) -> ProbabilityMap:
        return surrogate_probability_map(query, candidates, frame)


class ProbabilityMapDirectory(SurrogateMaps):
    """Loads ``<root>/<sheet_id>/<query_id>.<ext>`` maps, falling back to the surrogate.

    With ``resample`` set, maps written at another resolution are area-resized
    to the frame instead of rejected.
    """

    def __init__(self, root: Union[str, Path], fallback: bool = True, resample: bool = False):
        self.root = Path(root)
        self.fallback = fallback
        self.resample = resample

    def path_for(self, sheet_id: str, query_id: str) -> Optional[Path]:
        for suffix in MAP_SUFFIXES:
            candidate = self.root / sheet_id / f"{query_id}{suffix}"
            if candidate.exists():
                return candidate
        return None

    def __call__(self, sheet, query, candidates, frame):
        path = self.path_for(sheet.sheet_id, query.id)
        if path is not None:
            return load_probability_map(path, frame, self.resample)
        if not self.fallback:
            raise ProbabilityMapError(f"no probability map for {sheet.sheet_id}/{query.id} in {self.root}")
        logger.debug("No map for %s/%s, using surrogate", sheet.sheet_id, query.id)
        return super().__call__(sheet, query, candidates, frame)


@mcp.tool()
async def visual_probability_map(sheet_path: str, query_id: str, candidate_ids: str,
                                 output_path: str, grid_size: int = DEFAULT_GRID_SIZE) -> str:
    """Compute the surrogate probability map for a query and write it as a graymap.

    Args:
        sheet_path: Path to the sheet annotation file
        query_id: Query region id
        candidate_ids: Comma-separated candidate region ids
        output_path: Where to write the map (.pgm, .png, .npy or .txt)
        grid_size: Side of the square grid
    """
    try:
        sheet = parse_sheet(sheet_path)
        query = sheet.region(query_id)
        candidates = [sheet.region(c.strip()) for c in candidate_ids.split(",") if c.strip()]
        frame = candidate_frame(query, candidates, size=grid_size)
        prob_map = surrogate_probability_map(query, candidates, frame)
        write_probability_map(prob_map, output_path)
        return json.dumps({
            "status": "success",
            "path": output_path,
            "frame": {"x0": frame.x0, "y0": frame.y0, "width": frame.width, "height": frame.height,
                      "size": frame.size},
            "scores": {c.id: float(s) for c, s in zip(candidates, phrase_scores(query, candidates))},
        }, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
