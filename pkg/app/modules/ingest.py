"""
Sheet annotation parsing.

A sheet file is UTF-8 text with one record per line::

    sheet <id> <W> <H> [gt_lat gt_lng] [tmin_lat tmin_lng tmax_lat tmax_lng]
    region <id> <x1> <y1> <x2> <y2> <x3> <y3> <x4> <y4> <text...>
    group <id1> <id2> ...

Blank lines and lines starting with ``#`` are ignored. Region order in the
file is kept as the sheet's reading order.
"""
import json
import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path
from typing import Dict, Iterable, Optional, Sequence, Tuple, Union

from shapely.geometry import Polygon

from app.modules import mcp
from app.modules.errors import DegeneratePolygonError, SheetParseError, ValidationError

Point = Tuple[float, float]
Quad = Tuple[Point, Point, Point, Point]
LatLng = Tuple[float, float]

# Polygons with less area than this (in square pixels) are degenerate
MIN_POLYGON_AREA = 1e-9


def caps_flag(text: str) -> int:
    """1 iff the text has letters and every letter is uppercase."""
    letters = [c for c in text if c.isalpha()]
    return int(bool(letters) and all(c.isupper() for c in letters))


def derive_geometry(polygon: Sequence[Point]) -> Tuple[Point, float, float, float]:
    """Derive (center, width, height, angle) from a 4-corner polygon.

    Width is the long side of the box and height the short side. The angle
    is the clockwise orientation of the long side in degrees, with 90 for a
    horizontal box and 0 for a vertical one, reduced to [0, 180).
    """
    if len(polygon) != 4:
        raise ValidationError(f"polygon needs 4 corners, got {len(polygon)}")
    pts = [(float(x), float(y)) for x, y in polygon]
    if Polygon(pts).area <= MIN_POLYGON_AREA:
        raise DegeneratePolygonError(f"polygon {pts} has zero area")

    (x0, y0), (x1, y1), (x2, y2), (x3, y3) = pts
    center = ((x0 + x1 + x2 + x3) / 4.0, (y0 + y1 + y2 + y3) / 4.0)

    # mean of opposite edges, exact for rectangles
    ax, ay = ((x1 - x0) + (x2 - x3)) / 2.0, ((y1 - y0) + (y2 - y3)) / 2.0
    bx, by = ((x3 - x0) + (x2 - x1)) / 2.0, ((y3 - y0) + (y2 - y1)) / 2.0
    len_a, len_b = math.hypot(ax, ay), math.hypot(bx, by)
    if len_a >= len_b:
        width, height, dx, dy = len_a, len_b, ax, ay
    else:
        width, height, dx, dy = len_b, len_a, bx, by
    if height <= 0.0:
        raise DegeneratePolygonError(f"polygon {pts} has zero height")

    # image y axis points down, so atan2 is already clockwise
    angle = 90.0 + math.degrees(math.atan2(dy, dx))
    angle = round(angle, 9) % 180.0
    return center, width, height, angle


@dataclass(frozen=True)
class TextRegion:
    """One recognized word and its geometry in sheet pixels."""
    id: str
    text: str
    polygon: Quad
    center: Point
    width: float
    height: float
    angle: float
    caps_flag: int

    @classmethod
    def from_polygon(cls, region_id: str, text: str, polygon: Sequence[Point]) -> "TextRegion":
        text = text.strip()
        if not region_id:
            raise ValidationError("region id must not be empty")
        if not text:
            raise ValidationError(f"region '{region_id}' has empty text")
        quad = tuple((float(x), float(y)) for x, y in polygon)
        try:
            center, width, height, angle = derive_geometry(quad)
        except DegeneratePolygonError as e:
            raise DegeneratePolygonError(f"region '{region_id}': {e}") from e
        return cls(
            id=region_id,
            text=text,
            polygon=quad,
            center=center,
            width=width,
            height=height,
            angle=angle,
            caps_flag=caps_flag(text),
        )

    @property
    def bounds(self) -> Tuple[float, float, float, float]:
        """Axis-aligned (min_x, min_y, max_x, max_y)."""
        xs = [p[0] for p in self.polygon]
        ys = [p[1] for p in self.polygon]
        return min(xs), min(ys), max(xs), max(ys)

    @cached_property
    def shape(self) -> Polygon:
        return Polygon(self.polygon)


@dataclass(frozen=True)
class MapSheet:
    """A map sheet: its words plus optional ground truth."""
    sheet_id: str
    width: int
    height: int
    regions: Tuple[TextRegion, ...]
    groups: Tuple[Tuple[str, ...], ...] = ()
    gt_location: Optional[LatLng] = None
    plot_corners: Optional[Tuple[LatLng, LatLng]] = None

    def __post_init__(self):
        if not self.sheet_id or any(c.isspace() for c in self.sheet_id):
            raise ValidationError(f"invalid sheet id '{self.sheet_id}'")
        if self.width <= 0 or self.height <= 0:
            raise ValidationError(f"sheet '{self.sheet_id}' has non-positive dimensions")
        seen = set()
        for region in self.regions:
            if region.id in seen:
                raise ValidationError(f"duplicate region id '{region.id}'")
            seen.add(region.id)
        grouped = set()
        for group in self.groups:
            if not group:
                raise ValidationError("empty ground-truth group")
            for rid in group:
                if rid not in seen:
                    raise ValidationError(f"group references unknown region '{rid}'")
                if rid in grouped:
                    raise ValidationError(f"region '{rid}' appears in more than one group")
                grouped.add(rid)
        if self.gt_location is not None:
            _check_latlng(self.gt_location, "ground-truth location")
        if self.plot_corners is not None:
            for corner in self.plot_corners:
                _check_latlng(corner, "plot corner")

    @cached_property
    def index(self) -> Dict[str, int]:
        return {r.id: i for i, r in enumerate(self.regions)}

    def region(self, region_id: str) -> TextRegion:
        try:
            return self.regions[self.index[region_id]]
        except KeyError:
            raise ValidationError(f"unknown region id '{region_id}' on sheet '{self.sheet_id}'") from None

    def group_texts(self) -> Tuple[str, ...]:
        """Ground-truth phrases as stored (group order is the reading order)."""
        return tuple(" ".join(self.region(rid).text for rid in group) for group in self.groups)


def _check_latlng(point: LatLng, what: str) -> None:
    lat, lng = point
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lng <= 180.0):
        raise ValidationError(f"{what} ({lat}, {lng}) out of range")


def _number(token: str, cast, source: str, line: int, field: str):
    try:
        value = cast(token)
    except ValueError:
        raise SheetParseError(f"expected a number, got '{token}'", source, line, field) from None
    if isinstance(value, float) and not math.isfinite(value):
        raise SheetParseError(f"non-finite value '{token}'", source, line, field)
    return value


def parse_sheet_text(text: str, source: str = "<sheet>") -> MapSheet:
    header = None
    regions = []
    groups = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        kind = line.split(None, 1)[0]
        if kind == "sheet":
            if header is not None:
                raise SheetParseError("second sheet header", source, lineno, "sheet")
            tokens = line.split()
            extras = tokens[4:]
            if len(tokens) < 4 or len(extras) not in (0, 2, 4, 6):
                raise SheetParseError("header needs <id> <W> <H> plus 0, 2, 4 or 6 coordinates",
                                      source, lineno, "sheet")
            width = _number(tokens[2], int, source, lineno, "W")
            height = _number(tokens[3], int, source, lineno, "H")
            coords = [_number(t, float, source, lineno, "coordinate") for t in extras]
            gt = None
            corners = None
            if len(coords) in (2, 6):
                gt = (coords[0], coords[1])
                coords = coords[2:]
            if len(coords) == 4:
                corners = ((coords[0], coords[1]), (coords[2], coords[3]))
            header = (tokens[1], width, height, gt, corners)
        elif kind == "region":
            if header is None:
                raise SheetParseError("region before sheet header", source, lineno, "region")
            parts = line.split(None, 10)
            if len(parts) < 11:
                raise SheetParseError("region needs an id, 8 coordinates and text",
                                      source, lineno, "region")
            nums = [_number(t, float, source, lineno, f"x{i // 2 + 1}" if i % 2 == 0 else f"y{i // 2 + 1}")
                    for i, t in enumerate(parts[2:10])]
            polygon = tuple((nums[i], nums[i + 1]) for i in range(0, 8, 2))
            try:
                regions.append(TextRegion.from_polygon(parts[1], parts[10], polygon))
            except ValidationError as e:
                raise type(e)(f"{source}:{lineno}: {e}") from e
        elif kind == "group":
            ids = tuple(line.split()[1:])
            if not ids:
                raise SheetParseError("empty group", source, lineno, "group")
            groups.append(ids)
        else:
            raise SheetParseError(f"unknown record type '{kind}'", source, lineno, "record")
    if header is None:
        raise SheetParseError("missing sheet header", source)

    sheet_id, width, height, gt, corners = header
    try:
        return MapSheet(sheet_id, width, height, tuple(regions), tuple(groups), gt, corners)
    except ValidationError as e:
        raise ValidationError(f"{source}: {e}") from e


def parse_sheet(annotation_file: Union[str, Path]) -> MapSheet:
    """Parse and validate a sheet annotation file."""
    path = Path(annotation_file)
    try:
        text = path.read_text(encoding="utf-8")
    except UnicodeDecodeError as e:
        raise SheetParseError(f"not valid UTF-8 at byte {e.start}", str(path)) from e
    return parse_sheet_text(text, source=str(path))


def emit_sheet(sheet: MapSheet) -> str:
    """Render a sheet in the annotation format; ``parse_sheet_text`` inverts it."""
    header = ["sheet", sheet.sheet_id, str(sheet.width), str(sheet.height)]
    if sheet.gt_location is not None:
        header += [repr(v) for v in sheet.gt_location]
    if sheet.plot_corners is not None:
        header += [repr(v) for corner in sheet.plot_corners for v in corner]
    lines = [" ".join(header)]
    for region in sheet.regions:
        coords = " ".join(repr(v) for point in region.polygon for v in point)
        lines.append(f"region {region.id} {coords} {region.text}")
    for group in sheet.groups:
        lines.append("group " + " ".join(group))
    return "\n".join(lines) + "\n"


def write_sheet(sheet: MapSheet, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.write_text(emit_sheet(sheet), encoding="utf-8")
    return path


def iter_sheet_files(paths: Iterable[Union[str, Path]]) -> Iterable[Path]:
    """Expand directories into their ``*.sheet`` files, sorted by name."""
    for entry in paths:
        entry = Path(entry)
        if entry.is_dir():
            yield from sorted(entry.glob("*.sheet"))
        else:
            yield entry


@mcp.tool()
async def ingest_parse_sheet(sheet_path: str) -> str:
    """Parse a sheet annotation file and summarize it.

    Args:
        sheet_path: Path to the sheet annotation file
    """
    try:
        sheet = parse_sheet(sheet_path)
        return json.dumps({
            "status": "success",
            "sheet_id": sheet.sheet_id,
            "size": [sheet.width, sheet.height],
            "regions": len(sheet.regions),
            "groups": len(sheet.groups),
            "gt_location": sheet.gt_location,
        }, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
