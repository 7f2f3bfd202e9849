"""
Synthetic annotated corpus.

Each sheet carries several multi-word location phrases (words sharing font
size and orientation, spaced 0.4 font heights apart), single-word distractors
in other font sizes, and one trap: a small-font word set just below the first
word of a phrase. A gazetteer places every phrase within a few km of the
sheet's planted location and scatters decoy entries for generic words.
"""
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from shapely.geometry import Polygon

from app.modules import mcp
from app.modules.features import EMBEDDING_DIM, EmbeddingTable, write_embeddings
from app.modules.geolocalizer import Gazetteer, GazetteerRecord
from app.modules.ingest import MapSheet, TextRegion, write_sheet

logger = logging.getLogger(__name__)

MODIFIERS = (
    "Black", "Fall", "Cedar", "Pine", "Eagle", "Silver", "Bear", "Lone", "Red", "Granite", "Sandy",
    "Willow", "Iron", "Coyote", "Deer", "Modoc", "Vermont", "Lava", "Elk", "Owl", "Hidden", "Twin",
    "Crystal", "Dry",
)
GENERICS = (
    "River", "Crater", "Creek", "Ridge", "Peak", "Lake", "Canyon", "Mesa", "Rock", "Spring", "Valley",
    "Pass", "Hollow", "Flat", "Mountain", "Wash", "Meadow", "Street", "Beds", "Butte",
)
TOWNS = (
    "Burgettville", "Amboy", "Cadiz", "Danby", "Essex", "Goffs", "Fenner", "Ludlow", "Bagdad", "Siberia",
    "Klondike", "Homer", "Ibis", "Java", "Kelso", "Lanfair", "Vidal", "Rice", "Blythe", "Midland",
)
FEATURE_TYPES = {
    "Peak": "peak", "Mountain": "peak", "Crater": "peak", "Butte": "peak", "Ridge": "ridge",
    "River": "stream", "Creek": "stream", "Wash": "stream", "Lake": "lake", "Spring": "spring",
}

CHAR_WIDTH = 0.6
WORD_GAP = 0.4
EMBEDDING_STD = 0.3
ENTITY_BASE = "http://gazetteer.local/entity/"


@dataclass(frozen=True)
class SyntheticCorpus:
    sheets: Tuple[MapSheet, ...]
    gazetteer: Gazetteer
    embeddings: EmbeddingTable


def word_quad(x: float, y: float, text: str, height: float, angle_deg: float = 0.0):
    """Box of a word whose baseline starts at (x, y), rotated clockwise by angle_deg."""
    t = math.radians(angle_deg)
    ux, uy = math.cos(t), math.sin(t)
    vx, vy = -uy, ux
    width = CHAR_WIDTH * height * len(text)
    return (
        (x, y),
        (x + width * ux, y + width * uy),
        (x + width * ux + height * vx, y + width * uy + height * vy),
        (x + height * vx, y + height * vy),
    )


def phrase_quads(x: float, y: float, words: Sequence[str], height: float, angle_deg: float = 0.0):
    t = math.radians(angle_deg)
    quads = []
    for word in words:
        quads.append(word_quad(x, y, word, height, angle_deg))
        step = CHAR_WIDTH * height * len(word) + WORD_GAP * height
        x, y = x + step * math.cos(t), y + step * math.sin(t)
    return quads


def fall_river_sheet() -> MapSheet:
    """Two-word phrase with a small-font town name tucked under its first word."""
    regions = (
        TextRegion.from_polygon("f", "Fall", ((60, 100), (140, 100), (140, 140), (60, 140))),
        TextRegion.from_polygon("r", "River", ((160, 100), (260, 100), (260, 140), (160, 140))),
        TextRegion.from_polygon("b", "Burgettville", ((50, 146), (146, 146), (146, 162), (50, 162))),
    )
    return MapSheet("fall-river", 400, 300, regions, (("f", "r"), ("b",)))


class _Layout:
    """Rejection sampler keeping items apart by a margin."""

    def __init__(self, width: int, height: int, rng: np.random.Generator):
        self.width, self.height, self.rng = width, height, rng
        self.occupied: List[Polygon] = []

    def fits(self, quads, margin: float) -> bool:
        hull = Polygon([p for q in quads for p in q]).convex_hull
        minx, miny, maxx, maxy = hull.bounds
        if minx < 0 or miny < 0 or maxx > self.width or maxy > self.height:
            return False
        zone = hull.buffer(margin)
        return not any(zone.intersects(other) for other in self.occupied)

    def claim(self, quads) -> None:
        self.occupied.append(Polygon([p for q in quads for p in q]).convex_hull)

    def place(self, build, margin: float, tries: int = 400):
        for _ in range(tries):
            x = float(self.rng.uniform(0, self.width))
            y = float(self.rng.uniform(0, self.height))
            quads = build(x, y)
            if self.fits(quads, margin):
                self.claim(quads)
                return quads
        return None


def _phrase_pool(rng: np.random.Generator, count: int) -> List[Tuple[str, ...]]:
    seen = set()
    phrases: List[Tuple[str, ...]] = []
    while len(phrases) < count:
        generic = GENERICS[rng.integers(len(GENERICS))]
        if rng.random() < 0.7:
            words = (MODIFIERS[rng.integers(len(MODIFIERS))], generic)
        else:
            a, b = rng.choice(len(MODIFIERS), size=2, replace=False)
            words = (MODIFIERS[a], MODIFIERS[b], generic)
        if words not in seen:
            seen.add(words)
            phrases.append(words)
    return phrases


def _make_sheet(index: int, phrases: List[Tuple[str, ...]], rng: np.random.Generator,
                n_distractors: int, width: int, height: int) -> Tuple[MapSheet, List[str]]:
    layout = _Layout(width, height, rng)
    items: List[Tuple[List[str], list]] = []  # (texts, quads) per GT group
    towns: List[str] = []

    for k, words in enumerate(phrases):
        h = float(rng.uniform(24, 48))
        angle = 0.0 if k == 0 or rng.random() < 0.7 else float(rng.uniform(-40, 40))
        if k == 0:
            # trap under the first word
            hs = 0.4 * h
            trap = TOWNS[rng.integers(len(TOWNS))]

            def build(x, y, words=words, h=h, hs=hs, trap=trap):
                quads = phrase_quads(x, y, words, h)
                return quads + [word_quad(x - 0.1 * h, y + 1.15 * h, trap, hs)]

            quads = layout.place(build, margin=2.0 * h)
            if quads is None:
                continue
            items.append((list(words), quads[:-1]))
            items.append(([trap], quads[-1:]))
            towns.append(trap)
            continue
        quads = layout.place(lambda x, y, words=words, h=h, angle=angle: phrase_quads(x, y, words, h, angle),
                             margin=2.0 * h)
        if quads is not None:
            items.append((list(words), quads))

    for _ in range(n_distractors):
        town = TOWNS[rng.integers(len(TOWNS))]
        text = town.upper() if rng.random() < 0.3 else town
        h = float(rng.uniform(10, 18)) if rng.random() < 0.5 else float(rng.uniform(60, 80))
        quads = layout.place(lambda x, y, text=text, h=h: [word_quad(x, y, text, h)], margin=2.0 * h)
        if quads is not None:
            items.append(([text], quads))
            towns.append(text)

    order = rng.permutation(sum(len(texts) for texts, _ in items))
    regions: List[TextRegion] = []
    groups: List[Tuple[str, ...]] = []
    slot = 0
    slots: Dict[int, TextRegion] = {}
    for texts, quads in items:
        group = []
        for text, quad in zip(texts, quads):
            rid = f"w{int(order[slot]):03d}"
            slots[int(order[slot])] = TextRegion.from_polygon(rid, text, quad)
            group.append(rid)
            slot += 1
        groups.append(tuple(group))
    regions = [slots[i] for i in sorted(slots)]

    lat = float(rng.uniform(32.0, 47.0))
    lng = float(rng.uniform(-120.0, -80.0))
    corners = ((lat - 0.125, lng - 0.125), (lat + 0.125, lng + 0.125))
    sheet = MapSheet(f"synth-{index:03d}", width, height, tuple(regions), tuple(groups), (lat, lng), corners)
    return sheet, towns


def generate_corpus(n_sheets: int = 20, seed: int = 0, phrases_per_sheet: int = 6,
                    n_distractors: int = 4, width: int = 2400, height: int = 1800) -> SyntheticCorpus:
    rng = np.random.default_rng(seed)
    pool = _phrase_pool(rng, n_sheets * phrases_per_sheet)
    sheets = []
    records: List[GazetteerRecord] = []

    def add_record(name: str, lat: float, lng: float, feature_type: str, elevation: Optional[float]):
        records.append(GazetteerRecord(name, round(lat, 6), round(lng, 6), feature_type, elevation,
                                       f"{ENTITY_BASE}{len(records)}"))

    for i in range(n_sheets):
        words = pool[i * phrases_per_sheet:(i + 1) * phrases_per_sheet]
        sheet, towns = _make_sheet(i, list(words), rng, n_distractors, width, height)
        sheets.append(sheet)
        lat, lng = sheet.gt_location
        for text in sheet.group_texts():
            if text in towns:
                continue
            kind = FEATURE_TYPES.get(text.split()[-1], "populated place")
            elevation = round(float(rng.uniform(300, 3000)), 1) if kind == "peak" else None
            add_record(text, lat + rng.uniform(-0.02, 0.02), lng + rng.uniform(-0.02, 0.02), kind, elevation)
        for town in towns:
            add_record(town.title(), lat + rng.uniform(-0.02, 0.02), lng + rng.uniform(-0.02, 0.02),
                       "populated place", None)

    # decoys for generic words, far from every sheet
    for word in GENERICS + MODIFIERS:
        for _ in range(2):
            add_record(word, float(rng.uniform(-40.0, -10.0)), float(rng.uniform(110.0, 150.0)),
                       FEATURE_TYPES.get(word, "populated place"), None)

    vocab = sorted({w.lower() for w in MODIFIERS + GENERICS + TOWNS})
    vectors = {}
    for token in vocab:
        vec = rng.normal(0.0, EMBEDDING_STD, EMBEDDING_DIM)
        vec.setflags(write=False)
        vectors[token] = vec
    logger.info("Generated %d sheets, %d gazetteer records", len(sheets), len(records))
    return SyntheticCorpus(tuple(sheets), Gazetteer(records), EmbeddingTable(EMBEDDING_DIM, vectors))


def write_corpus(corpus: SyntheticCorpus, out_dir: Union[str, Path]) -> Dict[str, Path]:
    """Write ``sheets/*.sheet``, ``gazetteer.tsv`` and ``embeddings.txt``."""
    out = Path(out_dir)
    sheets_dir = out / "sheets"
    sheets_dir.mkdir(parents=True, exist_ok=True)
    for sheet in corpus.sheets:
        write_sheet(sheet, sheets_dir / f"{sheet.sheet_id}.sheet")
    return {
        "sheets": sheets_dir,
        "gazetteer": corpus.gazetteer.write(out / "gazetteer.tsv"),
        "embeddings": write_embeddings(corpus.embeddings, out / "embeddings.txt"),
    }


@mcp.tool()
async def synth_generate_corpus(out_dir: str, n_sheets: int = 20, seed: int = 0) -> str:
    """Generate a synthetic annotated corpus with its gazetteer and embeddings.

    Args:
        out_dir: Directory to write into
        n_sheets: Number of sheets
        seed: Random seed
    """
    try:
        corpus = generate_corpus(n_sheets, seed)
        paths = write_corpus(corpus, out_dir)
        return json.dumps({
            "status": "success",
            "sheets": len(corpus.sheets),
            "gazetteer_records": len(corpus.gazetteer),
            "paths": {k: str(v) for k, v in paths.items()},
        }, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
