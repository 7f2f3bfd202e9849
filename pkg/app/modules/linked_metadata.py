"""
Linked metadata for map sheets.

Each sheet becomes an RDF resource typed :HistoricalMap with a :nearby point
(the estimated location) and one geo:sfOverlaps feature per location phrase.
A feature carries the phrase as rdfs:label and, when the phrase matched a
gazetteer entity, rdfs:seeAlso to the entity plus the entity's :point.
"""
import json
import logging
import os
import tempfile
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List, Optional, Sequence, Tuple, Union

import rdflib
from rapidfuzz.distance import Levenshtein
from rdflib.namespace import GEO, RDF, RDFS

from app.modules import connect_to_geocoder, mcp
from app.modules.errors import ContractError, ValidationError
from app.modules.geolocalizer import Gazetteer, GazetteerRecord, GeoEstimate
from app.modules.ingest import MapSheet
from app.modules.phrase_graph import LocationPhrase

logger = logging.getLogger(__name__)

BASE_IRI = "http://mapmeta.local/"
DEFAULT_RADIUS_KM = 50.0
DEFAULT_SIM_THRESHOLD = 0.8
SYNTAXES = {"ntriples": "nt", "nt": "nt", "xml": "xml"}

LatLng = Tuple[float, float]


def schema(base: str = BASE_IRI) -> rdflib.Namespace:
    return rdflib.Namespace(f"{base}schema#")


@dataclass(frozen=True)
class MapFeature:
    label: str
    region_ids: Tuple[str, ...] = ()
    see_also: Optional[str] = None
    point: Optional[LatLng] = None

    def __post_init__(self):
        if not self.label.strip():
            raise ValidationError("feature label must not be empty")


@dataclass(frozen=True)
class MapRecord:
    uri: str
    sheet_id: str
    nearby: Optional[LatLng]
    features: Tuple[MapFeature, ...] = ()

    def feature_uri(self, k: int) -> str:
        return f"{self.uri}/feature/{k}"


def string_similarity(a: str, b: str) -> float:
    """1 - levenshtein(a, b) / max(len(a), len(b)), case-insensitive."""
    a, b = a.lower(), b.lower()
    if not a or not b:
        raise ContractError("string similarity needs non-empty strings")
    return 1.0 - Levenshtein.distance(a, b) / max(len(a), len(b))


def match_entity(phrase: str, estimate: GeoEstimate, gazetteer: Gazetteer,
                 radius_km: float = DEFAULT_RADIUS_KM,
                 sim_threshold: float = DEFAULT_SIM_THRESHOLD) -> Optional[GazetteerRecord]:
    """Most similar gazetteer entry within radius_km; ties go to the nearer, then the lower URI."""
    best_key, best = None, None
    for record, dist in gazetteer.within(estimate.lat, estimate.lng, radius_km):
        sim = string_similarity(phrase, record.name)
        if sim < sim_threshold:
            continue
        key = (-sim, dist, record.uri)
        if best_key is None or key < best_key:
            best_key, best = key, record
    return best


def build_map_record(sheet: MapSheet, phrases: Sequence[LocationPhrase], estimate: Optional[GeoEstimate],
                     matches: Sequence[Optional[GazetteerRecord]], base: str = BASE_IRI) -> MapRecord:
    """One feature per phrase; ``matches`` is aligned with ``phrases``."""
    if len(matches) != len(phrases):
        raise ContractError(f"{len(phrases)} phrases but {len(matches)} match slots")
    features = tuple(
        MapFeature(phrase.text, phrase.region_ids,
                   None if match is None else match.uri,
                   None if match is None else (match.lat, match.lng))
        for phrase, match in zip(phrases, matches)
    )
    nearby = None if estimate is None else (estimate.lat, estimate.lng)
    return MapRecord(f"{base}{sheet.sheet_id}", sheet.sheet_id, nearby, features)


def _point_literal(point: LatLng, wkt: bool) -> rdflib.Literal:
    lat, lng = point
    if wkt:
        return rdflib.Literal(f"POINT({lng!r} {lat!r})", datatype=GEO.wktLiteral)
    return rdflib.Literal(f"{lat!r} {lng!r}")


def _parse_point(literal: rdflib.Literal) -> LatLng:
    text = str(literal).strip()
    if text.upper().startswith("POINT(") and text.endswith(")"):
        lng, lat = text[6:-1].split()
        return float(lat), float(lng)
    lat, lng = text.split()
    return float(lat), float(lng)


def record_graph(record: MapRecord, base: str = BASE_IRI, wkt: bool = False) -> rdflib.Graph:
    ns = schema(base)
    g = rdflib.Graph()
    g.bind("geo", GEO)
    g.bind("mm", ns)
    map_node = rdflib.URIRef(record.uri)
    g.add((map_node, RDF.type, ns.HistoricalMap))
    if record.nearby is not None:
        g.add((map_node, ns.nearby, _point_literal(record.nearby, wkt)))
    for k, feature in enumerate(record.features):
        node = rdflib.URIRef(record.feature_uri(k))
        g.add((map_node, GEO.sfOverlaps, node))
        g.add((node, RDFS.label, rdflib.Literal(feature.label)))
        if feature.see_also is not None:
            g.add((node, RDFS.seeAlso, rdflib.URIRef(feature.see_also)))
        if feature.point is not None:
            g.add((node, ns.point, _point_literal(feature.point, wkt)))
    return g


def emit_rdf(record: MapRecord, syntax: str = "ntriples", base: str = BASE_IRI, wkt: bool = False) -> str:
    """Serialize a record; N-Triples output is sorted line by line."""
    try:
        fmt = SYNTAXES[syntax]
    except KeyError:
        raise ContractError(f"unknown RDF syntax '{syntax}'") from None
    g = record_graph(record, base, wkt)
    if fmt == "xml":
        return g.serialize(format="xml")
    lines = sorted({line for line in g.serialize(format="nt").splitlines() if line.strip()})
    return "".join(line + "\n" for line in lines)


def parse_ntriples(text: str, base: str = BASE_IRI) -> MapRecord:
    """Rebuild a record from its N-Triples; region ids are not part of the triples."""
    ns = schema(base)
    g = rdflib.Graph()
    g.parse(data=text, format="nt")
    maps = sorted(g.subjects(RDF.type, ns.HistoricalMap))
    if len(maps) != 1:
        raise ValidationError(f"expected one map resource, found {len(maps)}")
    map_node = maps[0]
    uri = str(map_node)
    sheet_id = uri[len(base):] if uri.startswith(base) else uri.rsplit("/", 1)[-1]
    nearby_literal = g.value(map_node, ns.nearby)

    features = []
    prefix = f"{uri}/feature/"
    for node in g.objects(map_node, GEO.sfOverlaps):
        suffix = str(node)[len(prefix):] if str(node).startswith(prefix) else ""
        if not suffix.isdigit():
            raise ValidationError(f"unexpected feature URI {node}")
        label = g.value(node, RDFS.label)
        if label is None:
            raise ValidationError(f"feature {node} has no label")
        see_also = g.value(node, RDFS.seeAlso)
        point = g.value(node, ns.point)
        features.append((int(suffix), MapFeature(
            str(label), (), None if see_also is None else str(see_also),
            None if point is None else _parse_point(point))))
    features.sort(key=lambda item: item[0])
    if [k for k, _ in features] != list(range(len(features))):
        raise ValidationError(f"feature numbering of {uri} has gaps")
    return MapRecord(uri, sheet_id, None if nearby_literal is None else _parse_point(nearby_literal),
                     tuple(f for _, f in features))


def query_maps(records: Iterable[MapRecord], gazetteer: Gazetteer, feature_type: Optional[str] = None,
               min_elevation: Optional[float] = None) -> List[str]:
    """Sheet ids of maps linking at least one entity of the type at or above the elevation.

    The elevation bound is inclusive: an entity at exactly ``min_elevation``
    passes, one without an elevation never does. Walks entity -> seeAlso ->
    feature -> sfOverlaps -> map; URIs missing from the gazetteer are skipped.
    """
    hits = set()
    for record in records:
        for feature in record.features:
            if feature.see_also is None:
                continue
            entity = gazetteer.resolve(feature.see_also)
            if entity is None:
                logger.warning("Map %s links unknown entity %s", record.sheet_id, feature.see_also)
                continue
            if feature_type is not None and entity.feature_type != feature_type:
                continue
            if min_elevation is not None and (entity.elevation is None or entity.elevation < min_elevation):
                continue
            hits.add(record.sheet_id)
    return sorted(hits)


class RecordStore:
    """Directory of ``<sheet_id>.nt`` files; writes are serialized and atomic."""

    def __init__(self, directory: Union[str, Path], base: str = BASE_IRI, wkt: bool = False):
        self.directory = Path(directory)
        self.base = base
        self.wkt = wkt
        self._lock = threading.Lock()

    def path_for(self, sheet_id: str) -> Path:
        return self.directory / f"{sheet_id}.nt"

    def put(self, record: MapRecord) -> Path:
        text = emit_rdf(record, "ntriples", self.base, self.wkt)
        path = self.path_for(record.sheet_id)
        with self._lock:
            self.directory.mkdir(parents=True, exist_ok=True)
            fd, tmp = tempfile.mkstemp(dir=self.directory, suffix=".tmp")
            try:
                with os.fdopen(fd, "w", encoding="utf-8") as fh:
                    fh.write(text)
                os.replace(tmp, path)
            except BaseException:
                Path(tmp).unlink(missing_ok=True)
                raise
        return path

    def get(self, sheet_id: str) -> Optional[MapRecord]:
        path = self.path_for(sheet_id)
        if not path.exists():
            return None
        return parse_ntriples(path.read_text(encoding="utf-8"), self.base)

    def all(self) -> List[MapRecord]:
        if not self.directory.is_dir():
            return []
        return [parse_ntriples(p.read_text(encoding="utf-8"), self.base)
                for p in sorted(self.directory.glob("*.nt"))]


@mcp.tool()
async def metadata_match_phrase(phrase: str, lat: float, lng: float,
                                radius_km: float = DEFAULT_RADIUS_KM,
                                sim_threshold: float = DEFAULT_SIM_THRESHOLD) -> str:
    """Match a location phrase to a gazetteer entity near a point.

    Args:
        phrase: Location phrase text
        lat: Latitude of the sheet's estimated location
        lng: Longitude of the sheet's estimated location
        radius_km: Search radius in km
        sim_threshold: Minimum normalized string similarity
    """
    try:
        gazetteer = connect_to_geocoder()
        if not isinstance(gazetteer, Gazetteer):
            return json.dumps({"status": "error", "message": "Entity matching needs an offline gazetteer"})
        record = match_entity(phrase, GeoEstimate(lat, lng, 1, 1), gazetteer, radius_km, sim_threshold)
        if record is None:
            return json.dumps({"status": "success", "phrase": phrase, "match": None})
        return json.dumps({
            "status": "success",
            "phrase": phrase,
            "match": {"name": record.name, "uri": record.uri, "type": record.feature_type,
                      "elevation": record.elevation, "lat": record.lat, "lng": record.lng,
                      "similarity": string_similarity(phrase, record.name)},
        }, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})


@mcp.tool()
async def metadata_query_maps(records_dir: str, feature_type: str = "peak", min_elevation: float = None) -> str:
    """Find maps that show entities of a type above an elevation.

    Args:
        records_dir: Directory of per-map N-Triples files
        feature_type: Gazetteer feature type, e.g. peak
        min_elevation: Minimum elevation in meters
    """
    try:
        gazetteer = connect_to_geocoder()
        if not isinstance(gazetteer, Gazetteer):
            return json.dumps({"status": "error", "message": "Map queries need an offline gazetteer"})
        maps = query_maps(RecordStore(records_dir).all(), gazetteer, feature_type, min_elevation)
        return json.dumps({"status": "success", "count": len(maps), "maps": maps}, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
