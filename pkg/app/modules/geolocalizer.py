"""
Sheet geolocalization.

Location phrases (or single words) are geocoded into candidate coordinates,
the candidates are clustered with DBSCAN under the haversine distance, and the
centroid of the largest cluster is the sheet's estimated location.
"""
import csv
import json
import logging
import math
import random
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from enum import Enum
from pathlib import Path
from typing import Dict, List, Optional, Protocol, Sequence, Tuple, Union

import numpy as np
import requests
from sklearn.cluster import DBSCAN

from app.modules import connect_to_geocoder, mcp
from app.modules.errors import ContractError, GeocoderTransportError, SheetParseError, ValidationError
from app.modules.ingest import MapSheet, parse_sheet

logger = logging.getLogger(__name__)

EARTH_RADIUS_KM = 6371.0088
DEFAULT_EPS_KM = 10.0
DEFAULT_MIN_PTS = 3

# Default timeout for HTTP requests (connect timeout, read timeout)
DEFAULT_TIMEOUT = (10, 30)
MAX_RETRIES = 3
RETRY_BACKOFF = 0.5


class GeocodeMode(str, Enum):
    PHRASE_BY_PHRASE = "phrase_by_phrase"
    WORD_BY_WORD = "word_by_word"
    WORD2PARAGRAPH = "word2paragraph"


def _check_coordinates(lat: float, lng: float) -> None:
    if not (-90.0 <= lat <= 90.0 and -180.0 <= lng <= 180.0):
        raise ValidationError(f"coordinates ({lat}, {lng}) out of range")


@dataclass(frozen=True)
class GeoCandidate:
    source: str
    lat: float
    lng: float
    rank: int = 0

    def __post_init__(self):
        _check_coordinates(self.lat, self.lng)


@dataclass(frozen=True)
class GeoEstimate:
    lat: float
    lng: float
    cluster_size: int
    total: int
    degraded: bool = False

    def __post_init__(self):
        _check_coordinates(self.lat, self.lng)
        if self.cluster_size > self.total:
            raise ValidationError("cluster larger than the candidate set")

    def to_dict(self) -> Dict[str, object]:
        return {"lat": self.lat, "lng": self.lng, "cluster_size": self.cluster_size,
                "total": self.total, "degraded": self.degraded}


@dataclass(frozen=True)
class GazetteerRecord:
    name: str
    lat: float
    lng: float
    feature_type: str
    elevation: Optional[float]
    uri: str

    def __post_init__(self):
        if not self.name.strip():
            raise ValidationError("gazetteer record with empty name")
        _check_coordinates(self.lat, self.lng)


class Geocoder(Protocol):
    def geocode(self, query: str) -> List[GeoCandidate]:
        ...


class Gazetteer:
    """Offline geocoder over a tab-separated gazetteer file."""

    def __init__(self, records: Sequence[GazetteerRecord]):
        self.records = tuple(records)
        self.by_uri: Dict[str, GazetteerRecord] = {}
        for record in self.records:
            if record.uri in self.by_uri:
                raise ValidationError(f"duplicate gazetteer URI {record.uri}")
            self.by_uri[record.uri] = record
        self._names = [r.name.lower() for r in self.records]

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def load(cls, path: Union[str, Path]) -> "Gazetteer":
        records = []
        with open(path, encoding="utf-8", newline="") as fh:
            for lineno, row in enumerate(csv.reader(fh, delimiter="\t"), 1):
                if not row or row[0].startswith("#"):
                    continue
                if len(row) != 6:
                    raise SheetParseError(f"expected 6 tab-separated fields, got {len(row)}",
                                          str(path), lineno, "record")
                name, lat, lng, feature_type, elevation, uri = row
                try:
                    records.append(GazetteerRecord(
                        name.strip(), float(lat), float(lng), feature_type.strip(),
                        None if elevation.strip() in ("", "-") else float(elevation), uri.strip()))
                except ValueError as e:
                    raise SheetParseError(str(e), str(path), lineno, "record") from None
        logger.debug("Loaded %d gazetteer records from %s", len(records), path)
        return cls(records)

    def write(self, path: Union[str, Path]) -> Path:
        path = Path(path)
        with open(path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            for r in self.records:
                writer.writerow([r.name, repr(r.lat), repr(r.lng), r.feature_type,
                                 "-" if r.elevation is None else repr(r.elevation), r.uri])
        return path

    def lookup(self, query: str) -> List[GazetteerRecord]:
        """Case-insensitive exact matches; prefix matches only when nothing matches exactly."""
        q = query.strip().lower()
        if not q:
            raise ContractError("empty geocoding query")
        exact = [r for r, name in zip(self.records, self._names) if name == q]
        if exact:
            return exact
        return [r for r, name in zip(self.records, self._names) if name.startswith(q)]

    def geocode(self, query: str) -> List[GeoCandidate]:
        return [GeoCandidate(query, r.lat, r.lng, rank) for rank, r in enumerate(self.lookup(query))]

    def resolve(self, uri: str) -> Optional[GazetteerRecord]:
        return self.by_uri.get(uri)

    def within(self, lat: float, lng: float, radius_km: float) -> List[Tuple[GazetteerRecord, float]]:
        """Records within radius_km of the point, with their distances, in file order."""
        if not self.records:
            return []
        lats = np.array([r.lat for r in self.records])
        lngs = np.array([r.lng for r in self.records])
        dist = _haversine(lat, lng, lats, lngs)
        return [(r, float(d)) for r, d in zip(self.records, dist) if d <= radius_km]


class HttpGeocoder:
    """GET ``<url>?q=<query>`` returning a JSON list of ``{"lat", "lng"}`` in rank order.

    Requests are spaced at least 1 / rate_limit seconds apart across threads.
    Connection errors, timeouts, 429 and 5xx responses are retried with
    jittered exponential backoff; any other 4xx fails at once.
    """

    def __init__(self, url: str, rate_limit: float = 1.0, retries: int = MAX_RETRIES,
                 backoff: float = RETRY_BACKOFF, timeout=DEFAULT_TIMEOUT,
                 session: Optional[requests.Session] = None):
        if rate_limit <= 0:
            raise ContractError("rate limit must be positive")
        self.url = url
        self.min_interval = 1.0 / rate_limit
        self.retries = max(1, retries)
        self.backoff = backoff
        self.timeout = timeout
        self.session = session or requests.Session()
        self.lock = threading.Lock()
        self.last_request_time = 0.0

    def _wait_turn(self) -> None:
        with self.lock:
            elapsed = time.monotonic() - self.last_request_time
            if elapsed < self.min_interval:
                time.sleep(self.min_interval - elapsed)
            self.last_request_time = time.monotonic()

    def _fetch(self, query: str):
        last_error = None
        for attempt in range(self.retries):
            self._wait_turn()
            try:
                response = self.session.get(self.url, params={"q": query}, timeout=self.timeout)
                if response.status_code == 429 or response.status_code >= 500:
                    raise requests.exceptions.HTTPError(f"HTTP {response.status_code}")
            except (requests.exceptions.ConnectionError, requests.exceptions.Timeout,
                    requests.exceptions.HTTPError) as e:
                last_error = e
                if attempt < self.retries - 1:
                    delay = self.backoff * (2 ** attempt) + random.uniform(0, self.backoff)
                    logger.warning("Geocoder request for '%s' failed (%s), retry %d/%d in %.2fs",
                                   query, e, attempt + 1, self.retries - 1, delay)
                    time.sleep(delay)
                continue
            # any other 4xx is final
            if response.status_code >= 400:
                raise GeocoderTransportError(f"geocoder rejected '{query}': HTTP {response.status_code}")
            try:
                return response.json()
            except ValueError as e:
                raise GeocoderTransportError(f"geocoder returned invalid JSON for '{query}': {e}") from e
        raise GeocoderTransportError(f"geocoder unreachable for '{query}': {last_error}")

    def geocode(self, query: str) -> List[GeoCandidate]:
        if not query.strip():
            raise ContractError("empty geocoding query")
        payload = self._fetch(query)
        if not isinstance(payload, list):
            raise GeocoderTransportError(f"geocoder response for '{query}' is not a list")
        candidates = []
        for item in payload:
            try:
                candidates.append(GeoCandidate(query, float(item["lat"]), float(item["lng"]), len(candidates)))
            except (KeyError, TypeError, ValueError) as e:
                logger.warning("Skipping malformed geocoder result %r for '%s': %s", item, query, e)
        return candidates


def _haversine(lat1, lng1, lat2, lng2):
    lat1, lng1, lat2, lng2 = (np.radians(v) for v in (lat1, lng1, lat2, lng2))
    h = np.sin((lat2 - lat1) / 2.0) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lng2 - lng1) / 2.0) ** 2
    return 2.0 * EARTH_RADIUS_KM * np.arcsin(np.sqrt(np.clip(h, 0.0, 1.0)))


def haversine_km(g: Tuple[float, float], p: Tuple[float, float]) -> float:
    """Great-circle distance in km between two (lat, lng) points in degrees."""
    return float(_haversine(g[0], g[1], p[0], p[1]))


def haversine_matrix(points: Sequence[Tuple[float, float]]) -> np.ndarray:
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    return _haversine(pts[:, None, 0], pts[:, None, 1], pts[None, :, 0], pts[None, :, 1])


@dataclass(frozen=True)
class DbscanResult:
    labels: Tuple[int, ...]
    clusters: Tuple[Tuple[int, ...], ...]
    noise: Tuple[int, ...]


def dbscan(points: Sequence[Tuple[float, float]], eps_km: float = DEFAULT_EPS_KM,
           min_pts: int = DEFAULT_MIN_PTS) -> DbscanResult:
    """DBSCAN over haversine distances; labels are cluster indices, -1 for noise."""
    if eps_km <= 0 or min_pts < 1:
        raise ContractError("dbscan needs eps_km > 0 and min_pts >= 1")
    if len(points) == 0:
        return DbscanResult((), (), ())
    fitted = DBSCAN(eps=eps_km, min_samples=min_pts, metric="precomputed").fit(haversine_matrix(points))
    labels = tuple(int(v) for v in fitted.labels_)
    n_clusters = max(labels) + 1
    clusters = tuple(tuple(i for i, lab in enumerate(labels) if lab == k) for k in range(n_clusters))
    noise = tuple(i for i, lab in enumerate(labels) if lab < 0)
    return DbscanResult(labels, clusters, noise)


def estimate_location(candidates: Sequence[GeoCandidate], eps_km: float = DEFAULT_EPS_KM,
                      min_pts: int = DEFAULT_MIN_PTS) -> GeoEstimate:
    """Centroid of the largest DBSCAN cluster.

    Ties go to the cluster whose members sit closest to their centroid, then to
    the first cluster formed. With no cluster at all the mean of every
    candidate is returned, flagged as degraded.
    """
    if not candidates:
        raise ContractError("cannot estimate a location without candidates")
    points = np.array([(c.lat, c.lng) for c in candidates])
    result = dbscan(points, eps_km, min_pts)
    if not result.clusters:
        lat, lng = points.mean(axis=0)
        return GeoEstimate(float(lat), float(lng), 0, len(candidates), degraded=True)

    def key(item):
        k, members = item
        centroid = points[list(members)].mean(axis=0)
        spread = float(np.mean(_haversine(points[list(members), 0], points[list(members), 1],
                                          centroid[0], centroid[1])))
        return -len(members), spread, k

    _, best = min(enumerate(result.clusters), key=key)
    lat, lng = points[list(best)].mean(axis=0)
    return GeoEstimate(float(lat), float(lng), len(best), len(candidates))


def geocode_sheet(texts: Sequence[str], mode: Union[str, GeocodeMode], client: Geocoder,
                  workers: int = 4) -> List[GeoCandidate]:
    """Geocode phrases one by one, words one by one, or all words as one paragraph."""
    mode = GeocodeMode(mode)
    if mode == GeocodeMode.PHRASE_BY_PHRASE:
        queries = [t.strip() for t in texts if t.strip()]
    else:
        words = [w for t in texts for w in t.split()]
        queries = words if mode == GeocodeMode.WORD_BY_WORD else ([" ".join(words)] if words else [])
    if not queries:
        return []

    def call(query: str):
        try:
            return client.geocode(query)
        except GeocoderTransportError as e:
            logger.warning("Geocoding '%s' failed: %s", query, e)
            return e

    with ThreadPoolExecutor(max_workers=max(1, min(workers, len(queries)))) as pool:
        responses = list(pool.map(call, queries))
    failures = [r for r in responses if isinstance(r, GeocoderTransportError)]
    if len(failures) == len(responses):
        raise GeocoderTransportError(f"all {len(queries)} geocoding calls failed: {failures[0]}")

    candidates = []
    for response in responses:
        if isinstance(response, GeocoderTransportError):
            continue
        if mode == GeocodeMode.WORD2PARAGRAPH:
            response = response[:1]
        candidates.extend(response)
    return candidates


def geolocate_sheet(sheet: MapSheet, phrases: Sequence[str], mode: Union[str, GeocodeMode],
                    client: Geocoder, eps_km: float = DEFAULT_EPS_KM, min_pts: int = DEFAULT_MIN_PTS,
                    workers: int = 4) -> Optional[GeoEstimate]:
    """Estimate a sheet's location; None when the geocoder found nothing."""
    mode = GeocodeMode(mode)
    texts = phrases if mode == GeocodeMode.PHRASE_BY_PHRASE else [r.text for r in sheet.regions]
    candidates = geocode_sheet(texts, mode, client, workers)
    if not candidates:
        logger.info("Sheet %s: no geocoding candidates in %s mode", sheet.sheet_id, mode.value)
        return None
    estimate = estimate_location(candidates, eps_km, min_pts)
    logger.debug("Sheet %s (%s): %d candidates, cluster of %d", sheet.sheet_id, mode.value,
                 estimate.total, estimate.cluster_size)
    return estimate


@mcp.tool()
async def geolocalizer_geocode(query: str) -> str:
    """Geocode a place name with the configured geocoder.

    Args:
        query: Word or phrase to geocode
    """
    try:
        candidates = connect_to_geocoder().geocode(query)
        return json.dumps({
            "status": "success",
            "query": query,
            "count": len(candidates),
            "candidates": [{"lat": c.lat, "lng": c.lng, "rank": c.rank} for c in candidates],
        }, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})


@mcp.tool()
async def geolocalizer_locate_sheet(sheet_path: str, phrases_path: str, mode: str = "phrase_by_phrase",
                                    eps_km: float = DEFAULT_EPS_KM, min_pts: int = DEFAULT_MIN_PTS) -> str:
    """Estimate where a sheet is from its location phrases.

    Args:
        sheet_path: Path to the sheet annotation file
        phrases_path: Phrase file produced by the phrases stage
        mode: phrase_by_phrase, word_by_word or word2paragraph
        eps_km: DBSCAN neighbourhood radius in km
        min_pts: DBSCAN minimum cluster density
    """
    try:
        from app.modules.phrase_graph import read_phrases

        sheet = parse_sheet(sheet_path)
        _, phrases = read_phrases(phrases_path)
        estimate = geolocate_sheet(sheet, [p.text for p in phrases], mode, connect_to_geocoder(),
                                   eps_km, min_pts)
        if estimate is None:
            return json.dumps({"status": "success", "sheet_id": sheet.sheet_id, "estimate": None})
        result = {"status": "success", "sheet_id": sheet.sheet_id, "estimate": estimate.to_dict()}
        if sheet.gt_location is not None:
            result["error_km"] = haversine_km(sheet.gt_location, (estimate.lat, estimate.lng))
        return json.dumps(result, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
