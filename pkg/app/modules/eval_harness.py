"""
Evaluation metrics and result tables.

Linkage, phrase and error-analysis scores are kept as raw counts so per-sheet
rows and the corpus total (micro-averaged) come from the same numbers.
"""
import csv
import json
import logging
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Hashable, Iterable, List, Mapping, Optional, Sequence, Set, Tuple, Union

import numpy as np

from app.modules import mcp
from app.modules.consensus import LinkDecision, linked_edges, read_edges, textual_edges
from app.modules.errors import ContractError
from app.modules.geolocalizer import GeocodeMode, GeoEstimate, haversine_km
from app.modules.ingest import MapSheet, parse_sheet
from app.modules.phrase_graph import LocationPhrase, read_phrases

logger = logging.getLogger(__name__)

Edge = Tuple[str, str]
LatLng = Tuple[float, float]
PHRASE_MODES = ("duplicate", "distinct")
DEFAULT_HISTOGRAM_EDGES = (0.0, 10.0, 25.0, 50.0, 100.0, 250.0, 500.0, 1000.0)


@dataclass(frozen=True)
class Scores:
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class LinkageCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn) < 0:
            raise ContractError(f"negative counts {self}")

    def __add__(self, other: "LinkageCounts") -> "LinkageCounts":
        return LinkageCounts(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn)

    def scores(self) -> Scores:
        """P/R/F1 with 0 for empty denominators."""
        p = self.tp / (self.tp + self.fp) if self.tp + self.fp else 0.0
        r = self.tp / (self.tp + self.fn) if self.tp + self.fn else 0.0
        f1 = 2.0 * p * r / (p + r) if p + r else 0.0
        return Scores(p, r, f1)


@dataclass(frozen=True)
class GeoError:
    err_km: float
    err_scale: Optional[float] = None


@dataclass(frozen=True)
class HistogramCounts:
    edges: Tuple[float, ...]
    counts: Tuple[int, ...]
    overflow: int = 0
    underflow: int = 0

    @property
    def total(self) -> int:
        return sum(self.counts) + self.overflow + self.underflow


def gt_edges(groups: Iterable[Sequence[str]], chain: bool = False) -> Set[Edge]:
    """Ground-truth linkage: every ordered pair within a group, or only neighbours in reading order."""
    edges: Set[Edge] = set()
    for group in groups:
        if chain:
            for a, b in zip(group, group[1:]):
                edges.update({(a, b), (b, a)})
        else:
            edges.update((a, b) for a in group for b in group if a != b)
    return edges


def linkage_counts(pred_edges: Iterable[Edge], gt: Iterable[Edge]) -> LinkageCounts:
    pred, gold = set(pred_edges), set(gt)
    tp = len(pred & gold)
    return LinkageCounts(tp, len(pred) - tp, len(gold) - tp)


def linkage_prf(pred_edges: Iterable[Edge], gt: Iterable[Edge]) -> Scores:
    return linkage_counts(pred_edges, gt).scores()


def _match_counts(pred: Sequence[Hashable], gold: Sequence[Hashable], mode: str) -> LinkageCounts:
    if mode == "duplicate":
        tp = sum((Counter(pred) & Counter(gold)).values())
        return LinkageCounts(tp, len(pred) - tp, len(gold) - tp)
    if mode == "distinct":
        p, g = set(pred), set(gold)
        tp = len(p & g)
        return LinkageCounts(tp, len(p) - tp, len(g) - tp)
    raise ContractError(f"unknown phrase mode '{mode}'")


def phrase_counts(pred_phrases: Sequence[str], gt_phrases: Sequence[str], mode: str = "duplicate") -> LinkageCounts:
    return _match_counts(list(pred_phrases), list(gt_phrases), mode)


def phrase_prf(pred_phrases: Sequence[str], gt_phrases: Sequence[str], mode: str = "duplicate") -> Scores:
    """Exact string match (content and order) under multiset or set semantics."""
    return phrase_counts(pred_phrases, gt_phrases, mode).scores()


def ordered_group_prf(pred_groups: Sequence[Sequence[str]], gt_groups: Sequence[Sequence[str]],
                      mode: str = "duplicate") -> Scores:
    return _match_counts([tuple(g) for g in pred_groups], [tuple(g) for g in gt_groups], mode).scores()


def unordered_phrase_prf(pred_groups: Sequence[Sequence[str]], gt_groups: Sequence[Sequence[str]],
                         mode: str = "duplicate") -> Scores:
    """Like ordered_group_prf but comparing region-id sets."""
    return _match_counts([frozenset(g) for g in pred_groups], [frozenset(g) for g in gt_groups], mode).scores()


def geo_error(gt: LatLng, pred: LatLng, t_min: Optional[LatLng] = None,
              t_max: Optional[LatLng] = None) -> GeoError:
    err_km = haversine_km(gt, pred)
    if t_min is None or t_max is None:
        return GeoError(err_km)
    diagonal = haversine_km(t_min, t_max)
    if diagonal <= 0.0:
        raise ContractError("plot corners coincide")
    return GeoError(err_km, err_km / diagonal)


def error_decomposition(pred_groups: Sequence[Sequence[str]],
                        gt_groups: Sequence[Sequence[str]]) -> Tuple[int, int]:
    """(missing words, added words) after matching each GT group to its best-overlapping prediction.

    Overlap ties go to the smaller predicted group, then the earlier one. A GT
    group overlapping no prediction counts all its words as missing.
    """
    preds = [set(g) for g in pred_groups]
    n_miss = n_add = 0
    for gt in map(set, gt_groups):
        best = None
        for k, pred in enumerate(preds):
            overlap = len(gt & pred)
            if overlap == 0:
                continue
            key = (-overlap, len(pred), k)
            if best is None or key < best[0]:
                best = (key, pred)
        if best is None:
            n_miss += len(gt)
            continue
        pred = best[1]
        n_miss += len(gt - pred)
        n_add += len(pred - gt)
    return n_miss, n_add


def error_histogram(errors_km: Iterable[float],
                    bin_edges: Sequence[float] = DEFAULT_HISTOGRAM_EDGES) -> HistogramCounts:
    """Counts per half-open bin [e_i, e_i+1); values >= the last edge overflow."""
    edges = np.asarray(bin_edges, dtype=np.float64)
    if edges.size < 2 or np.any(np.diff(edges) <= 0):
        raise ContractError(f"histogram edges must be strictly increasing, got {list(bin_edges)}")
    values = np.asarray(list(errors_km), dtype=np.float64)
    idx = np.searchsorted(edges, values, side="right") - 1
    n_bins = edges.size - 1
    counts = np.bincount(idx[(idx >= 0) & (idx < n_bins)], minlength=n_bins)
    return HistogramCounts(tuple(float(e) for e in edges), tuple(int(c) for c in counts),
                           int(np.count_nonzero(idx >= n_bins)), int(np.count_nonzero(idx < 0)))


@dataclass(frozen=True)
class SheetPrediction:
    """Pipeline outputs for one sheet, as read back from disk."""
    sheet_id: str
    decisions: Tuple[LinkDecision, ...] = ()
    phrases: Tuple[LocationPhrase, ...] = ()
    estimates: Mapping[str, Optional[GeoEstimate]] = field(default_factory=dict)


@dataclass(frozen=True)
class SheetEvaluation:
    sheet_id: str
    textual: LinkageCounts
    consensus: LinkageCounts
    duplicate: LinkageCounts
    distinct: LinkageCounts
    ordered: LinkageCounts
    unordered: LinkageCounts
    n_miss: int
    n_add: int
    n_gt_phrases: int
    estimates: Mapping[str, Optional[GeoEstimate]]
    geo: Mapping[str, Optional[GeoError]]


def evaluate_sheet(sheet: MapSheet, prediction: SheetPrediction, chain: bool = False) -> SheetEvaluation:
    gold_edges = gt_edges(sheet.groups, chain)
    pred_groups = [p.region_ids for p in prediction.phrases]
    pred_texts = [p.text for p in prediction.phrases]
    gt_texts = list(sheet.group_texts())
    n_miss, n_add = error_decomposition(pred_groups, sheet.groups)

    geo: Dict[str, Optional[GeoError]] = {}
    for mode, estimate in prediction.estimates.items():
        if estimate is None or sheet.gt_location is None:
            geo[mode] = None
            continue
        corners = sheet.plot_corners or (None, None)
        geo[mode] = geo_error(sheet.gt_location, (estimate.lat, estimate.lng), *corners)

    return SheetEvaluation(
        sheet_id=sheet.sheet_id,
        textual=linkage_counts(textual_edges(prediction.decisions), gold_edges),
        consensus=linkage_counts(linked_edges(prediction.decisions), gold_edges),
        duplicate=phrase_counts(pred_texts, gt_texts, "duplicate"),
        distinct=phrase_counts(pred_texts, gt_texts, "distinct"),
        ordered=_match_counts([tuple(g) for g in pred_groups], [tuple(g) for g in sheet.groups], "duplicate"),
        unordered=_match_counts([frozenset(g) for g in pred_groups], [frozenset(g) for g in sheet.groups],
                                "duplicate"),
        n_miss=n_miss,
        n_add=n_add,
        n_gt_phrases=len(sheet.groups),
        estimates=dict(prediction.estimates),
        geo=geo,
    )


def _f(value: Optional[float]) -> str:
    return "" if value is None else f"{value:.6f}"


def _total(evaluations: Sequence[SheetEvaluation], attr: str) -> LinkageCounts:
    total = LinkageCounts()
    for ev in evaluations:
        total = total + getattr(ev, attr)
    return total


def _write(path: Path, header: List[str], rows: Iterable[List[object]]) -> Path:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def write_linkage_table(evaluations: Sequence[SheetEvaluation], path: Union[str, Path]) -> Path:
    def row(name, textual, consensus):
        t, c = textual.scores(), consensus.scores()
        return [name, _f(t.precision), _f(t.recall), _f(t.f1), _f(c.precision), _f(c.recall), _f(c.f1),
                textual.tp + textual.fn]

    rows = [row(ev.sheet_id, ev.textual, ev.consensus) for ev in evaluations]
    rows.append(row("ALL", _total(evaluations, "textual"), _total(evaluations, "consensus")))
    return _write(Path(path), ["sheet_id", "textual_precision", "textual_recall", "textual_f1",
                               "consensus_precision", "consensus_recall", "consensus_f1", "gt_edges"], rows)


def write_phrase_table(evaluations: Sequence[SheetEvaluation], path: Union[str, Path]) -> Path:
    def row(name, dup, dist, n_gt):
        d, s = dup.scores(), dist.scores()
        return [name, _f(d.precision), _f(d.recall), _f(d.f1), _f(s.precision), _f(s.recall), _f(s.f1), n_gt]

    rows = [row(ev.sheet_id, ev.duplicate, ev.distinct, ev.n_gt_phrases) for ev in evaluations]
    rows.append(row("ALL", _total(evaluations, "duplicate"), _total(evaluations, "distinct"),
                    sum(ev.n_gt_phrases for ev in evaluations)))
    return _write(Path(path), ["sheet_id", "duplicate_precision", "duplicate_recall", "duplicate_f1",
                               "distinct_precision", "distinct_recall", "distinct_f1", "gt_phrases"], rows)


def write_geolocation_table(evaluations: Sequence[SheetEvaluation], path: Union[str, Path]) -> Path:
    rows = []
    for ev in evaluations:
        for mode in sorted(ev.estimates):
            estimate, error = ev.estimates[mode], ev.geo.get(mode)
            rows.append([
                ev.sheet_id, mode,
                "-" if estimate is None else _f(estimate.lat),
                "-" if estimate is None else _f(estimate.lng),
                "-" if error is None else _f(error.err_km),
                "-" if error is None or error.err_scale is None else _f(error.err_scale),
            ])
    return _write(Path(path), ["sheet_id", "mode", "lat", "lng", "err_km", "err_scale"], rows)


def write_error_table(evaluations: Sequence[SheetEvaluation], path: Union[str, Path]) -> Path:
    def row(name, unordered, ordered, n_miss, n_add, n_gt):
        u, o = unordered.scores(), ordered.scores()
        return [name, _f(u.precision), _f(u.recall), _f(o.precision), _f(o.recall), n_miss, n_add, n_gt]

    rows = [row(ev.sheet_id, ev.unordered, ev.ordered, ev.n_miss, ev.n_add, ev.n_gt_phrases)
            for ev in evaluations]
    rows.append(row("ALL", _total(evaluations, "unordered"), _total(evaluations, "ordered"),
                    sum(ev.n_miss for ev in evaluations), sum(ev.n_add for ev in evaluations),
                    sum(ev.n_gt_phrases for ev in evaluations)))
    return _write(Path(path), ["sheet_id", "unordered_precision", "unordered_recall", "ordered_precision",
                               "ordered_recall", "missing_words", "added_words", "gt_phrases"], rows)


def write_histogram_table(evaluations: Sequence[SheetEvaluation], path: Union[str, Path],
                          bin_edges: Sequence[float] = DEFAULT_HISTOGRAM_EDGES) -> Path:
    modes = sorted({m for ev in evaluations for m in ev.geo})
    hists = {m: error_histogram([ev.geo[m].err_km for ev in evaluations if ev.geo.get(m) is not None], bin_edges)
             for m in modes}
    edges = list(bin_edges)
    rows = []
    for i in range(len(edges) - 1):
        rows.append([_f(edges[i]), _f(edges[i + 1])] + [hists[m].counts[i] for m in modes])
    rows.append([_f(edges[-1]), "inf"] + [hists[m].overflow for m in modes])
    return _write(Path(path), ["bin_low", "bin_high"] + modes, rows)


def write_tables(evaluations: Sequence[SheetEvaluation], out_dir: Union[str, Path],
                 bin_edges: Sequence[float] = DEFAULT_HISTOGRAM_EDGES) -> List[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return [
        write_linkage_table(evaluations, out / "linkage.csv"),
        write_phrase_table(evaluations, out / "phrases.csv"),
        write_geolocation_table(evaluations, out / "geolocation.csv"),
        write_error_table(evaluations, out / "error_analysis.csv"),
        write_histogram_table(evaluations, out / "histogram.csv", bin_edges),
    ]


def read_estimates(path: Union[str, Path]) -> Dict[str, Optional[GeoEstimate]]:
    """Per-mode estimates from a ``.geo.json`` file."""
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    estimates = {}
    for mode in GeocodeMode:
        if mode.value not in data.get("estimates", {}):
            continue
        item = data["estimates"][mode.value]
        estimates[mode.value] = None if item is None else GeoEstimate(
            item["lat"], item["lng"], item["cluster_size"], item["total"], item.get("degraded", False))
    return estimates


def load_prediction(pred_dir: Union[str, Path], sheet_id: str) -> SheetPrediction:
    """Read ``<sheet>.edges``, ``<sheet>.phrases`` and ``<sheet>.geo.json`` (each optional)."""
    pred_dir = Path(pred_dir)
    edges = pred_dir / f"{sheet_id}.edges"
    phrases = pred_dir / f"{sheet_id}.phrases"
    geo = pred_dir / f"{sheet_id}.geo.json"
    return SheetPrediction(
        sheet_id,
        tuple(read_edges(edges)) if edges.exists() else (),
        tuple(read_phrases(phrases)[1]) if phrases.exists() else (),
        read_estimates(geo) if geo.exists() else {},
    )


def prediction_ids(pred_dir: Union[str, Path]) -> Set[str]:
    ids = set()
    for path in Path(pred_dir).iterdir():
        for suffix in (".edges", ".phrases", ".geo.json"):
            if path.name.endswith(suffix):
                ids.add(path.name[:-len(suffix)])
    return ids


@mcp.tool()
async def eval_sheet(sheet_path: str, pred_dir: str, chain_gt: bool = False) -> str:
    """Score one sheet's pipeline outputs against its annotations.

    Args:
        sheet_path: Ground-truth sheet annotation file
        pred_dir: Directory holding the sheet's .edges, .phrases and .geo.json outputs
        chain_gt: Use reading-order neighbours as linkage ground truth
    """
    try:
        sheet = parse_sheet(sheet_path)
        ev = evaluate_sheet(sheet, load_prediction(pred_dir, sheet.sheet_id), chain_gt)
        return json.dumps({
            "status": "success",
            "sheet_id": sheet.sheet_id,
            "linkage": {"textual": ev.textual.scores().__dict__, "consensus": ev.consensus.scores().__dict__},
            "phrases": {"duplicate": ev.duplicate.scores().__dict__, "distinct": ev.distinct.scores().__dict__},
            "errors": {"missing_words": ev.n_miss, "added_words": ev.n_add},
            "geolocation": {m: None if e is None else e.__dict__ for m, e in ev.geo.items()},
        }, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
