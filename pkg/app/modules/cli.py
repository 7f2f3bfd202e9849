"""
Command-line stages.

Every ``cmd_*`` function takes a resolved ``PipelineConfig`` and returns a
``CommandResult`` (exit code plus a JSON-able summary). Batch commands process
sheets in a thread pool and isolate per-sheet failures.

Per-sheet artifacts in the output directory:

    <sheet>.edges       linkage decisions
    <sheet>.phrases     location phrases
    <sheet>.geo.json    estimated location for every geocoding mode
    <sheet>.matches.json  gazetteer match per phrase (match stage only)
    <sheet>.nt          linked metadata record
"""
import argparse
import concurrent.futures
import csv
import json
import logging
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Any, Callable, Dict, List, Optional, Sequence

from app.modules import connect_to_geocoder, mcp
from app.modules.config import COMPONENT_MODES, GEOCODE_MODES, PipelineConfig
from app.modules.consensus import link_sheet, linked_edges, read_edges, write_edges
from app.modules.errors import ConfigError, MapMetaError
from app.modules.eval_harness import (evaluate_sheet, load_prediction, prediction_ids, read_estimates,
                                      write_tables)
from app.modules.features import build_sheet_features, load_embeddings
from app.modules.geolocalizer import Gazetteer, GeocodeMode, GeoEstimate, geolocate_sheet
from app.modules.ingest import MapSheet, iter_sheet_files, parse_sheet
from app.modules.linked_metadata import (RecordStore, build_map_record, emit_rdf, match_entity,
                                         query_maps)
from app.modules.phrase_graph import LocationPhrase, phrases_for_sheet, read_phrases, write_phrases
from app.modules.synth import generate_corpus, write_corpus
from app.modules.textual_linker import LinkerModel, load_model, save_model, train
from app.modules.visual_linker import ProbabilityMapDirectory, find_sheet_image

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_PARTIAL = 1
EXIT_CONFIG = 2


@dataclass
class CommandResult:
    exit_code: int
    summary: Dict[str, Any] = field(default_factory=dict)


@dataclass
class SheetOutcome:
    source: str
    sheet_id: Optional[str] = None
    ok: bool = True
    error: Optional[str] = None
    details: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict[str, Any]:
        data = {"source": self.source, "sheet_id": self.sheet_id, "status": "ok" if self.ok else "failed"}
        if self.error:
            data["error"] = self.error
        data.update(self.details)
        return data


class PipelineContext:
    """Shared read-only resources, loaded on first use.

    The record store is built up front: worker threads share its write lock.
    """

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.output_dir = Path(config.output_dir)
        self.store = RecordStore(self.output_dir, config.base_iri, config.wkt)

    @cached_property
    def model(self) -> LinkerModel:
        self.config.validate("model")
        return load_model(self.config.model)

    @cached_property
    def table(self):
        self.config.validate("embeddings")
        return load_embeddings(self.config.embeddings, oov_policy=self.config.oov_policy)

    @cached_property
    def geocoder(self):
        return connect_to_geocoder(self.config)

    @cached_property
    def gazetteer(self) -> Optional[Gazetteer]:
        if not self.config.gazetteer:
            return None
        self.config.validate("gazetteer")
        if isinstance(self.geocoder, Gazetteer):
            return self.geocoder
        return Gazetteer.load(self.config.gazetteer)

    @cached_property
    def maps(self):
        if not self.config.map_dir:
            return None
        return ProbabilityMapDirectory(self.config.map_dir, resample=self.config.resample_maps)

    def require(self, *names: str) -> "PipelineContext":
        """Load the named resources now so configuration errors surface before the batch starts."""
        for name in names:
            getattr(self, name)
        return self

    def artifact(self, sheet_id: str, suffix: str) -> Path:
        return self.output_dir / f"{sheet_id}{suffix}"


def sheet_paths(config: PipelineConfig, paths: Sequence[str] = ()) -> List[Path]:
    sources = list(paths) or ([config.sheets_dir] if config.sheets_dir else [])
    if not sources:
        raise ConfigError("no sheets given and sheets_dir is not configured")
    files = list(iter_sheet_files(sources))
    if not files:
        raise ConfigError(f"no sheet files found in {', '.join(map(str, sources))}")
    return files


def run_sheets(paths: Sequence[Path], worker: Callable[[MapSheet], Dict[str, Any]],
               workers: int) -> List[SheetOutcome]:
    """Apply ``worker`` to every sheet; a failing sheet does not stop the batch."""

    def process(path: Path) -> SheetOutcome:
        outcome = SheetOutcome(str(path))
        try:
            sheet = parse_sheet(path)
            outcome.sheet_id = sheet.sheet_id
            outcome.details = worker(sheet)
        except (MapMetaError, OSError, UnicodeDecodeError) as e:
            logger.error("Sheet %s failed: %s", path, e)
            outcome.ok = False
            outcome.error = str(e)
        return outcome

    with concurrent.futures.ThreadPoolExecutor(max_workers=max(1, min(workers, len(paths)))) as executor:
        return list(executor.map(process, paths))


def batch_result(outcomes: List[SheetOutcome], **extra: Any) -> CommandResult:
    failed = sum(not o.ok for o in outcomes)
    summary = {"processed": len(outcomes) - failed, "failed": failed,
               "sheets": [o.to_dict() for o in outcomes]}
    summary.update(extra)
    return CommandResult(EXIT_PARTIAL if failed else EXIT_OK, summary)


# Stages

def link_stage(ctx: PipelineContext, sheet: MapSheet):
    features = build_sheet_features(sheet, ctx.table)
    image = find_sheet_image(ctx.config.image_dir, sheet.sheet_id)
    decisions = link_sheet(ctx.model, sheet, features, ctx.maps, ctx.config.consensus_config(), image)
    write_edges(decisions, ctx.artifact(sheet.sheet_id, ".edges"))
    return decisions


def phrase_stage(ctx: PipelineContext, sheet: MapSheet, decisions) -> List[LocationPhrase]:
    phrases = phrases_for_sheet(sheet, linked_edges(decisions), ctx.config.component_mode)
    write_phrases(sheet.sheet_id, phrases, ctx.artifact(sheet.sheet_id, ".phrases"))
    return phrases


def write_estimates(path: Path, sheet_id: str, mode: str, estimates: Dict[str, Optional[GeoEstimate]]) -> Path:
    data = {
        "sheet_id": sheet_id,
        "mode": mode,
        "estimates": {m: None if e is None else e.to_dict() for m, e in estimates.items()},
    }
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def geo_stage(ctx: PipelineContext, sheet: MapSheet, phrases: Sequence[LocationPhrase]) -> Dict[str, Optional[GeoEstimate]]:
    cfg = ctx.config
    texts = [p.text for p in phrases]
    estimates = {
        mode.value: geolocate_sheet(sheet, texts, mode, ctx.geocoder, cfg.eps_km, cfg.min_pts, cfg.workers)
        for mode in GeocodeMode
    }
    write_estimates(ctx.artifact(sheet.sheet_id, ".geo.json"), sheet.sheet_id, cfg.geocode_mode, estimates)
    return estimates


def match_stage(ctx: PipelineContext, phrases: Sequence[LocationPhrase], estimate: Optional[GeoEstimate]):
    if ctx.gazetteer is None or estimate is None:
        return [None] * len(phrases)
    cfg = ctx.config
    return [match_entity(p.text, estimate, ctx.gazetteer, cfg.radius_km, cfg.sim_threshold) for p in phrases]


def write_matches(path: Path, phrases: Sequence[LocationPhrase], matches) -> Path:
    data = [
        {"phrase": p.text, "regions": list(p.region_ids),
         "match": None if m is None else {"name": m.name, "uri": m.uri, "lat": m.lat, "lng": m.lng}}
        for p, m in zip(phrases, matches)
    ]
    path.write_text(json.dumps(data, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_matches(path: Path, gazetteer: Optional[Gazetteer]):
    matches = []
    for item in json.loads(path.read_text(encoding="utf-8")):
        match = item.get("match")
        record = None
        if match is not None and gazetteer is not None:
            record = gazetteer.resolve(match["uri"])
            if record is None:
                logger.warning("Match %s is not in the gazetteer", match["uri"])
        matches.append(record)
    return matches


def _read_stage(ctx: PipelineContext, sheet_id: str, suffix: str) -> Path:
    path = ctx.artifact(sheet_id, suffix)
    if not path.exists():
        raise ConfigError(f"missing {path}; run the previous stage first")
    return path


def _configured_estimate(ctx: PipelineContext, sheet_id: str) -> Optional[GeoEstimate]:
    return read_estimates(_read_stage(ctx, sheet_id, ".geo.json")).get(ctx.config.geocode_mode)


# Commands

def cmd_train(config: PipelineConfig, paths: Sequence[str] = ()) -> CommandResult:
    config.validate("embeddings")
    table = load_embeddings(config.embeddings, oov_policy=config.oov_policy)
    corpus = []
    for path in sheet_paths(config, paths):
        sheet = parse_sheet(path)
        corpus.append((sheet, build_sheet_features(sheet, table)))
    model = LinkerModel.initialize(corpus[0][1].matrix.shape[1], config.linker_config())
    model, history = train(model, corpus)

    out = Path(config.model or Path(config.output_dir) / "linker.bin")
    out.parent.mkdir(parents=True, exist_ok=True)
    save_model(model, out)
    loss_log = out.with_suffix(".loss.csv")
    with open(loss_log, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "loss"])
        writer.writerows([i, f"{loss:.10f}"] for i, loss in enumerate(history, 1))
    return CommandResult(EXIT_OK, {"model": str(out), "loss_log": str(loss_log), "epochs": len(history),
                                   "final_loss": history[-1] if history else None})


def cmd_link(config: PipelineConfig, paths: Sequence[str] = ()) -> CommandResult:
    ctx = PipelineContext(config)
    files = sheet_paths(config, paths)
    ctx.require("model", "table", "maps")
    ctx.output_dir.mkdir(parents=True, exist_ok=True)

    def worker(sheet):
        decisions = link_stage(ctx, sheet)
        return {"candidates": len(decisions), "linked": sum(d.linked for d in decisions)}

    return batch_result(run_sheets(files, worker, config.workers))


def cmd_phrases(config: PipelineConfig, paths: Sequence[str] = ()) -> CommandResult:
    ctx = PipelineContext(config)
    files = sheet_paths(config, paths)

    def worker(sheet):
        decisions = read_edges(_read_stage(ctx, sheet.sheet_id, ".edges"))
        return {"phrases": [p.text for p in phrase_stage(ctx, sheet, decisions)]}

    return batch_result(run_sheets(files, worker, config.workers))


def cmd_geolocate(config: PipelineConfig, paths: Sequence[str] = ()) -> CommandResult:
    ctx = PipelineContext(config)
    files = sheet_paths(config, paths)
    ctx.require("geocoder")

    def worker(sheet):
        _, phrases = read_phrases(_read_stage(ctx, sheet.sheet_id, ".phrases"))
        estimate = geo_stage(ctx, sheet, phrases)[config.geocode_mode]
        return {"estimate": None if estimate is None else estimate.to_dict()}

    return batch_result(run_sheets(files, worker, config.workers))


def cmd_match(config: PipelineConfig, paths: Sequence[str] = ()) -> CommandResult:
    ctx = PipelineContext(config)
    files = sheet_paths(config, paths)
    if ctx.gazetteer is None:
        raise ConfigError("entity matching needs a gazetteer file")

    def worker(sheet):
        _, phrases = read_phrases(_read_stage(ctx, sheet.sheet_id, ".phrases"))
        matches = match_stage(ctx, phrases, _configured_estimate(ctx, sheet.sheet_id))
        write_matches(ctx.artifact(sheet.sheet_id, ".matches.json"), phrases, matches)
        return {"matched": sum(m is not None for m in matches), "phrases": len(phrases)}

    return batch_result(run_sheets(files, worker, config.workers))


def cmd_emit_rdf(config: PipelineConfig, paths: Sequence[str] = (), syntax: str = "ntriples") -> CommandResult:
    ctx = PipelineContext(config)
    files = sheet_paths(config, paths)
    gazetteer = ctx.gazetteer

    def worker(sheet):
        _, phrases = read_phrases(_read_stage(ctx, sheet.sheet_id, ".phrases"))
        matches_path = ctx.artifact(sheet.sheet_id, ".matches.json")
        matches = read_matches(matches_path, gazetteer) if matches_path.exists() else [None] * len(phrases)
        record = build_map_record(sheet, phrases, _configured_estimate(ctx, sheet.sheet_id), matches,
                                  config.base_iri)
        if syntax == "xml":
            path = ctx.artifact(sheet.sheet_id, ".rdf")
            path.write_text(emit_rdf(record, "xml", config.base_iri, config.wkt), encoding="utf-8")
        else:
            path = ctx.store.put(record)
        return {"record": str(path), "features": len(record.features)}

    return batch_result(run_sheets(files, worker, config.workers))


def cmd_query(config: PipelineConfig, records_dir: Optional[str] = None, feature_type: Optional[str] = None,
              min_elevation: Optional[float] = None) -> CommandResult:
    config.validate("gazetteer")
    gazetteer = Gazetteer.load(config.gazetteer)
    store = RecordStore(records_dir or config.output_dir, config.base_iri)
    maps = query_maps(store.all(), gazetteer, feature_type, min_elevation)
    return CommandResult(EXIT_OK, {"type": feature_type, "min_elevation": min_elevation, "maps": maps})


def cmd_eval(config: PipelineConfig, pred_dir: str, paths: Sequence[str] = (),
             out_dir: Optional[str] = None) -> CommandResult:
    pred_dir_path = Path(pred_dir)
    if not pred_dir_path.is_dir():
        raise ConfigError(f"prediction directory {pred_dir} does not exist")
    available = prediction_ids(pred_dir_path)
    if not available:
        raise ConfigError(f"prediction directory {pred_dir} holds no pipeline outputs")

    evaluations, missing = [], []
    gt_ids = set()
    for path in sheet_paths(config, paths):
        sheet = parse_sheet(path)
        gt_ids.add(sheet.sheet_id)
        if sheet.sheet_id not in available:
            logger.warning("No predictions for sheet %s, skipping", sheet.sheet_id)
            missing.append(sheet.sheet_id)
            continue
        evaluations.append(evaluate_sheet(sheet, load_prediction(pred_dir_path, sheet.sheet_id), config.chain_gt))
    unexpected = sorted(available - gt_ids)
    for sheet_id in unexpected:
        logger.warning("Predictions for %s have no ground truth, skipping", sheet_id)

    tables = write_tables(evaluations, out_dir or Path(config.output_dir) / "eval", config.histogram_edges)
    return CommandResult(EXIT_OK, {
        "evaluated": len(evaluations),
        "missing_predictions": missing,
        "unmatched_predictions": unexpected,
        "tables": [str(t) for t in tables],
    })


def cmd_synth(config: PipelineConfig, out_dir: Optional[str] = None, n_sheets: int = 20) -> CommandResult:
    corpus = generate_corpus(n_sheets, config.seed)
    paths = write_corpus(corpus, out_dir or config.output_dir)
    return CommandResult(EXIT_OK, {"generated": len(corpus.sheets), "gazetteer_records": len(corpus.gazetteer),
                                   "sheets_dir": str(paths["sheets"]), "gazetteer": str(paths["gazetteer"]),
                                   "embeddings": str(paths["embeddings"])})


def cmd_pipeline(config: PipelineConfig, paths: Sequence[str] = ()) -> CommandResult:
    """link -> phrases -> geolocate -> match -> record for every sheet, plus summary.csv."""
    ctx = PipelineContext(config)
    files = sheet_paths(config, paths)
    ctx.require("model", "table", "geocoder", "gazetteer", "maps")
    ctx.output_dir.mkdir(parents=True, exist_ok=True)

    def worker(sheet):
        decisions = link_stage(ctx, sheet)
        phrases = phrase_stage(ctx, sheet, decisions)
        estimate = geo_stage(ctx, sheet, phrases)[config.geocode_mode]
        matches = match_stage(ctx, phrases, estimate)
        ctx.store.put(build_map_record(sheet, phrases, estimate, matches, config.base_iri))
        return {
            "phrases": len(phrases),
            "matched": sum(m is not None for m in matches),
            "lat": None if estimate is None else estimate.lat,
            "lng": None if estimate is None else estimate.lng,
            "degraded": None if estimate is None else estimate.degraded,
        }

    outcomes = run_sheets(files, worker, config.workers)
    summary_path = ctx.output_dir / "summary.csv"
    with open(summary_path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["source", "sheet_id", "status", "phrases", "matched", "lat", "lng", "degraded", "error"])
        for o in outcomes:
            d = o.details
            writer.writerow([o.source, o.sheet_id or "", "ok" if o.ok else "failed", d.get("phrases", ""),
                             d.get("matched", ""), _cell(d.get("lat")), _cell(d.get("lng")),
                             _cell(d.get("degraded")), o.error or ""])
    return batch_result(outcomes, summary=str(summary_path))


def _cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value).lower()


# Argument parsing

def _common_options() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--json", action="store_true", help="Print a machine-readable summary")
    common.add_argument("--debug", action="store_true", help="Enable debug logging")
    common.add_argument("--embeddings", help="Word embedding file")
    common.add_argument("--gazetteer", help="Offline gazetteer TSV")
    common.add_argument("--geocoder-url", dest="geocoder_url", help="HTTP geocoder endpoint")
    common.add_argument("--rate-limit", dest="rate_limit", type=float, help="Geocoder requests per second")
    common.add_argument("--model", help="Linker checkpoint path")
    common.add_argument("--output-dir", dest="output_dir", help="Directory for outputs")
    common.add_argument("--image-dir", dest="image_dir", help="Directory of sheet images")
    common.add_argument("--map-dir", dest="map_dir", help="Directory of external probability maps")
    common.add_argument("--resample-maps", dest="resample_maps", action="store_true", default=None,
                        help="Area-resize external maps written at another resolution")
    common.add_argument("--workers", type=int, help="Worker threads")
    common.add_argument("--seed", type=int, help="Random seed")
    common.add_argument("--oov-policy", dest="oov_policy", choices=("zeros", "hash"))
    common.add_argument("--epochs", type=int)
    common.add_argument("--learning-rate", dest="learning_rate", type=float)
    common.add_argument("--batch-size", dest="batch_size", type=int)
    common.add_argument("--negatives", type=int, help="Negatives per positive pair")
    common.add_argument("--margin", type=float, help="Triplet margin")
    common.add_argument("--loss-weight", dest="loss_weight", type=float, help="Triplet loss weight")
    common.add_argument("--threshold", dest="text_threshold", type=float, help="Textual decision threshold")
    common.add_argument("--theta", type=float, help="Consensus threshold")
    common.add_argument("--grid-size", dest="grid_size", type=int, help="Probability map side")
    common.add_argument("--raw-visual", dest="binarize_visual", action="store_false", default=None,
                        help="Use raw visual probabilities instead of the binarized map")
    common.add_argument("--textual-only", dest="textual_only", action="store_true", default=None)
    common.add_argument("--components", dest="component_mode", choices=COMPONENT_MODES)
    common.add_argument("--mode", dest="geocode_mode", choices=GEOCODE_MODES, help="Geocoding mode")
    common.add_argument("--eps-km", dest="eps_km", type=float)
    common.add_argument("--min-pts", dest="min_pts", type=int)
    common.add_argument("--radius-km", dest="radius_km", type=float)
    common.add_argument("--sim-threshold", dest="sim_threshold", type=float)
    common.add_argument("--wkt", action="store_true", default=None, help="Emit WKT point literals")
    common.add_argument("--chain-gt", dest="chain_gt", action="store_true", default=None,
                        help="Score linkage against reading-order neighbours only")
    return common


OVERRIDES = (
    "embeddings", "gazetteer", "geocoder_url", "rate_limit", "model", "output_dir", "image_dir", "map_dir",
    "resample_maps", "workers", "seed", "oov_policy", "epochs", "learning_rate", "batch_size", "negatives",
    "margin", "loss_weight", "text_threshold", "theta", "grid_size", "binarize_visual", "textual_only",
    "component_mode", "geocode_mode", "eps_km", "min_pts", "radius_km", "sim_threshold", "wkt", "chain_gt",
)


def build_parser() -> argparse.ArgumentParser:
    common = _common_options()
    parser = argparse.ArgumentParser(prog="mapmeta", description="Map sheet metadata pipeline")
    sub = parser.add_subparsers(dest="command", required=True)

    for name, help_text in (("train", "Train the textual linker"),
                            ("link", "Link text regions (edges)"),
                            ("phrases", "Group linked regions into phrases"),
                            ("geolocate", "Estimate sheet locations"),
                            ("match", "Match phrases to gazetteer entities"),
                            ("pipeline", "Run every stage end to end")):
        p = sub.add_parser(name, parents=[common], help=help_text)
        p.add_argument("sheets", nargs="*", help="Sheet files or directories (default: sheets_dir)")

    p = sub.add_parser("emit-rdf", parents=[common], help="Write linked metadata records")
    p.add_argument("sheets", nargs="*")
    p.add_argument("--syntax", choices=("ntriples", "xml"), default="ntriples")

    p = sub.add_parser("query", parents=[common], help="Find maps by linked entity type and elevation")
    p.add_argument("--records", help="Directory of N-Triples records (default: output_dir)")
    p.add_argument("--type", dest="feature_type", default=None)
    p.add_argument("--min-elevation", dest="min_elevation", type=float, default=None)

    p = sub.add_parser("eval", parents=[common], help="Score pipeline outputs against annotations")
    p.add_argument("pred_dir")
    p.add_argument("sheets", nargs="*", help="Ground-truth sheets (default: sheets_dir)")
    p.add_argument("--tables", help="Directory for the metric CSVs")

    p = sub.add_parser("synth", parents=[common], help="Generate a synthetic corpus")
    p.add_argument("--sheets", dest="n_sheets", type=int, default=20)

    p = sub.add_parser("serve", help="Run the MCP tool server")
    p.add_argument("--transport", choices=["stdio", "sse"], default="sse",
                   help="Transport method to use (stdio or sse)")
    p.add_argument("--host", default="0.0.0.0", help="Host to bind to (for SSE)")
    p.add_argument("--port", type=int, default=3001, help="Port to listen on (for SSE)")
    p.add_argument("--debug", action="store_true", help="Enable debug mode")
    return parser


def dispatch(args: argparse.Namespace) -> CommandResult:
    overrides = {name: getattr(args, name, None) for name in OVERRIDES}
    config = PipelineConfig.resolve(args.config, **overrides).validate()
    command = args.command
    if command == "train":
        return cmd_train(config, args.sheets)
    if command == "link":
        return cmd_link(config, args.sheets)
    if command == "phrases":
        return cmd_phrases(config, args.sheets)
    if command == "geolocate":
        return cmd_geolocate(config, args.sheets)
    if command == "match":
        return cmd_match(config, args.sheets)
    if command == "emit-rdf":
        return cmd_emit_rdf(config, args.sheets, args.syntax)
    if command == "query":
        return cmd_query(config, args.records, args.feature_type, args.min_elevation)
    if command == "eval":
        return cmd_eval(config, args.pred_dir, args.sheets, args.tables)
    if command == "synth":
        return cmd_synth(config, n_sheets=args.n_sheets)
    if command == "pipeline":
        return cmd_pipeline(config, args.sheets)
    raise ConfigError(f"unknown command '{command}'")


def execute(args: argparse.Namespace) -> CommandResult:
    """dispatch() with configuration and contract errors mapped to exit code 2."""
    try:
        return dispatch(args)
    except MapMetaError as e:
        logger.error("%s", e)
        return CommandResult(EXIT_CONFIG, {"error": str(e)})


@mcp.tool()
async def pipeline_run(sheets: str, output_dir: str = None) -> str:
    """Run the full pipeline over sheet files or directories.

    Args:
        sheets: Comma-separated sheet files or directories
        output_dir: Optional output directory (defaults to MAPMETA_OUTPUT_DIR or ./out)
    """
    try:
        from app.modules import current_config

        config = current_config()
        if output_dir:
            config = config.with_overrides(output_dir=output_dir)
        result = cmd_pipeline(config.validate(), [s.strip() for s in sheets.split(",") if s.strip()])
        return json.dumps({"status": "success" if result.exit_code == EXIT_OK else "partial",
                           **result.summary}, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
