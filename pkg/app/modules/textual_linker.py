"""
Textual linkage predictor.

A shared two-layer encoder maps each region's feature vector to an embedding
e = W2 tanh(W1 r + b1) + b2. The pair head scores sigmoid(w3 . [e_i, e_j,
|e_i - e_j|] + b3). Training minimizes binary cross-entropy on pairs plus a
weighted triplet hinge on the embeddings, by plain mini-batch gradient
descent with hand-derived gradients.
"""
import json
import logging
import math
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from app.modules import mcp
from app.modules.errors import (CheckpointError, ContractError, TrainingDivergedError,
                                UntrainableSheetError)
from app.modules.features import SheetFeatures, build_sheet_features, load_embeddings
from app.modules.ingest import MapSheet, parse_sheet

logger = logging.getLogger(__name__)

EPS = 1e-7
PARAM_NAMES = ("w1", "b1", "w2", "b2", "w3", "b3")

CHECKPOINT_MAGIC = b"MMLK"
CHECKPOINT_VERSION = 1
# magic, version, input_dim, hidden_dim, embed_dim, number of hyperparameters
_HEADER = struct.Struct("<4sIIIII")
_HPARAMS = ("margin", "loss_weight", "learning_rate", "epochs", "batch_size",
            "negatives", "seed", "threshold")


@dataclass(frozen=True)
class LinkerConfig:
    hidden_dim: int = 64
    embed_dim: int = 32
    margin: float = 0.2
    loss_weight: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 64
    negatives: int = 3
    seed: int = 0
    threshold: float = 0.5

    def __post_init__(self):
        if self.hidden_dim < 1 or self.embed_dim < 1:
            raise ContractError("layer widths must be positive")
        if self.margin < 0 or self.loss_weight < 0 or self.learning_rate < 0:
            raise ContractError("margin, loss weight and learning rate must be non-negative")
        if self.epochs < 0 or self.batch_size < 1 or self.negatives < 1:
            raise ContractError("epochs >= 0, batch size >= 1 and negatives >= 1 are required")
        if not 0.0 <= self.threshold <= 1.0:
            raise ContractError(f"threshold {self.threshold} outside [0, 1]")


@dataclass(frozen=True)
class LinkerModel:
    """Immutable parameter set plus the hyperparameters it was built with."""
    params: Mapping[str, np.ndarray]
    config: LinkerConfig = field(default_factory=LinkerConfig)

    @classmethod
    def initialize(cls, input_dim: int, config: Optional[LinkerConfig] = None) -> "LinkerModel":
        config = config or LinkerConfig()
        rng = np.random.default_rng(config.seed)

        def glorot(fan_out: int, fan_in: int) -> np.ndarray:
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            return rng.uniform(-limit, limit, size=(fan_out, fan_in))

        hidden, embed = config.hidden_dim, config.embed_dim
        return cls({
            "w1": glorot(hidden, input_dim),
            "b1": np.zeros(hidden),
            "w2": glorot(embed, hidden),
            "b2": np.zeros(embed),
            "w3": glorot(1, 3 * embed)[0],
            "b3": np.zeros(1),
        }, config)

    @property
    def input_dim(self) -> int:
        return self.params["w1"].shape[1]

    def flat(self) -> np.ndarray:
        return np.concatenate([self.params[k].ravel() for k in PARAM_NAMES])

    def with_flat(self, flat: np.ndarray) -> "LinkerModel":
        params, offset = {}, 0
        for k in PARAM_NAMES:
            shape = self.params[k].shape
            size = int(np.prod(shape))
            params[k] = np.array(flat[offset:offset + size], dtype=np.float64).reshape(shape)
            offset += size
        if offset != len(flat):
            raise ContractError(f"expected {offset} parameters, got {len(flat)}")
        return LinkerModel(params, self.config)

    def with_params(self, params: Mapping[str, np.ndarray]) -> "LinkerModel":
        return LinkerModel(dict(params), self.config)


@dataclass(frozen=True)
class PairBatch:
    left: np.ndarray
    right: np.ndarray
    labels: np.ndarray
    ids: Tuple[Tuple[str, str], ...] = ()

    def __len__(self) -> int:
        return len(self.labels)

    def take(self, index: np.ndarray) -> "PairBatch":
        ids = tuple(self.ids[i] for i in index) if self.ids else ()
        return PairBatch(self.left[index], self.right[index], self.labels[index], ids)

    @staticmethod
    def concat(batches: Sequence["PairBatch"]) -> "PairBatch":
        return PairBatch(
            np.concatenate([b.left for b in batches]),
            np.concatenate([b.right for b in batches]),
            np.concatenate([b.labels for b in batches]),
            tuple(i for b in batches for i in b.ids),
        )


@dataclass(frozen=True)
class TripletBatch:
    anchors: np.ndarray
    positives: np.ndarray
    negatives: np.ndarray
    ids: Tuple[Tuple[str, str, str], ...] = ()

    def __len__(self) -> int:
        return len(self.anchors)

    def take(self, index: np.ndarray) -> "TripletBatch":
        ids = tuple(self.ids[i] for i in index) if self.ids else ()
        return TripletBatch(self.anchors[index], self.positives[index], self.negatives[index], ids)

    @staticmethod
    def concat(batches: Sequence["TripletBatch"]) -> "TripletBatch":
        return TripletBatch(
            np.concatenate([b.anchors for b in batches]),
            np.concatenate([b.positives for b in batches]),
            np.concatenate([b.negatives for b in batches]),
            tuple(i for b in batches for i in b.ids),
        )


@dataclass(frozen=True)
class Candidate:
    region_id: str
    probability: float


def _sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _encode(params: Mapping[str, np.ndarray], x: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    h = np.tanh(x @ params["w1"].T + params["b1"])
    return h, h @ params["w2"].T + params["b2"]


def _head(params: Mapping[str, np.ndarray], ei: np.ndarray, ej: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    u = np.concatenate([ei, ej, np.abs(ei - ej)], axis=1)
    return u, u @ params["w3"] + params["b3"][0]


def pair_probabilities(model: LinkerModel, left: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Linkage probability for each row pair, clipped to [EPS, 1 - EPS]."""
    left, right = np.atleast_2d(left), np.atleast_2d(right)
    if left.shape != right.shape or left.shape[1] != model.input_dim:
        raise ContractError(
            f"feature shapes {left.shape} / {right.shape} do not match model input {model.input_dim}")
    _, ei = _encode(model.params, left)
    _, ej = _encode(model.params, right)
    _, z = _head(model.params, ei, ej)
    return np.clip(_sigmoid(z), EPS, 1.0 - EPS)


def forward_pair(model: LinkerModel, r_i: np.ndarray, r_j: np.ndarray) -> float:
    r_i, r_j = np.asarray(r_i, dtype=np.float64), np.asarray(r_j, dtype=np.float64)
    if r_i.ndim != 1 or r_i.shape != r_j.shape:
        raise ContractError(f"feature vectors of shape {r_i.shape} and {r_j.shape}")
    return float(pair_probabilities(model, r_i, r_j)[0])


def bce_loss(preds: Sequence[float], labels: Sequence[float]) -> float:
    preds = np.asarray(preds, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    if preds.size == 0 or preds.shape != labels.shape:
        raise ContractError(f"bce_loss needs equal non-empty inputs, got {preds.shape} and {labels.shape}")
    p = np.clip(preds, EPS, 1.0 - EPS)
    return float(-np.mean(labels * np.log(p) + (1.0 - labels) * np.log(1.0 - p)))


def triplet_loss(anchors: np.ndarray, positives: np.ndarray, negatives: np.ndarray,
                 alpha: float, reduction: str = "sum") -> float:
    """Hinge [|a - p|^2 - |a - n|^2 + alpha]_+ summed (or averaged) over triplets."""
    a, p, n = (np.atleast_2d(np.asarray(v, dtype=np.float64)) for v in (anchors, positives, negatives))
    if not (a.shape == p.shape == n.shape):
        raise ContractError(f"triplet shapes differ: {a.shape}, {p.shape}, {n.shape}")
    margins = np.maximum(((a - p) ** 2).sum(axis=1) - ((a - n) ** 2).sum(axis=1) + alpha, 0.0)
    if reduction == "sum":
        return float(margins.sum())
    if reduction == "mean":
        return float(margins.mean()) if len(margins) else 0.0
    raise ContractError(f"unknown reduction '{reduction}'")


def loss_and_gradients(model: LinkerModel, pairs: PairBatch,
                       triplets: TripletBatch) -> Tuple[float, Dict[str, np.ndarray]]:
    """Objective L_CE(mean) + loss_weight * L_tri(mean) and its exact gradient."""
    params, cfg = model.params, model.config
    n, t = len(pairs), len(triplets)
    if n == 0 and t == 0:
        raise ContractError("empty batch")

    blocks = [pairs.left, pairs.right]
    if t:
        blocks += [triplets.anchors, triplets.positives, triplets.negatives]
    x = np.concatenate(blocks)
    h, e = _encode(params, x)
    de = np.zeros_like(e)
    grads = {k: np.zeros_like(v) for k, v in params.items()}
    loss = 0.0

    if n:
        dim = cfg.embed_dim
        ei, ej = e[:n], e[n:2 * n]
        u, z = _head(params, ei, ej)
        raw = _sigmoid(z)
        p = np.clip(raw, EPS, 1.0 - EPS)
        y = pairs.labels
        loss += bce_loss(p, y)
        # clipped predictions carry no gradient
        dz = np.where((raw > EPS) & (raw < 1.0 - EPS), (p - y) / n, 0.0)
        grads["w3"] = u.T @ dz
        grads["b3"] = np.array([dz.sum()])
        du = np.outer(dz, params["w3"])
        sign = np.sign(ei - ej)
        de[:n] += du[:, :dim] + du[:, 2 * dim:] * sign
        de[n:2 * n] += du[:, dim:2 * dim] - du[:, 2 * dim:] * sign

    if t:
        start = 2 * n
        a, pos, neg = e[start:start + t], e[start + t:start + 2 * t], e[start + 2 * t:]
        loss += cfg.loss_weight * triplet_loss(a, pos, neg, cfg.margin, reduction="mean")
        d_ap, d_an = a - pos, a - neg
        margins = (d_ap ** 2).sum(axis=1) - (d_an ** 2).sum(axis=1) + cfg.margin
        coef = (cfg.loss_weight / t) * (margins > 0.0).astype(np.float64)[:, None]
        de[start:start + t] += coef * 2.0 * (d_ap - d_an)
        de[start + t:start + 2 * t] += coef * -2.0 * d_ap
        de[start + 2 * t:] += coef * 2.0 * d_an

    grads["w2"] = de.T @ h
    grads["b2"] = de.sum(axis=0)
    da1 = (de @ params["w2"]) * (1.0 - h ** 2)
    grads["w1"] = da1.T @ x
    grads["b1"] = da1.sum(axis=0)
    return loss, grads


def sample_batches(sheet: MapSheet, features: SheetFeatures, rng: np.random.Generator,
                   negatives: int = 3,
                   groups: Optional[Sequence[Sequence[str]]] = None) -> Tuple[PairBatch, TripletBatch]:
    """Draw training pairs and triplets from one annotated sheet.

    Each anchor word of a multi-word group gets one positive pair with a
    random co-member and ``negatives`` negative pairs. Negatives come from
    outside the anchor's group with probability proportional to
    1 / (1 + distance / median word height). One triplet per anchor reuses
    the positive with a freshly drawn negative.
    """
    groups = sheet.groups if groups is None else groups
    multi = [tuple(g) for g in groups if len(g) >= 2]
    if not multi:
        raise UntrainableSheetError(f"sheet '{sheet.sheet_id}' has no multi-word group")

    ids = features.ids
    centers = np.array([sheet.region(rid).center for rid in ids])
    scale = float(np.median([sheet.region(rid).height for rid in ids]))
    pair_rows: List[Tuple[int, int, float]] = []
    trip_rows: List[Tuple[int, int, int]] = []

    for group in multi:
        members = set(group)
        pool = np.array([i for i, rid in enumerate(ids) if rid not in members])
        if pool.size == 0:
            raise UntrainableSheetError(f"sheet '{sheet.sheet_id}' has no negatives for {group}")
        for anchor in group:
            a = features.row[anchor]
            mates = [m for m in group if m != anchor]
            pos = features.row[mates[rng.integers(len(mates))]]
            dist = np.linalg.norm(centers[pool] - centers[a], axis=1)
            weights = 1.0 / (1.0 + dist / scale)
            prob = weights / weights.sum()
            pair_rows.append((a, pos, 1.0))
            for k in rng.choice(pool.size, size=negatives, p=prob):
                pair_rows.append((a, int(pool[k]), 0.0))
            trip_rows.append((a, pos, int(pool[rng.choice(pool.size, p=prob)])))

    m = features.matrix
    li = np.array([r[0] for r in pair_rows])
    ri = np.array([r[1] for r in pair_rows])
    pairs = PairBatch(m[li], m[ri], np.array([r[2] for r in pair_rows]),
                      tuple((ids[r[0]], ids[r[1]]) for r in pair_rows))
    ai, pi, ni = (np.array(col) for col in zip(*trip_rows))
    triplets = TripletBatch(m[ai], m[pi], m[ni], tuple((ids[a], ids[p], ids[n]) for a, p, n in trip_rows))
    return pairs, triplets


def train(model: LinkerModel,
          corpus: Sequence[Tuple[MapSheet, SheetFeatures]]) -> Tuple[LinkerModel, List[float]]:
    """Fit the model; returns the trained copy and the per-epoch objective.

    Batches are sampled once from the corpus, then shuffled every epoch.
    Each history entry is the full-corpus objective after that epoch.
    """
    cfg = model.config
    rng = np.random.default_rng(cfg.seed)
    pair_parts, trip_parts = [], []
    for sheet, features in corpus:
        try:
            pairs, triplets = sample_batches(sheet, features, rng, cfg.negatives)
        except UntrainableSheetError as e:
            logger.warning("Skipping sheet: %s", e)
            continue
        pair_parts.append(pairs)
        trip_parts.append(triplets)
    if not pair_parts:
        raise UntrainableSheetError("no trainable sheet in the corpus")

    pairs = PairBatch.concat(pair_parts)
    triplets = TripletBatch.concat(trip_parts)
    n_batches = math.ceil(len(pairs) / cfg.batch_size)
    logger.info("Training on %d pairs and %d triplets from %d sheets",
                len(pairs), len(triplets), len(pair_parts))

    current = model.with_params({k: v.copy() for k, v in model.params.items()})
    history: List[float] = []
    for epoch in range(1, cfg.epochs + 1):
        pair_order = rng.permutation(len(pairs))
        trip_chunks = np.array_split(rng.permutation(len(triplets)), n_batches)
        for b in range(n_batches):
            batch_pairs = pairs.take(pair_order[b * cfg.batch_size:(b + 1) * cfg.batch_size])
            loss, grads = loss_and_gradients(current, batch_pairs, triplets.take(trip_chunks[b]))
            if not math.isfinite(loss):
                raise TrainingDivergedError(f"loss became {loss} at epoch {epoch}, batch {b + 1}")
            current = current.with_params(
                {k: current.params[k] - cfg.learning_rate * grads[k] for k in PARAM_NAMES})
        epoch_loss, _ = loss_and_gradients(current, pairs, triplets)
        if not math.isfinite(epoch_loss):
            raise TrainingDivergedError(f"loss became {epoch_loss} after epoch {epoch}")
        history.append(epoch_loss)
        logger.debug("epoch %d/%d loss %.6f", epoch, cfg.epochs, epoch_loss)
    if history:
        logger.info("Finished %d epochs, final loss %.6f", cfg.epochs, history[-1])
    return current, history


def retrieve_candidates(model: LinkerModel, sheet: MapSheet, features: SheetFeatures,
                        query_id: str, threshold: Optional[float] = None) -> List[Candidate]:
    """Regions (in sheet order) whose pair probability with the query exceeds the threshold."""
    threshold = model.config.threshold if threshold is None else threshold
    sheet.region(query_id)
    others = [i for i, rid in enumerate(features.ids) if rid != query_id]
    if not others:
        return []
    query = features.vector(query_id)
    probs = pair_probabilities(model, np.repeat(query[None, :], len(others), axis=0),
                               features.matrix[others])
    return [Candidate(features.ids[i], float(p)) for i, p in zip(others, probs) if p > threshold]


def save_model(model: LinkerModel, path: Union[str, Path]) -> Path:
    """Write the versioned little-endian float64 checkpoint."""
    cfg = model.config
    hparams = np.array([float(getattr(cfg, name)) for name in _HPARAMS], dtype="<f8")
    header = _HEADER.pack(CHECKPOINT_MAGIC, CHECKPOINT_VERSION, model.input_dim,
                          cfg.hidden_dim, cfg.embed_dim, len(_HPARAMS))
    path = Path(path)
    path.write_bytes(header + hparams.tobytes() + model.flat().astype("<f8").tobytes())
    return path


def load_model(path: Union[str, Path]) -> LinkerModel:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise CheckpointError(f"{path}: truncated header")
    magic, version, input_dim, hidden, embed, n_hparams = _HEADER.unpack_from(data)
    if magic != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a linker checkpoint")
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    if n_hparams != len(_HPARAMS):
        raise CheckpointError(f"{path}: expected {len(_HPARAMS)} hyperparameters, found {n_hparams}")
    offset = _HEADER.size
    values = np.frombuffer(data, dtype="<f8", count=n_hparams, offset=offset)
    offset += 8 * n_hparams
    hp = dict(zip(_HPARAMS, values.tolist()))
    for name in ("epochs", "batch_size", "negatives", "seed"):
        hp[name] = int(hp[name])
    config = LinkerConfig(hidden_dim=hidden, embed_dim=embed, **hp)
    template = LinkerModel.initialize(input_dim, config)
    expected = template.flat().size
    if len(data) - offset != 8 * expected:
        raise CheckpointError(f"{path}: expected {expected} parameters")
    flat = np.frombuffer(data, dtype="<f8", count=expected, offset=offset).astype(np.float64)
    return template.with_flat(flat)


@mcp.tool()
async def linker_retrieve_candidates(sheet_path: str, query_id: str, model_path: str = None,
                                     embeddings_path: str = None, threshold: float = None) -> str:
    """List the regions the textual predictor links to a query region.

    Args:
        sheet_path: Path to the sheet annotation file
        query_id: Query region id
        model_path: Optional checkpoint (defaults to MAPMETA_MODEL)
        embeddings_path: Optional embedding file (defaults to MAPMETA_EMBEDDINGS)
        threshold: Optional decision threshold (defaults to the model's)
    """
    try:
        from app.modules import current_config

        config = current_config()
        model = load_model(model_path or config.model)
        table = load_embeddings(embeddings_path or config.embeddings, oov_policy=config.oov_policy)
        sheet = parse_sheet(sheet_path)
        features = build_sheet_features(sheet, table)
        candidates = retrieve_candidates(model, sheet, features, query_id, threshold)
        return json.dumps({
            "status": "success",
            "query": query_id,
            "count": len(candidates),
            "candidates": [
                {"id": c.region_id, "text": sheet.region(c.region_id).text, "probability": c.probability}
                for c in candidates
            ],
        }, indent=2)
    except Exception as e:
        return json.dumps({"status": "error", "message": str(e)})
