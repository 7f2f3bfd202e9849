"""
Pipeline configuration.

Values come from (lowest to highest precedence) the dataclass defaults, a JSON
config file, MAPMETA_* environment variables and command-line flags.
"""
import json
import logging
import os
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Any, Dict, Optional, Tuple, Union, get_type_hints

from app.modules.errors import ConfigError

logger = logging.getLogger(__name__)

COMPONENT_MODES = ("scc", "wcc")
GEOCODE_MODES = ("phrase_by_phrase", "word_by_word", "word2paragraph")

# env var -> config field
ENV_VARS = {
    "MAPMETA_GEOCODER_URL": "geocoder_url",
    "MAPMETA_GAZETTEER": "gazetteer",
    "MAPMETA_EMBEDDINGS": "embeddings",
    "MAPMETA_MODEL": "model",
    "MAPMETA_RATE_LIMIT": "rate_limit",
    "MAPMETA_WORKERS": "workers",
    "MAPMETA_OUTPUT_DIR": "output_dir",
}


def _default_workers() -> int:
    return os.cpu_count() or 1


@dataclass(frozen=True)
class PipelineConfig:
    # paths
    embeddings: Optional[str] = None
    gazetteer: Optional[str] = None
    model: Optional[str] = None
    sheets_dir: Optional[str] = None
    output_dir: str = "out"
    image_dir: Optional[str] = None
    map_dir: Optional[str] = None
    resample_maps: bool = False

    # geocoder and execution
    geocoder_url: Optional[str] = None
    rate_limit: float = 1.0
    workers: int = field(default_factory=_default_workers)
    seed: int = 0

    # features and textual linker
    oov_policy: str = "zeros"
    hidden_dim: int = 64
    embed_dim: int = 32
    margin: float = 0.2
    loss_weight: float = 1.0
    learning_rate: float = 0.05
    epochs: int = 100
    batch_size: int = 64
    negatives: int = 3
    text_threshold: float = 0.5

    # visual linker and consensus
    grid_size: int = 256
    binarize_visual: bool = True
    binarize_p: float = 0.5
    theta: float = 0.5
    textual_only: bool = False

    # phrases and geolocation
    component_mode: str = "scc"
    geocode_mode: str = "phrase_by_phrase"
    eps_km: float = 10.0
    min_pts: int = 3

    # linked metadata
    radius_km: float = 50.0
    sim_threshold: float = 0.8
    base_iri: str = "http://mapmeta.local/"
    wkt: bool = False

    # evaluation
    chain_gt: bool = False
    histogram_edges: Tuple[float, ...] = (0.0, 10.0, 25.0, 50.0, 100.0, 250.0, 500.0, 1000.0)

    @classmethod
    def load(cls, path: Union[str, Path, None] = None) -> "PipelineConfig":
        """Defaults overlaid with a JSON config file."""
        if path is None:
            return cls()
        try:
            with open(path, encoding="utf-8") as fh:
                data = json.load(fh)
        except FileNotFoundError:
            raise ConfigError(f"config file {path} not found") from None
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path}: {e}") from None
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        return cls().with_overrides(**data)

    @classmethod
    def resolve(cls, path: Union[str, Path, None] = None, **overrides: Any) -> "PipelineConfig":
        """Defaults < config file < environment < explicit overrides (None values are ignored)."""
        config = cls.load(path)
        env = {name: os.environ[var] for var, name in ENV_VARS.items() if os.environ.get(var)}
        if env:
            logger.debug("Config from environment: %s", sorted(env))
            config = config.with_overrides(**env)
        return config.with_overrides(**{k: v for k, v in overrides.items() if v is not None})

    def with_overrides(self, **values: Any) -> "PipelineConfig":
        hints = get_type_hints(type(self))
        known = {f.name for f in fields(self)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        coerced = {k: _coerce(k, v, hints[k]) for k, v in values.items()}
        return replace(self, **coerced)

    def validate(self, *required_paths: str) -> "PipelineConfig":
        """Check numeric ranges and that the named path fields exist on disk."""
        checks = [
            (0.0 < self.text_threshold <= 1.0, "text_threshold must be in (0, 1]"),
            (0.0 < self.theta < 1.0, "theta must be in (0, 1)"),
            (0.0 < self.binarize_p < 1.0, "binarize_p must be in (0, 1)"),
            (self.grid_size >= 8, "grid_size must be at least 8"),
            (self.eps_km > 0.0, "eps_km must be positive"),
            (self.min_pts >= 1, "min_pts must be at least 1"),
            (self.radius_km > 0.0, "radius_km must be positive"),
            (0.0 <= self.sim_threshold <= 1.0, "sim_threshold must be in [0, 1]"),
            (self.workers >= 1, "workers must be at least 1"),
            (self.rate_limit > 0.0, "rate_limit must be positive"),
            (self.component_mode in COMPONENT_MODES, f"component_mode must be one of {COMPONENT_MODES}"),
            (self.geocode_mode in GEOCODE_MODES, f"geocode_mode must be one of {GEOCODE_MODES}"),
            (self.oov_policy in ("zeros", "hash"), "oov_policy must be zeros or hash"),
            (all(a < b for a, b in zip(self.histogram_edges, self.histogram_edges[1:])),
             "histogram_edges must be strictly increasing"),
        ]
        for ok, message in checks:
            if not ok:
                raise ConfigError(message)
        for name in required_paths:
            value = getattr(self, name)
            if not value:
                raise ConfigError(f"{name} is not configured")
            if not Path(value).exists():
                raise ConfigError(f"{name} path {value} does not exist")
        return self

    def linker_config(self):
        from app.modules.textual_linker import LinkerConfig

        return LinkerConfig(
            hidden_dim=self.hidden_dim,
            embed_dim=self.embed_dim,
            margin=self.margin,
            loss_weight=self.loss_weight,
            learning_rate=self.learning_rate,
            epochs=self.epochs,
            batch_size=self.batch_size,
            negatives=self.negatives,
            seed=self.seed,
            threshold=self.text_threshold,
        )

    def consensus_config(self):
        from app.modules.consensus import ConsensusConfig

        return ConsensusConfig(
            theta=self.theta,
            grid_size=self.grid_size,
            binarize_visual=self.binarize_visual,
            binarize_p=self.binarize_p,
            textual_only=self.textual_only,
            text_threshold=self.text_threshold,
        )

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data["histogram_edges"] = list(self.histogram_edges)
        return data


def _coerce(name: str, value: Any, hint: Any) -> Any:
    """Convert strings from env vars / JSON to the field's declared type."""
    try:
        if hint is bool:
            if isinstance(value, str):
                return value.strip().lower() in ("1", "true", "yes")
            return bool(value)
        if hint is int:
            return int(value)
        if hint is float:
            return float(value)
        if hint is str:
            return str(value)
        if hint == Optional[str]:
            return None if value is None else str(value)
        if hint == Tuple[float, ...]:
            if isinstance(value, str):
                value = value.split(",")
            return tuple(float(v) for v in value)
    except (TypeError, ValueError):
        raise ConfigError(f"invalid value {value!r} for {name}") from None
    return value
