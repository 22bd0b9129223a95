import argparse
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, NamedTuple, Optional, Sequence, Tuple

from src.corpus import ChunkingConfig
from src.embedding import EmbedderSpec
from src.errors import ConfigError, UsageError
from src.llm import LlmSpec
from src.synth import SynthSpec

logger = logging.getLogger(__name__)

DEFAULT_CONFIG = "config/pipeline/default.json"

STAGES = (
    "ingest",
    "chunk",
    "expand",
    "index",
    "harvest",
    "label",
    "emit-train",
    "score",
    "eval",
    "sweep",
    "bench",
    "synth",
    "gold-candidates",
)


class PathsConfig(NamedTuple):
    raw_notes: str = "data/raw_notes.jsonl"
    notes: str = "data/notes.jsonl"
    chunks: str = "data/chunks.jsonl"
    registry: str = "config/concepts/registry.json"
    queries: str = "config/concepts/queries.jsonl"
    expanded_queries: str = "data/expanded_queries.jsonl"
    index_cache: str = "data/index.h5"
    candidates: str = "data/candidates.jsonl"
    labels: str = "data/labels.jsonl"
    checkpoint: str = "data/labels.checkpoint.jsonl"
    training_set: str = "data/train.jsonl"
    predictions: str = "data/predictions.jsonl"
    gold: str = "data/gold.jsonl"
    gold_candidates: str = "data/gold_candidates.jsonl"
    truth: str = "data/truth.jsonl"
    mock_script: str = "data/mock_llm.jsonl"
    report: str = "reports/comparison"
    sweep_report: str = "reports/sweep"
    latency: str = "reports/latency.csv"
    prompt_dir: str = "config/prompts"
    template_bank: str = "config/synth/templates.json"
    log_dir: str = "log"


class PipelineConfig(NamedTuple):
    paths: PathsConfig = PathsConfig()
    embedder: EmbedderSpec = EmbedderSpec()
    llm: LlmSpec = LlmSpec()
    chunking: ChunkingConfig = ChunkingConfig()
    synth: SynthSpec = SynthSpec()
    query_source: str = "static"
    query_count: int = 30
    per_concept_k: int = 5000
    k: Optional[int] = None
    ks: Tuple[int, ...] = (25, 50, 100, 200, 400)
    scorer: str = "lexical"
    threshold: float = 0.5
    training_mode: str = "multi"
    parallel_requests: int = 4
    label_batch_size: int = 32
    rng_seed: int = 42
    include_baselines: bool = True
    bench_patients: Optional[int] = None


_SECTIONS = {
    "paths": PathsConfig,
    "embedder": EmbedderSpec,
    "llm": LlmSpec,
    "chunking": ChunkingConfig,
    "synth": SynthSpec,
}
_TUPLE_FIELDS = {"separators", "fillers_per_note", "sentences_per_paragraph", "ks"}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def get_args(argv: Optional[Sequence[str]] = None) -> argparse.Namespace:
    parser = _Parser(prog="run")
    parser.add_argument("stage", choices=STAGES)
    parser.add_argument("--config", type=str, default=DEFAULT_CONFIG)
    parser.add_argument("--override", type=str, default=None)
    parser.add_argument("--seed", type=int, default=None)
    parser.add_argument("--per-concept-k", dest="per_concept_k", type=int, default=None)
    parser.add_argument("--k", type=int, default=None)
    parser.add_argument("--scorer", type=str, default=None)
    parser.add_argument("--mock-llm", dest="mock_llm", type=str, default=None)
    parser.add_argument("--mode", type=str, default=None, choices=("single", "multi", "multilabel"))
    parser.add_argument("--output", type=str, default=None)
    parser.add_argument("--dry-run", dest="dry_run", action="store_true")
    parser.add_argument("--no-baselines", dest="no_baselines", action="store_true")
    parser.add_argument("--debug", action="store_true")
    parser.add_argument("--name", type=str, default=None)
    return parser.parse_args(argv)


def _load_json(path: str, what: str) -> Dict[str, Any]:
    try:
        with open(path, "r", encoding="utf-8") as f:
            logger.debug(f"Loading {what} from {path}")
            params = json.load(f)
    except OSError as e:
        raise ConfigError(f"Cannot read {what} {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"{what.capitalize()} {path} is not valid JSON: {e}") from e
    if not isinstance(params, dict):
        raise ConfigError(f"{what.capitalize()} {path} must be a JSON object")
    return params


def merge(base: Dict[str, Any], override: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(merged.get(k), dict) and k != "plant_rate":
            merged[k] = merge(merged[k], v)
        else:
            merged[k] = v
    return merged


def _build(cls, values: Dict[str, Any], where: str):
    unknown = sorted(set(values) - set(cls._fields))
    if unknown:
        raise ConfigError(f"Unknown config keys in {where}: {', '.join(unknown)}")
    kwargs = {}
    for k, v in values.items():
        if k in _SECTIONS:
            if not isinstance(v, dict):
                raise ConfigError(f"Config section {where}.{k} must be an object")
            v = _build(_SECTIONS[k], v, f"{where}.{k}")
        elif k in _TUPLE_FIELDS and isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(params: Dict[str, Any]) -> PipelineConfig:
    config = _build(PipelineConfig, params, "config")
    if config.query_source not in ("static", "expanded"):
        raise ConfigError(f"query_source must be 'static' or 'expanded', got {config.query_source!r}")
    if config.training_mode not in ("single", "multi", "multilabel"):
        raise ConfigError(f"Unknown training_mode {config.training_mode!r}")
    for name in ("per_concept_k", "query_count", "parallel_requests", "label_batch_size"):
        if getattr(config, name) < 1:
            raise ConfigError(f"{name} must be positive, got {getattr(config, name)}")
    try:
        config.embedder.validate()
    except ConfigError as e:
        raise ConfigError(f"config.embedder: {e}") from e
    return config


def load_config(args: argparse.Namespace) -> PipelineConfig:
    params = _load_json(args.config, "config")
    if args.override is not None:
        params = merge(params, _load_json(args.override, "override config"))

    config = config_from_dict(params)
    updates = {}
    if args.seed is not None:
        updates["rng_seed"] = args.seed
        updates["synth"] = config.synth._replace(rng_seed=args.seed)
    if args.per_concept_k is not None:
        updates["per_concept_k"] = args.per_concept_k
    if args.k is not None:
        updates["k"] = args.k
    if args.scorer is not None:
        updates["scorer"] = args.scorer
    if args.mode is not None:
        updates["training_mode"] = args.mode
    if args.no_baselines:
        updates["include_baselines"] = False
    config = config._replace(**updates)
    if config.per_concept_k < 1 or (config.k is not None and config.k < 1):
        raise ConfigError("per_concept_k and k must be positive")
    return config


def config_to_dict(config: PipelineConfig) -> Dict[str, Any]:
    out = {}
    for k, v in config._asdict().items():
        out[k] = dict(v._asdict()) if k in _SECTIONS else v
    return out
