"""Concept scorers: the per-chunk classification contract, a lexical baseline and an HTTP adapter."""
import hashlib
import logging
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

from tqdm import tqdm

from src.concepts import CONCEPT_IDS, ConceptId, Registry
from src.corpus import Chunk
from src.errors import ConfigError, RemoteServiceError, ValidationError
from src.retrieval import RankedList
from src.utils import PathLike, SessionHolder, atomic_output, dumps_record, post_json, read_jsonl

logger = logging.getLogger(__name__)

NEGATION_CUES = ("no evidence of", "denies", "negative for")
NEGATION_WINDOW = 40
DEFAULT_THRESHOLD = 0.5

SCORERS = {}


def register_scorer(name: str):
    """Registers a scorer class under `name` for `make_scorer`."""

    def register_scorer_fn(cls):
        if name in SCORERS:
            raise ValueError(f"Cannot register duplicate scorer {name}")
        if not callable(cls):
            raise TypeError(f"scorer {name} must be callable")
        SCORERS[name] = cls
        return cls

    return register_scorer_fn


class Prediction(NamedTuple):
    chunk_id: str
    concept_id: ConceptId
    predicted: bool
    score: Optional[float] = None

    def to_record(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "concept_id": self.concept_id.value,
            "predicted": self.predicted,
            "score": self.score,
        }


ScoredConcepts = Dict[ConceptId, Tuple[bool, Optional[float]]]


class ConceptScorer(object):
    name = "scorer"
    version = "0"
    threshold: Optional[float] = None

    def predict(self, chunk_text: str) -> ScoredConcepts:
        """(predicted, score) for every concept; score is None when the scorer has none."""
        raise NotImplementedError

    def classify(self, chunk_text: str) -> Dict[ConceptId, bool]:
        return {c: flag for c, (flag, _) in self.predict(chunk_text).items()}

    def metadata(self) -> dict:
        return {"name": self.name, "version": self.version, "threshold": self.threshold}

    def close(self):
        pass


def _negated(text: str, start: int) -> bool:
    window = text[max(0, start - NEGATION_WINDOW) : start].lower()
    return any(cue in window for cue in NEGATION_CUES)


def lexical_score(chunk_text: str, registry: Registry) -> Dict[ConceptId, bool]:
    """A concept is present iff one of its patterns matches outside a negation window."""
    out = {}
    for concept_id in CONCEPT_IDS:
        concept = registry[concept_id]
        out[concept_id] = any(
            not _negated(chunk_text, start) for start, _ in concept.pattern_spans(chunk_text)
        )
    return out


@register_scorer("lexical")
class LexicalScorer(ConceptScorer):
    name = "lexical"

    def __init__(self, registry: Registry, **kwargs):
        self._registry = registry
        digest = hashlib.sha256()
        for concept_id in CONCEPT_IDS:
            for pattern in registry[concept_id].patterns:
                digest.update(f"{concept_id.value}\t{pattern}\n".encode("utf-8"))
        self.version = digest.hexdigest()[:12]

    def predict(self, chunk_text: str) -> ScoredConcepts:
        return {c: (flag, None) for c, flag in lexical_score(chunk_text, self._registry).items()}


def external_score(
    chunk_text: str,
    endpoint: str,
    threshold: float = DEFAULT_THRESHOLD,
    session=None,
    timeout: float = 60.0,
    sleep: Callable[[float], None] = time.sleep,
) -> ScoredConcepts:
    body = post_json(endpoint, {"text": chunk_text}, session=session, timeout=timeout, sleep=sleep)
    if not isinstance(body, dict):
        raise RemoteServiceError(f"{endpoint} returned a non-object body")

    scores = body.get("scores")
    labels = body.get("labels")
    if scores is None and labels is None:
        raise RemoteServiceError(f"{endpoint} returned neither 'labels' nor 'scores'")

    out = {}
    for concept_id in CONCEPT_IDS:
        if scores is not None:
            if concept_id.value not in scores:
                raise RemoteServiceError(f"{endpoint} returned no score for {concept_id.value}")
            score = float(scores[concept_id.value])
            if not 0.0 <= score <= 1.0:
                raise RemoteServiceError(
                    f"{endpoint} returned score {score} for {concept_id.value}, outside [0, 1]"
                )
            out[concept_id] = (score >= threshold, score)
        else:
            if concept_id.value not in labels:
                raise RemoteServiceError(f"{endpoint} returned no label for {concept_id.value}")
            out[concept_id] = (bool(labels[concept_id.value]), None)
    return out


@register_scorer("external")
class ExternalScorer(SessionHolder, ConceptScorer):
    def __init__(
        self,
        registry: Registry = None,
        endpoint: str = None,
        threshold: float = DEFAULT_THRESHOLD,
        session=None,
        sleep: Callable[[float], None] = time.sleep,
        **kwargs,
    ):
        if not endpoint:
            raise ConfigError("The external scorer needs an endpoint URL (external:URL)")
        if not 0.0 <= threshold <= 1.0:
            raise ConfigError(f"Scorer threshold must be in [0, 1], got {threshold}")
        self.endpoint = endpoint
        self.threshold = threshold
        self.name = f"external:{endpoint}"
        self.version = "1"
        self._open_session(session)
        self._sleep = sleep

    def predict(self, chunk_text: str) -> ScoredConcepts:
        return external_score(
            chunk_text, self.endpoint, self.threshold, session=self._session, sleep=self._sleep
        )


def make_scorer(spec: str, registry: Registry, threshold: float = DEFAULT_THRESHOLD, session=None) -> ConceptScorer:
    """`lexical` or `external:<url>`."""
    kind, _, endpoint = spec.partition(":")
    if kind not in SCORERS:
        raise ConfigError(f"Unknown scorer {spec!r}; expected one of {sorted(SCORERS)}")
    return SCORERS[kind](registry=registry, endpoint=endpoint or None, threshold=threshold, session=session)


def _predict_chunk(scorer: ConceptScorer, chunk: Chunk) -> List[Prediction]:
    scored = scorer.predict(chunk.text)
    missing = [c.value for c in CONCEPT_IDS if c not in scored]
    if missing:
        raise ValidationError(f"Scorer {scorer.name} gave no result for {', '.join(missing)}")
    return [Prediction(chunk.chunk_id, c, bool(scored[c][0]), scored[c][1]) for c in CONCEPT_IDS]


def classify_corpus(
    scorer: ConceptScorer,
    chunks: Sequence[Chunk],
    output_path: Optional[PathLike] = None,
    parallel: int = 1,
) -> List[Prediction]:
    predictions: List[Prediction] = []

    def run(out):
        with ThreadPoolExecutor(max_workers=max(1, parallel)) as pool:
            results = pool.map(lambda chunk: _predict_chunk(scorer, chunk), chunks)
            for per_chunk in tqdm(results, total=len(chunks), desc="Scoring", disable=None):
                predictions.extend(per_chunk)
                if out is not None:
                    for prediction in per_chunk:
                        out.write(dumps_record(prediction.to_record()) + "\n")

    if output_path is None:
        run(None)
    else:
        with atomic_output(output_path) as f:
            run(f)

    positives = sum(p.predicted for p in predictions)
    logger.info(
        f"Scored {len(chunks)} chunks with {scorer.name}: {positives}/{len(predictions)} positive"
    )
    return predictions


def load_predictions(path: PathLike) -> List[Prediction]:
    predictions = []
    for line_no, record in read_jsonl(path):
        where = f"{path}:{line_no}"
        if not isinstance(record.get("chunk_id"), str) or not isinstance(record.get("predicted"), bool):
            raise ValidationError(f"{where}: malformed prediction record")
        score = record.get("score")
        predictions.append(
            Prediction(
                record["chunk_id"],
                ConceptId.parse(record.get("concept_id"), where=where),
                record["predicted"],
                None if score is None else float(score),
            )
        )
    return predictions


def rank_by_score(predictions: Iterable[Prediction], concept_id: ConceptId, k: Optional[int] = None) -> RankedList:
    """Positive predictions for one concept as a RankedList.

    The distance of an entry is 1 - score (0 when the scorer has no score), so entries
    follow the retrieval ordering contract: ascending distance, then chunk id.
    """
    entries = [
        (p.chunk_id, 1.0 - p.score if p.score is not None else 0.0)
        for p in predictions
        if p.concept_id == concept_id and p.predicted
    ]
    entries.sort(key=lambda e: (e[1], e[0]))
    if k is not None:
        entries = entries[:k]
    return RankedList(concept_id, tuple(entries))
