"""Silver labeling: CoT labels from an LLM, regex filtering, self-verification, training-set emission."""
import json
import logging
import os
import re
from collections import OrderedDict
from concurrent.futures import CancelledError, ThreadPoolExecutor
from enum import Enum
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple, Union

from tqdm import tqdm

from src.concepts import CONCEPT_IDS, ConceptDef, ConceptId, Registry
from src.corpus import Chunk
from src.errors import DataIOError, LabelParseError, PipelineError, RemoteServiceError, ValidationError
from src.llm import LlmClient, load_prompt, request_key
from src.retrieval import CandidateSet
from src.utils import PathLike, atomic_output, dumps_record, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

_FENCED = re.compile(r"```(?:json)?\s*(.*?)```", re.DOTALL | re.IGNORECASE)
_TRUE = {"true", "yes", "y", "1"}
_FALSE = {"false", "no", "n", "0"}

REASK_SUFFIX = (
    "\n\nYour previous answer could not be parsed. Answer again with only the fenced "
    "json block containing the keys reasoning, evidence_terms and label."
)


class Provenance(str, Enum):
    RAW = "raw"
    REGEX_FILTERED = "regex_filtered"
    SELF_VERIFIED = "self_verified"


class TrainingMode(str, Enum):
    SINGLE = "single"
    MULTI = "multi"
    MULTILABEL = "multilabel"


class CotLabel(NamedTuple):
    chunk_id: str
    concept_id: ConceptId
    reasoning: str
    evidence_terms: Tuple[str, ...]
    label: bool
    provenance: Provenance = Provenance.RAW

    def to_record(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "concept_id": self.concept_id.value,
            "reasoning": self.reasoning,
            "evidence_terms": list(self.evidence_terms),
            "label": self.label,
            "provenance": self.provenance.value,
        }

    @classmethod
    def from_record(cls, record: dict, where: str = "") -> "CotLabel":
        try:
            return cls(
                chunk_id=record["chunk_id"],
                concept_id=ConceptId.parse(record["concept_id"], where=where),
                reasoning=record.get("reasoning", ""),
                evidence_terms=tuple(record.get("evidence_terms", [])),
                label=bool(record["label"]),
                provenance=Provenance(record.get("provenance", "raw")),
            )
        except (KeyError, ValueError) as e:
            raise ValidationError(f"{where}: malformed label record ({e})") from e


class TrainingInstance(NamedTuple):
    chunk_id: str
    text: str
    concept_id: ConceptId
    label: bool
    rationale: str

    def to_record(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "text": self.text,
            "concept_id": self.concept_id.value,
            "label": self.label,
            "rationale": self.rationale,
        }


class MultiConceptInstance(NamedTuple):
    chunk_id: str
    text: str
    labels: Dict[ConceptId, bool]
    rationale: str

    def to_record(self) -> dict:
        return {
            "chunk_id": self.chunk_id,
            "text": self.text,
            "labels": {c.value: self.labels[c] for c in CONCEPT_IDS},
            "rationale": self.rationale,
        }

    def to_multilabel_record(self) -> dict:
        """Fixed concept order plus a 0/1 vector, the layout a multi-label classifier head reads."""
        return {
            "chunk_id": self.chunk_id,
            "text": self.text,
            "concepts": [c.value for c in CONCEPT_IDS],
            "label_vector": [int(self.labels[c]) for c in CONCEPT_IDS],
        }


def _coerce_bool(value) -> Optional[bool]:
    if isinstance(value, bool):
        return value
    if isinstance(value, str) and value.strip().lower() in _TRUE | _FALSE:
        return value.strip().lower() in _TRUE
    return None


def parse_label_response(response: str) -> Tuple[str, Tuple[str, ...], bool]:
    """Parses the fenced json block (or a bare json object) into (reasoning, evidence_terms, label)."""
    match = _FENCED.search(response)
    body = match.group(1) if match else response
    try:
        parsed = json.loads(body.strip())
    except json.JSONDecodeError as e:
        raise LabelParseError(f"Response is not a json block ({e.msg})", response) from e
    if not isinstance(parsed, dict):
        raise LabelParseError("Response json is not an object", response)

    label = _coerce_bool(parsed.get("label"))
    if label is None:
        raise LabelParseError("Response has no boolean 'label'", response)
    terms = parsed.get("evidence_terms", [])
    if isinstance(terms, str):
        terms = [terms]
    if not isinstance(terms, list) or not all(isinstance(t, str) for t in terms):
        raise LabelParseError("'evidence_terms' must be a list of strings", response)
    reasoning = parsed.get("reasoning", "")
    if not isinstance(reasoning, str):
        reasoning = json.dumps(reasoning)
    return reasoning, tuple(t for t in terms if t.strip()), label


def render_label_prompt(template: str, chunk: Chunk, concept: ConceptDef) -> str:
    return template.format(
        display_name=concept.display_name,
        definition=concept.definition,
        chunk_text=chunk.text,
    )


def label_chunk(chunk: Chunk, concept: ConceptDef, llm: LlmClient, template: Optional[str] = None) -> CotLabel:
    template = template if template is not None else load_prompt("label")
    prompt = render_label_prompt(template, chunk, concept)
    key = request_key("label", concept.id.value, chunk.chunk_id)

    response = llm.complete(prompt, key=key)
    try:
        reasoning, terms, label = parse_label_response(response)
    except LabelParseError:
        logger.debug(f"Unparseable label for {key}; re-asking once")
        response = llm.complete(prompt + REASK_SUFFIX, key=key)
        reasoning, terms, label = parse_label_response(response)

    return CotLabel(chunk.chunk_id, concept.id, reasoning, terms, label, Provenance.RAW)


def _spans_text(text: str, spans: Sequence[Tuple[int, int]]) -> Tuple[str, ...]:
    out = []
    for s, e in spans:
        if text[s:e] not in out:
            out.append(text[s:e])
    return tuple(out)


def regex_filter(label: CotLabel, chunk: Chunk, concept: ConceptDef) -> CotLabel:
    """Drops hallucinated evidence and turns unsupported positives negative. Never flips false to true."""
    if label.concept_id != concept.id:
        raise ValidationError(
            f"Label for {label.concept_id.value} filtered with concept {concept.id.value}"
        )
    haystack = chunk.text.casefold()
    surviving = []
    for term in label.evidence_terms:
        if term.casefold() in haystack and term not in surviving:
            surviving.append(term)
    surviving = tuple(surviving)

    if not label.label:
        return label._replace(evidence_terms=surviving)
    if surviving:
        return label._replace(evidence_terms=surviving)

    pattern_hits = _spans_text(chunk.text, concept.pattern_spans(chunk.text))
    if pattern_hits:
        return label._replace(evidence_terms=pattern_hits)
    return label._replace(label=False, evidence_terms=(), provenance=Provenance.REGEX_FILTERED)


def render_verify_prompt(template: str, chunk: Chunk, concept: ConceptDef, spans: Sequence[str]) -> str:
    return template.format(
        display_name=concept.display_name,
        definition=concept.definition,
        chunk_text=chunk.text,
        matched_spans="\n".join(f'- "{s}"' for s in spans),
    )


def self_verify(
    label: CotLabel, chunk: Chunk, concept: ConceptDef, llm: LlmClient, template: Optional[str] = None
) -> CotLabel:
    """Re-asks the LLM about negatives whose chunk matches a concept pattern. Never flips true to false."""
    if label.label or label.provenance == Provenance.SELF_VERIFIED:
        return label
    matched = _spans_text(chunk.text, concept.pattern_spans(chunk.text))
    if not matched:
        return label

    template = template if template is not None else load_prompt("verify")
    prompt = render_verify_prompt(template, chunk, concept, matched)
    key = request_key("verify", concept.id.value, chunk.chunk_id)
    try:
        reasoning, _, confirmed = parse_label_response(llm.complete(prompt, key=key))
    except RemoteServiceError as e:
        logger.warning(f"Self-verification of {key} failed, keeping the label: {e}")
        return label
    except LabelParseError as e:
        logger.warning(f"Self-verification of {key} unparseable, keeping the label: {e.raw[:80]!r}")
        return label

    if confirmed:
        return label._replace(
            label=True, evidence_terms=matched, reasoning=reasoning, provenance=Provenance.SELF_VERIFIED
        )
    return label._replace(provenance=Provenance.SELF_VERIFIED)


def _label_pair(chunk: Chunk, concept: ConceptDef, llm: LlmClient, templates: Dict[str, str]) -> CotLabel:
    label = label_chunk(chunk, concept, llm, templates["label"])
    label = regex_filter(label, chunk, concept)
    return self_verify(label, chunk, concept, llm, templates["verify"])


def load_checkpoint(path: PathLike) -> Dict[Tuple[ConceptId, str], CotLabel]:
    done = {}
    if path is None or not Path(path).is_file():
        return done
    for line_no, record in read_jsonl(path):
        label = CotLabel.from_record(record, where=f"{path}:{line_no}")
        done[(label.concept_id, label.chunk_id)] = label
    return done


def run_labeling(
    candidates: CandidateSet,
    chunks: Sequence[Chunk],
    registry: Registry,
    llm: LlmClient,
    checkpoint_path: Optional[PathLike],
    parallel_requests: int = 4,
    batch_size: int = 32,
    prompt_dir: Optional[PathLike] = None,
    writer=None,
) -> List[CotLabel]:
    by_id = {c.chunk_id: c for c in chunks}
    unknown = sorted({chunk_id for _, chunk_id, _ in candidates.pairs if chunk_id not in by_id})
    if unknown:
        raise ValidationError(f"Candidates reference unknown chunks: {unknown[:5]}")

    templates = {
        "label": load_prompt("label", prompt_dir),
        "verify": load_prompt("verify", prompt_dir),
    }
    done = load_checkpoint(checkpoint_path)
    todo = [
        (concept_id, chunk_id)
        for concept_id, chunk_id, _ in candidates.pairs
        if (concept_id, chunk_id) not in done
    ]
    todo = list(OrderedDict.fromkeys(todo))
    if done:
        logger.info(f"Resuming from {checkpoint_path}: {len(done)} labeled, {len(todo)} remaining")

    checkpoint = None
    if checkpoint_path is not None and todo:
        Path(checkpoint_path).parent.mkdir(parents=True, exist_ok=True)
        try:
            checkpoint = open(checkpoint_path, "a", encoding="utf-8")
        except OSError as e:
            raise DataIOError(f"Cannot open checkpoint {checkpoint_path}: {e}") from e

    progress = tqdm(total=len(todo), desc="Labeling", disable=None)
    try:
        with ThreadPoolExecutor(max_workers=max(1, parallel_requests)) as pool:
            for lo in range(0, len(todo), batch_size):
                batch = todo[lo : lo + batch_size]
                futures = [
                    pool.submit(_label_pair, by_id[chunk_id], registry[concept_id], llm, templates)
                    for concept_id, chunk_id in batch
                ]
                failed = None
                for (concept_id, chunk_id), future in zip(batch, futures):
                    try:
                        label = future.result()
                    except CancelledError:
                        continue
                    except PipelineError as e:
                        if failed is None:
                            failed = ((concept_id, chunk_id), e)
                            for pending in futures:
                                pending.cancel()
                        continue
                    done[(concept_id, chunk_id)] = label
                    if checkpoint is not None:
                        checkpoint.write(dumps_record(label.to_record()) + "\n")
                    progress.update(1)
                if checkpoint is not None:
                    checkpoint.flush()
                    os.fsync(checkpoint.fileno())
                if failed is not None:
                    (concept_id, chunk_id), error = failed
                    logger.error(
                        f"Labeling stopped at ({concept_id.value}, {chunk_id}); "
                        f"{len(done)} labels kept in {checkpoint_path}"
                    )
                    raise error
    finally:
        progress.close()
        if checkpoint is not None:
            checkpoint.close()

    labels = [done[(concept_id, chunk_id)] for concept_id, chunk_id, _ in candidates.pairs]
    positives = sum(label.label for label in labels)
    logger.info(f"Labeled {len(labels)} pairs, {positives} positive")
    if writer is not None:
        for provenance in Provenance:
            writer.add_scalar(
                f"Labels/{provenance.value}", sum(l.provenance == provenance for l in labels), 0
            )
        writer.add_scalar("Labels/positive", positives, 0)
    return labels


def save_labels(labels: Iterable[CotLabel], path: PathLike) -> int:
    return write_jsonl(path, (label.to_record() for label in labels))


def load_labels(path: PathLike) -> List[CotLabel]:
    return [CotLabel.from_record(r, where=f"{path}:{n}") for n, r in read_jsonl(path)]


def _group_by_chunk(labels: Sequence[CotLabel]) -> "OrderedDict[str, Dict[ConceptId, CotLabel]]":
    grouped: "OrderedDict[str, Dict[ConceptId, CotLabel]]" = OrderedDict()
    for label in labels:
        per_chunk = grouped.setdefault(label.chunk_id, {})
        previous = per_chunk.get(label.concept_id)
        if previous is None or (label.label and not previous.label):
            per_chunk[label.concept_id] = label
    return grouped


def build_training_instances(
    labels: Sequence[CotLabel], chunks: Sequence[Chunk], mode: TrainingMode
) -> List[Union[TrainingInstance, MultiConceptInstance]]:
    by_id = {c.chunk_id: c for c in chunks}
    missing = sorted({l.chunk_id for l in labels if l.chunk_id not in by_id})
    if missing:
        raise ValidationError(f"Labels reference unknown chunks: {missing[:5]}")

    if mode == TrainingMode.SINGLE:
        return [
            TrainingInstance(l.chunk_id, by_id[l.chunk_id].text, l.concept_id, l.label, l.reasoning)
            for l in labels
        ]

    instances = []
    for chunk_id, per_chunk in _group_by_chunk(labels).items():
        absent = [c.value for c in CONCEPT_IDS if c not in per_chunk]
        if absent:
            logger.warning(f"{chunk_id}: no label for {', '.join(absent)}; defaulting to false")
        rationale = "\n".join(
            f"{c.value}: {per_chunk[c].reasoning}"
            for c in CONCEPT_IDS
            if c in per_chunk and per_chunk[c].reasoning
        )
        instances.append(
            MultiConceptInstance(
                chunk_id,
                by_id[chunk_id].text,
                OrderedDict((c, per_chunk[c].label if c in per_chunk else False) for c in CONCEPT_IDS),
                rationale,
            )
        )
    return instances


def emit_training_set(
    labels: Sequence[CotLabel], chunks: Sequence[Chunk], mode: TrainingMode, path: PathLike
) -> int:
    mode = TrainingMode(mode)
    instances = build_training_instances(labels, chunks, mode)
    if mode == TrainingMode.MULTILABEL:
        records = (instance.to_multilabel_record() for instance in instances)
    else:
        records = (instance.to_record() for instance in instances)
    count = write_jsonl(path, records)
    logger.info(f"Wrote {count} {mode.value} training instances to {path}")
    return count
