"""Seeded synthetic oncology corpora with planted concept mentions and exact ground truth."""
import datetime
import json
import logging
from collections import OrderedDict
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from src.concepts import CONCEPT_IDS, ConceptId
from src.corpus import Chunk, PatientNote
from src.errors import DataIOError, ValidationError
from src.evaluation import GoldAnnotation
from src.utils import PathLike, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

TEMPLATE_BANK = Path(__file__).resolve().parent.parent / "config" / "synth" / "templates.json"
FIRST_VISIT = datetime.date(2020, 1, 6)
SYNTH_ANNOTATOR = "synth"


class TemplateBank(NamedTuple):
    version: int
    templates: Dict[ConceptId, Tuple[str, ...]]
    fillers: Tuple[str, ...]
    distractors: Tuple[str, ...]


class SynthSpec(NamedTuple):
    n_patients: int = 20
    notes_per_patient: int = 5
    plant_rate: Union[float, Dict[str, float]] = 0.5
    distractor_rate: float = 0.0
    rng_seed: int = 42
    fillers_per_note: Tuple[int, int] = (3, 8)
    sentences_per_paragraph: Tuple[int, int] = (2, 5)

    def rates(self) -> Dict[ConceptId, float]:
        if isinstance(self.plant_rate, dict):
            unknown = set(self.plant_rate) - {c.value for c in CONCEPT_IDS}
            if unknown:
                raise ValidationError(f"plant_rate names unknown concepts {sorted(unknown)}")
            return {c: float(self.plant_rate.get(c.value, 0.0)) for c in CONCEPT_IDS}
        return {c: float(self.plant_rate) for c in CONCEPT_IDS}

    def validate(self) -> "SynthSpec":
        if self.n_patients < 1 or self.notes_per_patient < 1:
            raise ValidationError("n_patients and notes_per_patient must be positive")
        for concept_id, rate in self.rates().items():
            if not 0.0 <= rate <= 1.0:
                raise ValidationError(f"plant_rate for {concept_id.value} must be in [0, 1], got {rate}")
        if not 0.0 <= self.distractor_rate <= 1.0:
            raise ValidationError(f"distractor_rate must be in [0, 1], got {self.distractor_rate}")
        if not 0 <= self.rng_seed < 2**64:
            raise ValidationError(f"rng_seed must be an unsigned 64-bit integer, got {self.rng_seed}")
        for name in ("fillers_per_note", "sentences_per_paragraph"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi or (name == "sentences_per_paragraph" and lo < 1):
                raise ValidationError(f"{name} must be an ordered (low, high) pair, got {(lo, hi)}")
        return self


class TruthEntry(NamedTuple):
    note_id: str
    start: int
    end: int
    concept_id: ConceptId
    text: str


def load_template_bank(path: Optional[PathLike] = None) -> TemplateBank:
    path = Path(path or TEMPLATE_BANK)
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except OSError as e:
        raise DataIOError(f"Cannot read template bank {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"Template bank {path} is not valid JSON: {e}") from e

    templates = OrderedDict()
    for concept_id in CONCEPT_IDS:
        entries = tuple(document.get("templates", {}).get(concept_id.value, []))
        if not entries:
            raise ValidationError(f"Template bank {path} has no templates for {concept_id.value}")
        templates[concept_id] = entries

    bank = TemplateBank(
        version=int(document.get("version", 1)),
        templates=templates,
        fillers=tuple(document.get("fillers", [])),
        distractors=tuple(document.get("distractors", [])),
    )
    if not bank.fillers:
        raise ValidationError(f"Template bank {path} has no filler sentences")
    for sentence in [s for t in templates.values() for s in t] + list(bank.fillers) + list(bank.distractors):
        # a chunker splits on sentence ends, so a planted sentence must not contain one
        if "\n" in sentence or ". " in sentence.strip():
            raise ValidationError(f"Template bank sentence is not a single sentence: {sentence!r}")
    return bank


def _note_sentences(
    rng: np.random.Generator, spec: SynthSpec, bank: TemplateBank, rates: Dict[ConceptId, float]
) -> List[Tuple[Optional[ConceptId], str]]:
    lo, hi = spec.fillers_per_note
    sentences: List[Tuple[Optional[ConceptId], str]] = [
        (None, bank.fillers[int(i)]) for i in rng.integers(len(bank.fillers), size=int(rng.integers(lo, hi + 1)))
    ]
    for concept_id in CONCEPT_IDS:
        if rng.random() < rates[concept_id]:
            options = bank.templates[concept_id]
            sentences.append((concept_id, options[int(rng.integers(len(options)))]))
    if bank.distractors and rng.random() < spec.distractor_rate:
        sentences.append((None, bank.distractors[int(rng.integers(len(bank.distractors)))]))
    if not sentences:
        sentences.append((None, bank.fillers[int(rng.integers(len(bank.fillers)))]))
    return [sentences[int(i)] for i in rng.permutation(len(sentences))]


def _compose(
    rng: np.random.Generator, spec: SynthSpec, sentences: List[Tuple[Optional[ConceptId], str]], note_id: str
) -> Tuple[str, List[TruthEntry]]:
    lo, hi = spec.sentences_per_paragraph
    text = ""
    truth = []
    i = 0
    while i < len(sentences):
        size = int(rng.integers(lo, hi + 1))
        if text:
            text += "\n\n"
        for n, (concept_id, sentence) in enumerate(sentences[i : i + size]):
            if n:
                text += " "
            start = len(text.encode("utf-8"))
            text += sentence
            if concept_id is not None:
                truth.append(TruthEntry(note_id, start, len(text.encode("utf-8")), concept_id, sentence))
        i += size
    return text, truth


def generate_corpus(
    spec: SynthSpec, bank: Optional[TemplateBank] = None
) -> Tuple[List[PatientNote], List[TruthEntry]]:
    spec.validate()
    bank = bank if bank is not None else load_template_bank()
    rates = spec.rates()

    notes = []
    truth = []
    seeds = np.random.SeedSequence(spec.rng_seed).spawn(spec.n_patients)
    for idx, seed in enumerate(seeds):
        rng = np.random.default_rng(seed)
        patient_id = f"P{idx:04d}"
        visit = FIRST_VISIT + datetime.timedelta(days=int(rng.integers(0, 365)))
        for j in range(spec.notes_per_patient):
            note_id = f"{patient_id}-N{j:03d}"
            text, planted = _compose(rng, spec, _note_sentences(rng, spec, bank, rates), note_id)
            notes.append(PatientNote(patient_id, note_id, visit.isoformat(), text))
            truth.extend(planted)
            visit += datetime.timedelta(days=int(rng.integers(7, 91)))

    logger.info(
        f"Generated {len(notes)} notes for {spec.n_patients} patients with {len(truth)} planted mentions "
        f"(seed {spec.rng_seed})"
    )
    return notes, truth


def save_truth(truth: Sequence[TruthEntry], path: PathLike) -> int:
    return write_jsonl(
        path,
        (
            {"note_id": t.note_id, "start": t.start, "end": t.end, "concept_id": t.concept_id.value, "text": t.text}
            for t in truth
        ),
    )


def load_truth(path: PathLike) -> List[TruthEntry]:
    truth = []
    for line_no, record in read_jsonl(path):
        where = f"{path}:{line_no}"
        try:
            truth.append(
                TruthEntry(
                    record["note_id"],
                    int(record["start"]),
                    int(record["end"]),
                    ConceptId.parse(record["concept_id"], where=where),
                    record["text"],
                )
            )
        except (KeyError, TypeError, ValueError) as e:
            raise ValidationError(f"{where}: malformed truth record ({e})") from e
    return truth


def _covering_chunk(entry: TruthEntry, chunks: Sequence[Chunk]) -> Chunk:
    for chunk in chunks:
        if chunk.start_offset <= entry.start and entry.end <= chunk.end_offset:
            return chunk
    for chunk in chunks:
        if chunk.start_offset < entry.end and entry.start < chunk.end_offset:
            raise ValidationError(
                f"Planted {entry.concept_id.value} mention {entry.note_id}[{entry.start}:{entry.end}] "
                f"straddles the boundary of chunk {chunk.chunk_id}"
            )
    raise ValidationError(
        f"Planted {entry.concept_id.value} mention {entry.note_id}[{entry.start}:{entry.end}] is not covered by any chunk"
    )


def truth_to_gold(truth: Sequence[TruthEntry], chunks: Sequence[Chunk]) -> List[GoldAnnotation]:
    """Judges every (chunk, concept) pair: relevant iff a planted span lies inside the chunk."""
    by_note: Dict[str, List[Chunk]] = {}
    for chunk in chunks:
        by_note.setdefault(chunk.note_id, []).append(chunk)

    relevant = set()
    for entry in truth:
        if entry.note_id not in by_note:
            raise ValidationError(f"Truth references note {entry.note_id!r} with no chunks")
        chunk = _covering_chunk(entry, by_note[entry.note_id])
        relevant.add((chunk.chunk_id, entry.concept_id))

    return [
        GoldAnnotation(chunk.chunk_id, concept_id, (chunk.chunk_id, concept_id) in relevant, SYNTH_ANNOTATOR)
        for chunk in chunks
        for concept_id in CONCEPT_IDS
    ]


def _answer(label: bool, evidence: Sequence[str], reasoning: str) -> str:
    body = json.dumps({"reasoning": reasoning, "evidence_terms": list(evidence), "label": label})
    return f"```json\n{body}\n```"


def oracle_llm_script(truth: Sequence[TruthEntry], chunks: Sequence[Chunk]) -> List[dict]:
    """Mock-LLM script whose label answers reproduce the planted truth; everything else is negative."""
    by_note: Dict[str, List[Chunk]] = {}
    for chunk in chunks:
        by_note.setdefault(chunk.note_id, []).append(chunk)

    evidence: "OrderedDict[Tuple[str, ConceptId], List[str]]" = OrderedDict()
    for entry in truth:
        chunk = _covering_chunk(entry, by_note.get(entry.note_id, []))
        evidence.setdefault((chunk.chunk_id, entry.concept_id), []).append(entry.text)

    script = [
        {
            "kind": "label",
            "concept_id": concept_id.value,
            "chunk_id": chunk_id,
            "response": _answer(True, texts, f"The text states: {texts[0]}"),
        }
        for (chunk_id, concept_id), texts in evidence.items()
    ]
    script.append(
        {"default": True, "kind": "label", "response": _answer(False, [], "The concept is not mentioned.")}
    )
    script.append(
        {"default": True, "kind": "verify", "response": _answer(False, [], "The phrases do not document the concept.")}
    )
    return script
