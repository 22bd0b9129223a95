"""Patient-note ingestion and offset-addressed chunking.

Chunk lengths are counted in characters; offsets are UTF-8 byte offsets into
the note text, so `note.text.encode()[start:end].decode() == chunk.text`.
"""
import datetime
import logging
import re
from functools import lru_cache
from typing import Iterable, List, NamedTuple, Optional, Sequence, Tuple

from src.errors import ValidationError
from src.utils import PathLike, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

DEFAULT_SEPARATORS = (r"\n[ \t]*\n\s*", r"(?<=[.!?])[ \t]+", r"\n")

Span = Tuple[int, int]


class PatientNote(NamedTuple):
    patient_id: str
    note_id: str
    timestamp: Optional[str]
    text: str


class Chunk(NamedTuple):
    chunk_id: str
    patient_id: str
    note_id: str
    start_offset: int
    end_offset: int
    text: str


class ChunkingConfig(NamedTuple):
    max_chunk_chars: int = 1000
    min_chunk_chars: int = 50
    separators: Tuple[str, ...] = DEFAULT_SEPARATORS

    def validate(self) -> "ChunkingConfig":
        if self.max_chunk_chars <= 0:
            raise ValidationError(f"max_chunk_chars must be positive, got {self.max_chunk_chars}")
        if not 0 <= self.min_chunk_chars < self.max_chunk_chars:
            raise ValidationError(
                f"min_chunk_chars must be in [0, {self.max_chunk_chars}), got {self.min_chunk_chars}"
            )
        if not self.separators:
            raise ValidationError("At least one separator pattern is required")
        for pattern in self.separators:
            try:
                _compile(pattern)
            except re.error as e:
                raise ValidationError(f"Invalid separator pattern {pattern!r}: {e}") from e
        return self


@lru_cache(maxsize=None)
def _compile(pattern: str) -> "re.Pattern":
    return re.compile(pattern)


def chunk_id_for(note_id: str, ordinal: int) -> str:
    return f"{note_id}#{ordinal}"


def _check_timestamp(value, where: str) -> Optional[str]:
    if value is None:
        return None
    if not isinstance(value, str):
        raise ValidationError(f"{where}: timestamp must be a string or null")
    try:
        datetime.date.fromisoformat(value)
    except ValueError:
        try:
            datetime.datetime.fromisoformat(value)
        except ValueError as e:
            raise ValidationError(f"{where}: timestamp {value!r} is not ISO-8601") from e
    return value


def ingest_notes(path: PathLike) -> List[PatientNote]:
    notes = []
    seen = set()
    for line_no, record in read_jsonl(path):
        where = f"{path}:{line_no}"
        for key in ("patient_id", "note_id", "text"):
            if not isinstance(record.get(key), str):
                raise ValidationError(f"{where}: malformed record, '{key}' must be a string")
        unknown = set(record) - set(PatientNote._fields)
        if unknown:
            raise ValidationError(f"{where}: malformed record, unknown fields {sorted(unknown)}")
        note_id = record["note_id"]
        if note_id in seen:
            raise ValidationError(f"{where}: duplicate note_id {note_id!r}")
        seen.add(note_id)
        notes.append(
            PatientNote(
                patient_id=record["patient_id"],
                note_id=note_id,
                timestamp=_check_timestamp(record.get("timestamp"), where),
                text=record["text"],
            )
        )

    logger.info(f"Ingested {len(notes)} notes from {path}")
    return notes


def save_notes(notes: Iterable[PatientNote], path: PathLike) -> int:
    return write_jsonl(path, (note._asdict() for note in notes))


def _strip(text: str, start: int, end: int) -> Span:
    while start < end and text[start].isspace():
        start += 1
    while end > start and text[end - 1].isspace():
        end -= 1
    return start, end


def _split_on(text: str, start: int, end: int, pattern: str) -> List[Span]:
    pieces = []
    prev = start
    for match in _compile(pattern).finditer(text, start, end):
        if match.end() == match.start():
            continue
        # non-whitespace inside a separator stays with the preceding piece
        cut = match.end() if match.group().strip() else match.start()
        pieces.append((prev, cut))
        prev = match.end()
    pieces.append((prev, end))
    return pieces


def _hard_split(text: str, start: int, end: int, max_chars: int) -> List[Span]:
    spans = []
    for lo in range(start, end, max_chars):
        s, e = _strip(text, lo, min(lo + max_chars, end))
        if s < e:
            spans.append((s, e))
    return spans


def _fragments(
    text: str, start: int, end: int, separators: Sequence[str], max_chars: int
) -> List[Span]:
    start, end = _strip(text, start, end)
    if start >= end:
        return []
    if end - start <= max_chars:
        return [(start, end)]
    if not separators:
        return _hard_split(text, start, end, max_chars)

    pieces = _split_on(text, start, end, separators[0])
    if len(pieces) == 1:
        return _fragments(text, start, end, separators[1:], max_chars)

    out = []
    current = None
    for s, e in pieces:
        s, e = _strip(text, s, e)
        if s >= e:
            continue
        if e - s > max_chars:
            if current is not None:
                out.append(current)
                current = None
            out.extend(_fragments(text, s, e, separators[1:], max_chars))
        elif current is None:
            current = (s, e)
        elif e - current[0] <= max_chars:
            current = (current[0], e)
        else:
            out.append(current)
            current = (s, e)
    if current is not None:
        out.append(current)
    return out


def _merge_short(spans: List[Span], min_chars: int, max_chars: int) -> List[Span]:
    merged = []
    pending = None
    for s, e in spans:
        if pending is not None:
            if e - pending[0] <= max_chars:
                s = pending[0]
            else:
                merged.append(pending)
            pending = None
        if e - s < min_chars:
            pending = (s, e)
        else:
            merged.append((s, e))

    if pending is not None:
        if merged and pending[1] - merged[-1][0] <= max_chars:
            merged[-1] = (merged[-1][0], pending[1])
        else:
            merged.append(pending)
    return merged


def chunk_note(note: PatientNote, config: ChunkingConfig = ChunkingConfig()) -> List[Chunk]:
    config.validate()
    text = note.text
    spans = _fragments(text, 0, len(text), config.separators, config.max_chunk_chars)
    spans = _merge_short(spans, config.min_chunk_chars, config.max_chunk_chars)

    if text.isascii():
        to_byte = lambda i: i
    else:
        to_byte = lambda i: len(text[:i].encode("utf-8"))

    return [
        Chunk(
            chunk_id=chunk_id_for(note.note_id, ordinal),
            patient_id=note.patient_id,
            note_id=note.note_id,
            start_offset=to_byte(s),
            end_offset=to_byte(e),
            text=text[s:e],
        )
        for ordinal, (s, e) in enumerate(spans)
    ]


def chunk_corpus(
    notes: Sequence[PatientNote], config: ChunkingConfig = ChunkingConfig()
) -> List[Chunk]:
    config.validate()
    seen = set()
    chunks = []
    for note in notes:
        if note.note_id in seen:
            raise ValidationError(f"Duplicate note_id {note.note_id!r} in corpus")
        seen.add(note.note_id)
        chunks.extend(chunk_note(note, config))

    logger.info(f"Chunked {len(notes)} notes into {len(chunks)} chunks")
    return chunks


def save_chunks(chunks: Iterable[Chunk], path: PathLike) -> int:
    return write_jsonl(path, (chunk._asdict() for chunk in chunks))


def load_chunks(path: PathLike) -> List[Chunk]:
    chunks = []
    seen = set()
    for line_no, record in read_jsonl(path):
        try:
            chunk = Chunk(**record)
        except TypeError as e:
            raise ValidationError(f"{path}:{line_no}: malformed chunk record ({e})") from e
        if chunk.chunk_id in seen:
            raise ValidationError(f"{path}:{line_no}: duplicate chunk_id {chunk.chunk_id!r}")
        seen.add(chunk.chunk_id)
        chunks.append(chunk)
    return chunks
