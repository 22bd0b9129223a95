import logging
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import h5py
import numpy as np

from src.concepts import CONCEPT_IDS, ConceptId, QuerySet
from src.corpus import Chunk
from src.embedding import EmbeddingVector, cosine_distances, row_norms
from src.errors import DataIOError, ValidationError
from src.utils import PathLike, atomic_path, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

ROW_BLOCK = 4096


class RankedList(NamedTuple):
    concept_id: ConceptId
    entries: Tuple[Tuple[str, float], ...]

    def chunk_ids(self) -> List[str]:
        return [chunk_id for chunk_id, _ in self.entries]


class CandidateSet(NamedTuple):
    pairs: Tuple[Tuple[ConceptId, str, float], ...]
    per_concept_k: int

    def for_concept(self, concept_id: ConceptId) -> List[Tuple[str, float]]:
        return [(chunk_id, d) for c, chunk_id, d in self.pairs if c == concept_id]


class ChunkIndex(object):
    """Exact-scan index. Vectors are held as float32 (the on-disk precision) and
    promoted to float64 for every distance computation."""

    def __init__(
        self,
        chunk_ids: Sequence[str],
        patient_ids: Sequence[str],
        note_ids: Sequence[str],
        vectors: np.ndarray,
        embedder_fingerprint: str,
    ):
        if len(set(chunk_ids)) != len(chunk_ids):
            seen = set()
            dupes = sorted({c for c in chunk_ids if c in seen or seen.add(c)})
            raise ValidationError(f"Duplicate chunk ids in index: {dupes[:5]}")
        if vectors.ndim != 2 or vectors.shape[0] != len(chunk_ids):
            raise ValidationError(
                f"Index needs one vector per chunk ({len(chunk_ids)}), got shape {vectors.shape}"
            )
        self._chunk_ids = tuple(chunk_ids)
        self._patient_ids = tuple(patient_ids)
        self._note_ids = tuple(note_ids)
        self._vectors = np.ascontiguousarray(vectors, dtype="<f4")
        self._vectors.setflags(write=False)
        rows = self._vectors.astype(np.float64)
        self._norms = row_norms(rows)
        if (self._norms == 0).any():
            raise ValidationError("Index contains zero vectors")
        self._positions = {c: i for i, c in enumerate(self._chunk_ids)}
        self.embedder_fingerprint = embedder_fingerprint

    def __len__(self) -> int:
        return len(self._chunk_ids)

    @property
    def dim(self) -> int:
        return self._vectors.shape[1]

    @property
    def chunk_ids(self) -> Tuple[str, ...]:
        return self._chunk_ids

    @property
    def patient_ids(self) -> Tuple[str, ...]:
        return self._patient_ids

    @property
    def note_ids(self) -> Tuple[str, ...]:
        return self._note_ids

    @property
    def vectors(self) -> np.ndarray:
        return self._vectors

    def vector(self, chunk_id: str) -> EmbeddingVector:
        return EmbeddingVector(self._vectors[self._positions[chunk_id]].astype(np.float64))

    def distances(self, query: EmbeddingVector) -> np.ndarray:
        out = np.empty(len(self), dtype=np.float64)
        for lo in range(0, len(self), ROW_BLOCK):
            hi = min(lo + ROW_BLOCK, len(self))
            rows = self._vectors[lo:hi].astype(np.float64)
            out[lo:hi] = cosine_distances(query, rows, self._norms[lo:hi])
        return out


def build_index(chunks: Sequence[Chunk], embedder) -> ChunkIndex:
    if not chunks:
        raise ValidationError("Cannot build an index over zero chunks")
    ids = [c.chunk_id for c in chunks]
    if len(set(ids)) != len(ids):
        seen = set()
        dupes = sorted({c for c in ids if c in seen or seen.add(c)})
        raise ValidationError(f"Duplicate chunk ids: {dupes[:5]}")

    vectors = embedder.embed([c.text for c in chunks])
    matrix = np.stack([v.values for v in vectors]).astype("<f4")
    logger.info(f"Built index of {len(chunks)} chunks, dim {matrix.shape[1]} ({embedder.fingerprint})")
    return ChunkIndex(
        ids,
        [c.patient_id for c in chunks],
        [c.note_id for c in chunks],
        matrix,
        embedder.fingerprint,
    )


def save_index(index: ChunkIndex, path: PathLike):
    string = h5py.string_dtype("utf-8")
    with atomic_path(path) as tmp:
        with h5py.File(tmp, "w", track_order=True) as f:
            f.attrs["dim"] = index.dim
            f.attrs["fingerprint"] = index.embedder_fingerprint
            f.attrs["count"] = len(index)
            f.create_dataset("chunk_id", data=list(index.chunk_ids), dtype=string, track_times=False)
            f.create_dataset("patient_id", data=list(index.patient_ids), dtype=string, track_times=False)
            f.create_dataset("note_id", data=list(index.note_ids), dtype=string, track_times=False)
            f.create_dataset("vectors", data=index.vectors, dtype="<f4", track_times=False)
    logger.info(f"Saved index cache to {path}")


def load_index(path: PathLike, expected_fingerprint: Optional[str] = None) -> ChunkIndex:
    path = Path(path)
    try:
        f = h5py.File(path, "r")
    except OSError as e:
        raise DataIOError(f"Cannot read index cache {path}: {e}") from e

    with f:
        try:
            fingerprint = str(f.attrs["fingerprint"])
            if expected_fingerprint is not None and fingerprint != expected_fingerprint:
                raise ValidationError(
                    f"Stale index cache {path}: built with {fingerprint}, expected {expected_fingerprint}"
                )
            vectors = f["vectors"][()]
            if vectors.shape != (int(f.attrs["count"]), int(f.attrs["dim"])):
                raise ValidationError(f"Corrupt index cache {path}: header does not match vectors")
            return ChunkIndex(
                list(f["chunk_id"].asstr()[()]),
                list(f["patient_id"].asstr()[()]),
                list(f["note_id"].asstr()[()]),
                vectors,
                fingerprint,
            )
        except KeyError as e:
            raise ValidationError(f"Corrupt index cache {path}: missing {e}") from e


def build_or_load_index(chunks: Sequence[Chunk], embedder, cache_path: Optional[PathLike]) -> ChunkIndex:
    if cache_path is not None and Path(cache_path).is_file():
        try:
            index = load_index(cache_path, expected_fingerprint=embedder.fingerprint)
        except ValidationError as e:
            logger.warning(f"{e}; rebuilding")
        else:
            if list(index.chunk_ids) == [c.chunk_id for c in chunks]:
                logger.info(f"Reusing index cache {cache_path}")
                return index
            logger.warning(f"Index cache {cache_path} covers a different chunk set; rebuilding")

    index = build_index(chunks, embedder)
    if cache_path is not None:
        save_index(index, cache_path)
    return index


def concept_distances(index: ChunkIndex, query_set: QuerySet, embedder) -> np.ndarray:
    """Per-chunk concept distance: the minimum over the concept's queries."""
    if not query_set.queries:
        raise ValidationError(f"Empty query set for {query_set.concept_id.value}")
    if len(index) == 0:
        raise ValidationError("Index is empty")

    best = None
    for query_vector in embedder.embed(list(query_set.queries)):
        d = index.distances(query_vector)
        best = d if best is None else np.minimum(best, d)
    return best


def _rank(chunk_ids: Sequence[str], distances: np.ndarray, k: int) -> List[Tuple[str, float]]:
    order = sorted(range(len(chunk_ids)), key=lambda i: (distances[i], chunk_ids[i]))
    return [(chunk_ids[i], float(distances[i])) for i in order[:k]]


def assign_chunks_to_concept(index: ChunkIndex, query_set: QuerySet, embedder, k: int) -> RankedList:
    if k < 1:
        raise ValidationError(f"k must be >= 1, got {k}")
    distances = concept_distances(index, query_set, embedder)
    return RankedList(query_set.concept_id, tuple(_rank(index.chunk_ids, distances, k)))


def harvest_candidates(
    index: ChunkIndex, query_sets: Dict[ConceptId, QuerySet], embedder, per_concept_k: int
) -> CandidateSet:
    if per_concept_k < 1:
        raise ValidationError(f"per_concept_k must be >= 1, got {per_concept_k}")
    if len(index) == 0:
        raise ValidationError("Index is empty")

    pairs = []
    for concept_id in CONCEPT_IDS:
        if concept_id not in query_sets:
            raise ValidationError(f"No query set for {concept_id.value}")
        ranked = assign_chunks_to_concept(index, query_sets[concept_id], embedder, per_concept_k)
        pairs.extend((concept_id, chunk_id, d) for chunk_id, d in ranked.entries)
        logger.debug(f"[{concept_id.value}] harvested {len(ranked.entries)} candidates")

    logger.info(f"Harvested {len(pairs)} (concept, chunk) candidates, k={per_concept_k}")
    return CandidateSet(tuple(pairs), per_concept_k)


def k_sweep_rank(ranked: RankedList, ks: Sequence[int]) -> List[Tuple[int, Tuple[Tuple[str, float], ...]]]:
    return [(k, ranked.entries[:k]) for k in sorted(set(ks))]


def save_candidates(candidates: CandidateSet, path: PathLike) -> int:
    return write_jsonl(
        path,
        (
            {"concept_id": c.value, "chunk_id": chunk_id, "distance": d}
            for c, chunk_id, d in candidates.pairs
        ),
    )


def load_candidates(path: PathLike) -> CandidateSet:
    pairs = []
    counts: Dict[ConceptId, int] = {}
    for line_no, record in read_jsonl(path):
        where = f"{path}:{line_no}"
        concept_id = ConceptId.parse(record.get("concept_id"), where=where)
        if not isinstance(record.get("chunk_id"), str):
            raise ValidationError(f"{where}: candidate without chunk_id")
        pairs.append((concept_id, record["chunk_id"], float(record.get("distance", 0.0))))
        counts[concept_id] = counts.get(concept_id, 0) + 1
    return CandidateSet(tuple(pairs), max(counts.values(), default=1))
