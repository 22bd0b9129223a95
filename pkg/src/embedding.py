import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, List, NamedTuple, Optional, Sequence, Union

import numpy as np
import requests

from src.errors import ConfigError, RemoteServiceError, ValidationError
from src.utils import SessionHolder, fnv1a_64, post_json

logger = logging.getLogger(__name__)

MIN_LOCAL_DIM = 16
DEFAULT_LOCAL_DIM = 256


class EmbeddingVector(object):
    __slots__ = ("values",)

    def __init__(self, values: Union[Sequence[float], np.ndarray]):
        values = np.array(values, dtype=np.float64)
        if values.ndim != 1 or values.shape[0] == 0:
            raise ValidationError(f"Embedding must be a non-empty 1-D vector, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValidationError("Embedding contains non-finite values")
        if not values.any():
            raise ValidationError("Zero vectors are not valid embeddings")
        values.setflags(write=False)
        self.values = values

    @property
    def dim(self) -> int:
        return self.values.shape[0]

    def __eq__(self, other) -> bool:
        return isinstance(other, EmbeddingVector) and np.array_equal(self.values, other.values)

    def __repr__(self) -> str:
        return f"EmbeddingVector(dim={self.dim})"


class EmbedderSpec(NamedTuple):
    kind: str = "local"
    dim: int = DEFAULT_LOCAL_DIM
    endpoint: Optional[str] = None
    model_name: Optional[str] = None
    batch_size: int = 64
    timeout: float = 30.0
    max_attempts: int = 5

    def validate(self) -> "EmbedderSpec":
        if self.kind not in ("local", "remote"):
            raise ConfigError(f"Embedder kind must be 'local' or 'remote', got {self.kind!r}")
        if self.dim <= 0 or self.batch_size <= 0:
            raise ConfigError("Embedder dim and batch_size must be positive")
        if self.kind == "remote" and (not self.endpoint or not self.model_name):
            raise ConfigError("A remote embedder needs both endpoint and model_name")
        return self


def _as_array(v) -> np.ndarray:
    return v.values if isinstance(v, EmbeddingVector) else np.asarray(v, dtype=np.float64)


def cosine_distance(a, b) -> float:
    a = _as_array(a)
    b = _as_array(b)
    if a.shape != b.shape:
        raise ValidationError(f"Dimension mismatch: {a.shape[0]} vs {b.shape[0]}")
    na = np.sqrt((a * a).sum())
    nb = np.sqrt((b * b).sum())
    if na == 0 or nb == 0:
        raise ValidationError("Cosine distance is undefined for zero vectors")
    dot = (a * b).sum()
    return float(np.clip(1.0 - dot / (na * nb), 0.0, 2.0))


def cosine_distances(query, rows: np.ndarray, row_norms: np.ndarray) -> np.ndarray:
    """Distances from one query to every row; same arithmetic as `cosine_distance`, row by row."""
    q = _as_array(query)
    if rows.shape[1] != q.shape[0]:
        raise ValidationError(f"Dimension mismatch: {q.shape[0]} vs {rows.shape[1]}")
    nq = np.sqrt((q * q).sum())
    if nq == 0:
        raise ValidationError("Cosine distance is undefined for zero vectors")
    dots = (rows * q).sum(axis=1)
    return np.clip(1.0 - dots / (nq * row_norms), 0.0, 2.0)


def row_norms(rows: np.ndarray) -> np.ndarray:
    return np.sqrt((rows * rows).sum(axis=1))


def _features(text: str) -> List[str]:
    text = text.lower()
    if len(text) < 3:
        return list(text)
    return [text[i : i + 3] for i in range(len(text) - 2)]


def embed_local(text: str, dim: int = DEFAULT_LOCAL_DIM) -> EmbeddingVector:
    """Hashed character-trigram counts (FNV-1a 64 modulo dim), L2-normalised."""
    if dim < MIN_LOCAL_DIM:
        raise ValidationError(f"Local embedder needs dim >= {MIN_LOCAL_DIM}, got {dim}")
    if not text:
        raise ValidationError("Cannot embed empty text")

    counts = np.zeros(dim, dtype=np.float64)
    for feature in _features(text):
        counts[fnv1a_64(feature.encode("utf-8")) % dim] += 1.0
    return EmbeddingVector(counts / np.sqrt((counts * counts).sum()))


def _parse_batch(body, expected: int, endpoint: str) -> List[List[float]]:
    try:
        data = sorted(body["data"], key=lambda item: item["index"])
        vectors = [item["embedding"] for item in data]
    except (KeyError, TypeError) as e:
        raise RemoteServiceError(f"{endpoint} returned an unexpected embedding shape") from e
    if len(vectors) != expected:
        raise RemoteServiceError(
            f"{endpoint} returned {len(vectors)} vectors for {expected} inputs"
        )
    return vectors


def embed_remote(
    texts: Sequence[str],
    spec: EmbedderSpec,
    session=None,
    parallel_requests: int = 4,
    api_key: Optional[str] = None,
    sleep: Callable[[float], None] = time.sleep,
) -> List[EmbeddingVector]:
    spec.validate()
    if spec.kind != "remote":
        raise ConfigError("embed_remote needs a remote embedder spec")
    if not texts:
        raise ValidationError("embed_remote needs at least one text")
    if session is None:
        with requests.Session() as owned:
            return embed_remote(texts, spec, owned, parallel_requests, api_key, sleep)

    api_key = api_key if api_key is not None else os.environ.get("EMBED_API_KEY")
    headers = {"Authorization": f"Bearer {api_key}"} if api_key else None
    batches = [
        list(texts[i : i + spec.batch_size]) for i in range(0, len(texts), spec.batch_size)
    ]

    def run_batch(batch: List[str]) -> List[List[float]]:
        body = post_json(
            spec.endpoint,
            {"model": spec.model_name, "input": batch},
            session=session,
            headers=headers,
            timeout=spec.timeout,
            max_attempts=spec.max_attempts,
            sleep=sleep,
        )
        return _parse_batch(body, len(batch), spec.endpoint)

    with ThreadPoolExecutor(max_workers=max(1, parallel_requests)) as pool:
        results = list(pool.map(run_batch, batches))

    vectors = [EmbeddingVector(v) for batch in results for v in batch]
    dims = {v.dim for v in vectors}
    if len(dims) != 1:
        raise RemoteServiceError(f"{spec.endpoint} returned inconsistent dims {sorted(dims)}")
    logger.debug(f"Embedded {len(texts)} texts in {len(batches)} batches via {spec.endpoint}")
    return vectors


class LocalEmbedder(object):
    kind = "local"

    def __init__(self, dim: int = DEFAULT_LOCAL_DIM):
        if dim < MIN_LOCAL_DIM:
            raise ValidationError(f"Local embedder needs dim >= {MIN_LOCAL_DIM}, got {dim}")
        self.dim = dim

    @property
    def fingerprint(self) -> str:
        return f"local:fnv1a64-trigram:{self.dim}"

    def embed(self, texts: Sequence[str]) -> List[EmbeddingVector]:
        return [embed_local(text, self.dim) for text in texts]

    def close(self):
        pass


class RemoteEmbedder(SessionHolder):
    kind = "remote"

    def __init__(self, spec: EmbedderSpec, session=None, parallel_requests: int = 4, sleep=time.sleep):
        self._spec = spec.validate()
        self._open_session(session)
        self._parallel_requests = parallel_requests
        self._sleep = sleep
        self.dim = spec.dim

    @property
    def fingerprint(self) -> str:
        return f"remote:{self._spec.model_name}:{self._spec.dim}"

    def embed(self, texts: Sequence[str]) -> List[EmbeddingVector]:
        vectors = embed_remote(
            texts,
            self._spec,
            session=self._session,
            parallel_requests=self._parallel_requests,
            sleep=self._sleep,
        )
        if vectors[0].dim != self._spec.dim:
            raise RemoteServiceError(
                f"Embedder returned dim {vectors[0].dim}, configured dim is {self._spec.dim}"
            )
        return vectors


def make_embedder(spec: EmbedderSpec, parallel_requests: int = 4):
    spec.validate()
    if spec.kind == "local":
        return LocalEmbedder(spec.dim)
    return RemoteEmbedder(spec, parallel_requests=parallel_requests)
