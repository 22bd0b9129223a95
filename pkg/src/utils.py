import json
import logging
import os
import sys
import tempfile
import time
from contextlib import contextmanager
from pathlib import Path
from typing import Any, Callable, Dict, Iterable, Iterator, Optional, Tuple, Union

import requests

from src.errors import DataIOError, RemoteServiceError, ValidationError

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]

FNV_OFFSET_BASIS = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3
RETRY_STATUSES = frozenset({429, 500, 502, 503, 504})


def setup_logger(logger: logging.Logger, debug: bool = False):
    if debug:
        level = logging.DEBUG
    else:
        level = logging.INFO
    logger.setLevel(level)
    logger.propagate = False

    formatter = logging.Formatter(
        "[%(asctime)s %(pathname)s:%(lineno)d] %(levelname)-8s %(message)s"
    )
    std_handler = logging.StreamHandler(sys.stdout)
    std_handler.setFormatter(formatter)
    std_handler.setLevel(level)
    if logger.hasHandlers():
        logger.handlers.clear()
    logger.addHandler(std_handler)


def fnv1a_64(data: bytes) -> int:
    h = FNV_OFFSET_BASIS
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


@contextmanager
def atomic_output(path: PathLike, mode: str = "w"):
    """Yields a handle on a temp file next to `path`; renamed over `path` on success only."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(
            prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent)
        )
    except OSError as e:
        raise DataIOError(f"Cannot write {path}: {e}") from e

    os.close(fd)
    try:
        if "b" in mode:
            with open(tmp_name, mode) as f:
                yield f
        else:
            with open(tmp_name, mode, encoding="utf-8", newline="\n") as f:
                yield f
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


@contextmanager
def atomic_path(path: PathLike):
    """Like `atomic_output` but yields the temp path, for writers that open files themselves."""
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp_name = tempfile.mkstemp(
            prefix=f".{path.name}.", suffix=".tmp", dir=str(path.parent)
        )
    except OSError as e:
        raise DataIOError(f"Cannot write {path}: {e}") from e

    os.close(fd)
    try:
        yield Path(tmp_name)
        os.replace(tmp_name, path)
    except BaseException:
        if os.path.exists(tmp_name):
            os.remove(tmp_name)
        raise


def dumps_record(record: Dict[str, Any]) -> str:
    return json.dumps(record, ensure_ascii=False, separators=(", ", ": "))


def read_jsonl(path: PathLike) -> Iterator[Tuple[int, Dict[str, Any]]]:
    """Yields (line number, object) pairs; blank lines are skipped."""
    path = Path(path)
    try:
        f = open(path, "r", encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"Cannot read {path}: {e}") from e

    with f:
        try:
            for line_no, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    record = json.loads(line)
                except json.JSONDecodeError as e:
                    raise ValidationError(
                        f"{path}:{line_no}: malformed JSON record ({e.msg})"
                    ) from e
                if not isinstance(record, dict):
                    raise ValidationError(
                        f"{path}:{line_no}: expected a JSON object, got {type(record).__name__}"
                    )
                yield line_no, record
        except UnicodeDecodeError as e:
            raise DataIOError(f"{path} is not valid UTF-8: {e}") from e


def write_jsonl(path: PathLike, records: Iterable[Dict[str, Any]]) -> int:
    count = 0
    with atomic_output(path) as f:
        for record in records:
            f.write(dumps_record(record))
            f.write("\n")
            count += 1
    logger.debug(f"Wrote {count} records to {path}")
    return count


def require_file(path: Optional[PathLike], what: str) -> Path:
    if path is None:
        raise DataIOError(f"No path configured for {what}")
    path = Path(path)
    if not path.is_file():
        raise DataIOError(f"Missing {what}: {path}")
    return path


def post_json(
    url: str,
    payload: Dict[str, Any],
    session=None,
    headers: Optional[Dict[str, str]] = None,
    timeout: float = 30.0,
    max_attempts: int = 5,
    backoff: float = 0.5,
    sleep: Callable[[float], None] = time.sleep,
) -> Dict[str, Any]:
    """POSTs JSON, retrying transient failures (429, 5xx, connection errors) with exponential backoff."""
    if session is None:
        with requests.Session() as owned:
            return post_json(url, payload, owned, headers, timeout, max_attempts, backoff, sleep)

    last_error = None
    for attempt in range(max_attempts):
        try:
            response = session.post(url, json=payload, headers=headers, timeout=timeout)
        except (requests.ConnectionError, requests.Timeout) as e:
            last_error = f"{type(e).__name__}: {e}"
        else:
            if response.status_code in RETRY_STATUSES:
                last_error = f"HTTP {response.status_code}"
            elif response.status_code >= 400:
                raise RemoteServiceError(
                    f"{url} rejected the request: HTTP {response.status_code} {response.text[:200]}"
                )
            else:
                try:
                    return response.json()
                except ValueError as e:
                    raise RemoteServiceError(f"{url} returned a non-JSON body") from e

        if attempt + 1 < max_attempts:
            delay = backoff * (2**attempt)
            logger.warning(
                f"{url}: {last_error}, retrying in {delay:.2f}s ({attempt + 1}/{max_attempts})"
            )
            sleep(delay)

    raise RemoteServiceError(f"{url} unreachable after {max_attempts} attempts ({last_error})")


class SessionHolder(object):
    """One `requests.Session` per client, shared by all of its requests.

    A session passed in by the caller is used as is and left open on `close()`.
    """

    def _open_session(self, session=None):
        self._owns_session = session is None
        self._session = requests.Session() if session is None else session

    def close(self):
        if self._owns_session:
            self._session.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()
