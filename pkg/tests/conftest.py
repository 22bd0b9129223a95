import json
import logging
from pathlib import Path

import pytest

from src.concepts import load_registry, static_query_sets
from src.corpus import Chunk
from src.embedding import LocalEmbedder

REPO = Path(__file__).resolve().parent.parent
REGISTRY_PATH = REPO / "config" / "concepts" / "registry.json"
QUERIES_PATH = REPO / "config" / "concepts" / "queries.jsonl"


class FakeResponse(object):
    def __init__(self, status_code=200, body=None, text=""):
        self.status_code = status_code
        self._body = body
        self.text = text or json.dumps(body)

    def json(self):
        if self._body is None:
            raise ValueError("no json body")
        return self._body


class FakeSession(object):
    """Stands in for requests.Session: replies from a queue (or a handler) and records every call."""

    def __init__(self, replies=None, handler=None):
        self._replies = list(replies or [])
        self._handler = handler
        self.calls = []
        self.closed = False

    def close(self):
        self.closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def post(self, url, json=None, headers=None, timeout=None):
        self.calls.append({"url": url, "json": json, "headers": headers, "timeout": timeout})
        if self._handler is not None:
            reply = self._handler(url, json)
        else:
            reply = self._replies.pop(0) if len(self._replies) > 1 else self._replies[0]
        if isinstance(reply, Exception):
            raise reply
        return reply


@pytest.fixture(scope="session")
def registry():
    return load_registry(REGISTRY_PATH)


@pytest.fixture(scope="session")
def query_sets(registry):
    return static_query_sets(registry, QUERIES_PATH)


@pytest.fixture
def embedder():
    return LocalEmbedder(64)


@pytest.fixture
def no_sleep():
    delays = []
    return delays, delays.append


@pytest.fixture
def new_sessions(monkeypatch):
    """Patches `requests.Session` so sessions opened by the code under test are FakeSessions.

    Set `.replies` or `.handler` before the code runs; every opened session lands in `.created`.
    """

    class Factory(object):
        def __init__(self):
            self.replies = None
            self.handler = None
            self.created = []

        def __call__(self):
            session = FakeSession(self.replies, self.handler)
            self.created.append(session)
            return session

    factory = Factory()
    monkeypatch.setattr("requests.Session", factory)
    return factory


def make_chunk(chunk_id, text, patient_id="P0000", note_id=None, start=0):
    note_id = note_id if note_id is not None else chunk_id.split("#")[0]
    return Chunk(chunk_id, patient_id, note_id, start, start + len(text.encode("utf-8")), text)


def write_lines(path, records):
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        for record in records:
            f.write(json.dumps(record) + "\n")
    return path


@pytest.fixture(autouse=True)
def src_logger_propagates():
    """run.run() detaches the package logger from the root; reattach it so caplog sees records."""
    yield
    src_logger = logging.getLogger("src")
    src_logger.handlers.clear()
    src_logger.propagate = True
    src_logger.setLevel(logging.NOTSET)
