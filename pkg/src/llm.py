"""LLM clients: a chat-completions HTTP client and a scripted mock for offline runs."""
import hashlib
import logging
import os
import threading
import time
from collections import defaultdict
from pathlib import Path
from typing import Callable, Dict, List, NamedTuple, Optional, Union

from src.errors import ConfigError, DataIOError, RemoteServiceError, ValidationError
from src.utils import PathLike, SessionHolder, post_json, read_jsonl

logger = logging.getLogger(__name__)

PROMPT_DIR = Path(__file__).resolve().parent.parent / "config" / "prompts"
PROMPT_VERSION = "v1"


def load_prompt(name: str, prompt_dir: Optional[PathLike] = None, version: str = PROMPT_VERSION) -> str:
    path = Path(prompt_dir or PROMPT_DIR) / f"{name}_{version}.txt"
    try:
        return path.read_text(encoding="utf-8")
    except OSError as e:
        raise DataIOError(f"Cannot read prompt template {path}: {e}") from e


def prompt_sha256(prompt: str) -> str:
    return hashlib.sha256(prompt.encode("utf-8")).hexdigest()


def request_key(kind: str, concept_id: str, item: Union[str, int]) -> str:
    return f"{kind}:{concept_id}:{item}"


class LlmSpec(NamedTuple):
    endpoint: Optional[str] = None
    model: Optional[str] = None
    temperature: float = 0.0
    max_retries: int = 5
    timeout: float = 60.0


class LlmClient(object):
    """complete(prompt) -> text. `key` identifies the request for scripted backends."""

    name = "llm"

    def complete(self, prompt: str, key: Optional[str] = None) -> str:
        raise NotImplementedError

    def close(self):
        pass


class HttpLlmClient(SessionHolder, LlmClient):
    def __init__(
        self,
        spec: LlmSpec,
        api_key: Optional[str] = None,
        session=None,
        sleep: Callable[[float], None] = time.sleep,
    ):
        if not spec.endpoint or not spec.model:
            raise ConfigError("An LLM endpoint and model are required (or pass --mock-llm)")
        self._spec = spec
        self._api_key = api_key if api_key is not None else os.environ.get("LLM_API_KEY")
        self._open_session(session)
        self._sleep = sleep
        self.name = spec.model

    def complete(self, prompt: str, key: Optional[str] = None) -> str:
        headers = {"Authorization": f"Bearer {self._api_key}"} if self._api_key else None
        body = post_json(
            self._spec.endpoint,
            {
                "model": self._spec.model,
                "messages": [{"role": "user", "content": prompt}],
                "temperature": self._spec.temperature,
            },
            session=self._session,
            headers=headers,
            timeout=self._spec.timeout,
            max_attempts=self._spec.max_retries,
            sleep=self._sleep,
        )
        try:
            return body["choices"][0]["message"]["content"]
        except (KeyError, IndexError, TypeError) as e:
            raise RemoteServiceError(
                f"{self._spec.endpoint} returned an unexpected completion shape"
            ) from e


class MockLlmClient(LlmClient):
    """Serves canned responses.

    Lookup order: exact request key, key without its last segment (`kind:concept_id`),
    prompt SHA-256, per-kind default, global default. A list of responses is served in
    sequence, repeating the last one once exhausted.
    """

    name = "mock-llm"

    def __init__(
        self,
        responses: Optional[Dict[str, Union[str, List[str]]]] = None,
        defaults: Optional[Dict[str, Union[str, List[str]]]] = None,
    ):
        self._responses = dict(responses or {})
        self._defaults = dict(defaults or {})
        self._served = defaultdict(int)
        self._lock = threading.Lock()
        self.call_history: List[Dict[str, Optional[str]]] = []

    @classmethod
    def from_script(cls, path: PathLike) -> "MockLlmClient":
        responses = {}
        defaults = {}
        for line_no, record in read_jsonl(path):
            if "response" not in record:
                raise ValidationError(f"{path}:{line_no}: script entry without 'response'")
            if "prompt_sha256" in record:
                responses[record["prompt_sha256"]] = record["response"]
            elif record.get("default"):
                defaults[record.get("kind", "*")] = record["response"]
            elif "kind" in record and "concept_id" in record:
                parts = [record["kind"], record["concept_id"]]
                if "chunk_id" in record:
                    parts.append(str(record["chunk_id"]))
                responses[":".join(parts)] = record["response"]
            else:
                raise ValidationError(
                    f"{path}:{line_no}: script entry needs prompt_sha256, default, or kind+concept_id"
                )
        logger.info(f"Loaded mock LLM script {path} ({len(responses)} entries)")
        return cls(responses, defaults)

    def _lookup(self, prompt: str, key: Optional[str]):
        candidates = []
        if key is not None:
            candidates.append(key)
            candidates.append(key.rsplit(":", 1)[0])
        candidates.append(prompt_sha256(prompt))
        for candidate in candidates:
            if candidate in self._responses:
                return candidate, self._responses[candidate]
        kind = key.split(":", 1)[0] if key else "*"
        for candidate in (kind, "*"):
            if candidate in self._defaults:
                return f"default:{candidate}", self._defaults[candidate]
        raise RemoteServiceError(f"Mock LLM has no scripted response for key={key!r}")

    def complete(self, prompt: str, key: Optional[str] = None) -> str:
        with self._lock:
            self.call_history.append({"key": key, "prompt": prompt})
            slot, response = self._lookup(prompt, key)
            if isinstance(response, list):
                served = self._served[(slot, key)]
                self._served[(slot, key)] += 1
                return response[min(served, len(response) - 1)]
            return response

    def calls(self, kind: Optional[str] = None) -> int:
        with self._lock:
            if kind is None:
                return len(self.call_history)
            return sum(
                1 for call in self.call_history if (call["key"] or "").startswith(f"{kind}:")
            )

    def reset(self):
        with self._lock:
            self.call_history = []
            self._served.clear()


def make_llm(spec: LlmSpec, mock_script: Optional[PathLike] = None) -> LlmClient:
    if mock_script is not None:
        return MockLlmClient.from_script(mock_script)
    return HttpLlmClient(spec)
