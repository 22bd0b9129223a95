import pytest

from conftest import FakeResponse, FakeSession, write_lines
from src.errors import ConfigError, DataIOError, RemoteServiceError, ValidationError
from src.llm import HttpLlmClient, LlmSpec, MockLlmClient, load_prompt, make_llm, prompt_sha256

SPEC = LlmSpec(endpoint="http://llm.test/v1/chat/completions", model="test-model", max_retries=3)


def _completion(text):
    return FakeResponse(200, {"choices": [{"message": {"role": "assistant", "content": text}}]})


class TestHttpLlmClient:
    def test_request_body_and_reply(self):
        session = FakeSession([_completion("hello")])
        client = HttpLlmClient(SPEC, api_key="sk-llm", session=session)
        assert client.complete("Is this staging?") == "hello"
        call = session.calls[0]
        assert call["url"] == SPEC.endpoint
        assert call["json"] == {
            "model": "test-model",
            "messages": [{"role": "user", "content": "Is this staging?"}],
            "temperature": 0.0,
        }
        assert call["headers"] == {"Authorization": "Bearer sk-llm"}
        assert call["timeout"] == SPEC.timeout

    def test_api_key_from_environment(self, monkeypatch):
        monkeypatch.setenv("LLM_API_KEY", "sk-env")
        session = FakeSession([_completion("ok")])
        HttpLlmClient(SPEC, session=session).complete("x")
        assert session.calls[0]["headers"] == {"Authorization": "Bearer sk-env"}

    def test_retries_server_errors(self, no_sleep):
        delays, sleep = no_sleep
        session = FakeSession([FakeResponse(500, text="boom"), _completion("fine")])
        assert HttpLlmClient(SPEC, session=session, sleep=sleep).complete("x") == "fine"
        assert delays == [0.5]

    def test_gives_up_after_max_retries(self, no_sleep):
        _, sleep = no_sleep
        session = FakeSession([FakeResponse(502, text="bad gateway")])
        with pytest.raises(RemoteServiceError, match="after 3 attempts"):
            HttpLlmClient(SPEC, session=session, sleep=sleep).complete("x")
        assert len(session.calls) == 3

    def test_unexpected_shape(self):
        session = FakeSession([FakeResponse(200, {"choices": []})])
        with pytest.raises(RemoteServiceError, match="unexpected completion shape"):
            HttpLlmClient(SPEC, session=session).complete("x")

    def test_owns_one_session_until_closed(self, new_sessions):
        new_sessions.replies = [_completion("a"), _completion("b")]
        with HttpLlmClient(SPEC) as client:
            assert [client.complete("x"), client.complete("y")] == ["a", "b"]
            assert len(new_sessions.created) == 1
            assert len(new_sessions.created[0].calls) == 2
            assert not new_sessions.created[0].closed
        assert new_sessions.created[0].closed

    def test_injected_session_left_open(self, new_sessions):
        session = FakeSession([_completion("ok")])
        client = HttpLlmClient(SPEC, session=session)
        client.complete("x")
        client.close()
        assert not session.closed
        assert new_sessions.created == []

    def test_needs_endpoint_and_model(self):
        with pytest.raises(ConfigError):
            HttpLlmClient(LlmSpec())
        with pytest.raises(ConfigError):
            make_llm(LlmSpec(endpoint="http://x"))


class TestMockLlmClient:
    def test_lookup_order(self):
        prompt = "the prompt"
        llm = MockLlmClient(
            {
                "label:scores:N#1": "exact",
                "label:scores": "concept",
                prompt_sha256(prompt): "by-hash",
            },
            {"label": "kind-default", "*": "global-default"},
        )
        assert llm.complete(prompt, key="label:scores:N#1") == "exact"
        assert llm.complete(prompt, key="label:scores:N#2") == "concept"
        assert llm.complete(prompt, key="label:family_history:N#2") == "by-hash"
        assert llm.complete("other", key="label:family_history:N#2") == "kind-default"
        assert llm.complete("other", key="verify:family_history:N#2") == "global-default"
        assert llm.complete("other") == "global-default"

    def test_unscripted_request_fails(self):
        with pytest.raises(RemoteServiceError, match="no scripted response"):
            MockLlmClient().complete("x", key="label:scores:N#1")

    def test_lists_are_served_in_sequence_per_key(self):
        llm = MockLlmClient({"label:scores": ["first", "second"]})
        assert llm.complete("p", key="label:scores:A") == "first"
        assert llm.complete("p", key="label:scores:A") == "second"
        assert llm.complete("p", key="label:scores:A") == "second"
        assert llm.complete("p", key="label:scores:B") == "first"

    def test_call_history_and_reset(self):
        llm = MockLlmClient(defaults={"*": "ok"})
        llm.complete("a", key="label:scores:1")
        llm.complete("b", key="verify:scores:1")
        llm.complete("c", key="label:scores:2")
        assert llm.calls() == 3
        assert llm.calls("label") == 2
        assert llm.calls("verify") == 1
        assert [c["prompt"] for c in llm.call_history] == ["a", "b", "c"]
        llm.reset()
        assert llm.calls() == 0

    def test_from_script(self, tmp_path):
        path = write_lines(
            tmp_path / "script.jsonl",
            [
                {"kind": "label", "concept_id": "scores", "chunk_id": "N#0", "response": "yes"},
                {"kind": "expand", "concept_id": "scores", "response": "ecog"},
                {"prompt_sha256": prompt_sha256("hash me"), "response": "hashed"},
                {"default": True, "kind": "verify", "response": "no"},
            ],
        )
        llm = make_llm(SPEC, mock_script=path)
        assert isinstance(llm, MockLlmClient)
        assert llm.complete("p", key="label:scores:N#0") == "yes"
        assert llm.complete("p", key="expand:scores:2") == "ecog"
        assert llm.complete("hash me", key="label:scores:N#9") == "hashed"
        assert llm.complete("p", key="verify:scores:N#9") == "no"

    def test_from_script_rejects_bad_entries(self, tmp_path):
        path = write_lines(tmp_path / "a.jsonl", [{"kind": "label", "concept_id": "scores"}])
        with pytest.raises(ValidationError, match="without 'response'"):
            MockLlmClient.from_script(path)
        path = write_lines(tmp_path / "b.jsonl", [{"response": "orphan"}])
        with pytest.raises(ValidationError, match=":1:"):
            MockLlmClient.from_script(path)


class TestPrompts:
    @pytest.mark.parametrize("name", ["label", "verify", "expand_queries"])
    def test_shipped_templates_exist(self, name):
        assert load_prompt(name).strip()

    def test_missing_template(self, tmp_path):
        with pytest.raises(DataIOError):
            load_prompt("label", prompt_dir=tmp_path)
