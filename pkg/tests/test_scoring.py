import json

import pytest

from conftest import FakeResponse, FakeSession, make_chunk
from src.concepts import CONCEPT_IDS, ConceptId
from src.errors import ConfigError, RemoteServiceError, ValidationError
from src.scoring import (
    SCORERS,
    ConceptScorer,
    ExternalScorer,
    LexicalScorer,
    Prediction,
    classify_corpus,
    external_score,
    lexical_score,
    load_predictions,
    make_scorer,
    rank_by_score,
    register_scorer,
)

ENDPOINT = "http://scorer.test/classify"


def _all(value):
    return {c.value: value for c in CONCEPT_IDS}


class _Exploding(ConceptScorer):
    name = "exploding"

    def __init__(self, fail_on):
        self.fail_on = fail_on

    def predict(self, chunk_text):
        if chunk_text == self.fail_on:
            raise RuntimeError("scorer crashed")
        return {c: (False, None) for c in CONCEPT_IDS}


class TestLexicalScore:
    def test_staging_mention(self, registry):
        flags = lexical_score("Pathology confirms stage IIIb adenocarcinoma", registry)
        assert flags[ConceptId.TUMOR_STAGING] is True
        assert flags[ConceptId.FAMILY_HISTORY] is False

    def test_negation_window(self, registry):
        assert lexical_score("No evidence of metastatic disease", registry)[ConceptId.DISEASE_STATUS] is False
        assert lexical_score("Denies chemotherapy side effects", registry)[ConceptId.TREATMENT_TYPES] is False
        assert lexical_score("Negative for BRAF mutation", registry)[ConceptId.BIOMARKERS_ASSESSED] is False

    def test_cue_outside_window_does_not_negate(self, registry):
        text = "Denies fever. " + "a" * 40 + " chemotherapy started"
        assert lexical_score(text, registry)[ConceptId.TREATMENT_TYPES] is True

    def test_one_unnegated_match_is_enough(self, registry):
        text = "No evidence of metastatic disease in the liver on this scan; new metastasis to bone."
        assert lexical_score(text, registry)[ConceptId.DISEASE_STATUS] is True

    def test_empty_text(self, registry):
        flags = lexical_score("", registry)
        assert list(flags) == list(CONCEPT_IDS)
        assert not any(flags.values())

    def test_scorer_is_total_and_deterministic(self, registry):
        scorer = make_scorer("lexical", registry)
        assert isinstance(scorer, LexicalScorer)
        text = "ECOG 1. Started pembrolizumab. Family history of melanoma."
        first = scorer.predict(text)
        assert first == scorer.predict(text)
        assert set(first) == set(CONCEPT_IDS)
        assert all(score is None for _, score in first.values())
        assert scorer.classify(text)[ConceptId.SCORES] is True
        assert scorer.metadata() == {"name": "lexical", "version": LexicalScorer(registry).version, "threshold": None}


class TestExternalScore:
    def test_all_false(self):
        session = FakeSession([FakeResponse(200, {"labels": _all(False)})])
        out = external_score("some text", ENDPOINT, session=session)
        assert out == {c: (False, None) for c in CONCEPT_IDS}
        assert session.calls[0]["json"] == {"text": "some text"}

    def test_missing_concept_named(self):
        labels = _all(False)
        del labels["scores"]
        session = FakeSession([FakeResponse(200, {"labels": labels})])
        with pytest.raises(RemoteServiceError, match="scores"):
            external_score("text", ENDPOINT, session=session)

    def test_threshold(self):
        scores = _all(0.2)
        scores["tumor_staging"] = 0.5
        scores["scores"] = 0.49
        scores["family_history"] = 0.93
        session = FakeSession([FakeResponse(200, {"labels": _all(False), "scores": scores})])
        out = external_score("text", ENDPOINT, threshold=0.5, session=session)
        assert out[ConceptId.TUMOR_STAGING] == (True, 0.5)
        assert out[ConceptId.SCORES] == (False, 0.49)
        assert out[ConceptId.FAMILY_HISTORY] == (True, 0.93)
        assert sum(flag for flag, _ in out.values()) == 2

    def test_score_out_of_range(self):
        scores = _all(0.1)
        scores["scores"] = 1.5
        session = FakeSession([FakeResponse(200, {"scores": scores})])
        with pytest.raises(RemoteServiceError, match="outside"):
            external_score("text", ENDPOINT, session=session)

    def test_empty_body(self):
        session = FakeSession([FakeResponse(200, {})])
        with pytest.raises(RemoteServiceError, match="neither"):
            external_score("text", ENDPOINT, session=session)

    def test_transport_failure(self, no_sleep):
        _, sleep = no_sleep
        session = FakeSession([FakeResponse(503, text="down")])
        with pytest.raises(RemoteServiceError):
            external_score("text", ENDPOINT, session=session, sleep=sleep)

    def test_make_external_scorer(self, registry):
        session = FakeSession([FakeResponse(200, {"scores": _all(0.7)})])
        scorer = make_scorer(f"external:{ENDPOINT}", registry, threshold=0.8, session=session)
        assert isinstance(scorer, ExternalScorer)
        assert scorer.name == f"external:{ENDPOINT}"
        assert scorer.metadata()["threshold"] == 0.8
        assert not any(scorer.classify("text").values())

    def test_bare_call_closes_its_session(self, new_sessions):
        new_sessions.replies = [FakeResponse(200, {"labels": _all(True)})]
        assert all(flag for flag, _ in external_score("text", ENDPOINT).values())
        assert len(new_sessions.created) == 1
        assert new_sessions.created[0].closed

    def test_scorer_keeps_one_session_until_closed(self, registry, new_sessions):
        new_sessions.replies = [FakeResponse(200, {"labels": _all(False)})]
        with make_scorer(f"external:{ENDPOINT}", registry) as scorer:
            for text in ("one", "two", "three"):
                scorer.classify(text)
        assert len(new_sessions.created) == 1
        assert [c["json"]["text"] for c in new_sessions.created[0].calls] == ["one", "two", "three"]
        assert new_sessions.created[0].closed


class TestMakeScorer:
    def test_unknown(self, registry):
        with pytest.raises(ConfigError, match="Unknown scorer"):
            make_scorer("bert", registry)

    def test_external_needs_url(self, registry):
        with pytest.raises(ConfigError):
            make_scorer("external", registry)

    def test_threshold_range(self, registry):
        with pytest.raises(ConfigError):
            make_scorer(f"external:{ENDPOINT}", registry, threshold=1.5)

    def test_registry_rejects_duplicates(self):
        assert {"lexical", "external"} <= set(SCORERS)
        with pytest.raises(ValueError):
            register_scorer("lexical")(LexicalScorer)


class TestClassifyCorpus:
    def _chunks(self):
        return [
            make_chunk("N1#0", "Stage IV disease."),
            make_chunk("N1#1", "ECOG 2."),
            make_chunk("N2#0", "Family history of breast cancer."),
            make_chunk("N2#1", "Plan: start chemotherapy next week."),
        ]

    def test_thirteen_per_chunk_in_order(self, registry):
        predictions = classify_corpus(LexicalScorer(registry), self._chunks())
        assert len(predictions) == 52
        assert [(p.chunk_id, p.concept_id) for p in predictions] == [
            (c.chunk_id, concept_id) for c in self._chunks() for concept_id in CONCEPT_IDS
        ]
        positives = {(p.chunk_id, p.concept_id) for p in predictions if p.predicted}
        assert positives == {
            ("N1#0", ConceptId.TUMOR_STAGING),
            ("N1#1", ConceptId.SCORES),
            ("N2#0", ConceptId.FAMILY_HISTORY),
            ("N2#1", ConceptId.TREATMENT_TYPES),
        }

    def test_identical_files(self, registry, tmp_path):
        scorer = LexicalScorer(registry)
        classify_corpus(scorer, self._chunks(), tmp_path / "a.jsonl")
        classify_corpus(scorer, self._chunks(), tmp_path / "b.jsonl", parallel=4)
        assert (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()

    def test_failure_leaves_no_partial_file(self, tmp_path):
        chunks = self._chunks()
        with pytest.raises(RuntimeError):
            classify_corpus(_Exploding(chunks[2].text), chunks, tmp_path / "p.jsonl")
        assert not (tmp_path / "p.jsonl").exists()
        assert list(tmp_path.iterdir()) == []

    def test_incomplete_scorer_rejected(self):
        class Partial(ConceptScorer):
            def predict(self, chunk_text):
                return {ConceptId.SCORES: (True, None)}

        with pytest.raises(ValidationError, match="current_diagnosis"):
            classify_corpus(Partial(), self._chunks()[:1])

    def test_predictions_round_trip(self, registry, tmp_path):
        predictions = classify_corpus(LexicalScorer(registry), self._chunks(), tmp_path / "p.jsonl")
        assert load_predictions(tmp_path / "p.jsonl") == predictions
        first = json.loads((tmp_path / "p.jsonl").read_text().splitlines()[0])
        assert first == {"chunk_id": "N1#0", "concept_id": "current_diagnosis", "predicted": False, "score": None}


class TestRankByScore:
    def test_orders_by_score_then_id(self):
        predictions = [
            Prediction("c", ConceptId.SCORES, True, 0.75),
            Prediction("a", ConceptId.SCORES, True, 0.75),
            Prediction("b", ConceptId.SCORES, True, 0.95),
            Prediction("d", ConceptId.SCORES, False, 0.3),
            Prediction("e", ConceptId.TUMOR_STAGING, True, 0.99),
        ]
        ranked = rank_by_score(predictions, ConceptId.SCORES)
        assert ranked.chunk_ids() == ["b", "a", "c"]
        assert ranked.entries[0][1] == pytest.approx(0.05)
        assert rank_by_score(predictions, ConceptId.SCORES, k=2).chunk_ids() == ["b", "a"]

    def test_unscored_positives_tie_at_zero(self):
        predictions = [Prediction(cid, ConceptId.SCORES, True) for cid in ("z", "m", "a")]
        ranked = rank_by_score(predictions, ConceptId.SCORES)
        assert ranked.entries == (("a", 0.0), ("m", 0.0), ("z", 0.0))

    def test_matches_retrieval_ordering_contract(self, registry):
        chunks = [make_chunk(f"N#{i}", f"Stage {'I' * (i % 3 + 1)} disease") for i in range(9)]
        scores = [0.9, 0.1, 0.6, 0.6, 0.95, 0.5, 0.72, 0.6, 0.3]
        predictions = [
            Prediction(c.chunk_id, ConceptId.TUMOR_STAGING, s >= 0.5, s) for c, s in zip(chunks, scores)
        ]
        ranked = rank_by_score(predictions, ConceptId.TUMOR_STAGING)
        distances = [d for _, d in ranked.entries]
        assert distances == sorted(distances)
        assert len(set(ranked.chunk_ids())) == len(ranked.entries) == 7
        assert ranked.chunk_ids()[:3] == ["N#4", "N#0", "N#6"]
        assert ranked.chunk_ids()[3:6] == ["N#2", "N#3", "N#7"]
