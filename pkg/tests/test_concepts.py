import json
import logging
import re

import pytest

from conftest import QUERIES_PATH, REGISTRY_PATH, write_lines
from src.concepts import (
    CONCEPT_IDS,
    ConceptId,
    dedupe_queries,
    expand_queries,
    load_registry,
    parse_query_lines,
    save_query_sets,
    save_registry,
    static_query_sets,
)
from src.errors import DataIOError, RemoteServiceError, ValidationError
from src.llm import MockLlmClient


def _shipped_document():
    with open(REGISTRY_PATH, "r", encoding="utf-8") as f:
        return json.load(f)


def _write_document(path, document):
    path.write_text(json.dumps(document), encoding="utf-8")
    return path


class TestRegistry:
    def test_shipped_registry_has_thirteen_concepts(self, registry):
        assert len(CONCEPT_IDS) == 13
        assert list(registry) == list(CONCEPT_IDS)
        for concept_id, concept in registry.items():
            assert concept.id is concept_id
            assert concept.definition
            assert concept.seed_queries
            assert concept.patterns

    def test_concept_ids_serialize_stably(self):
        assert ConceptId.TUMOR_STAGING.value == "tumor_staging"
        assert ConceptId.parse("scores") is ConceptId.SCORES
        with pytest.raises(ValidationError, match="'tumour_staging'"):
            ConceptId.parse("tumour_staging")

    def test_missing_concept_is_named(self, tmp_path):
        document = _shipped_document()
        document["concepts"] = [c for c in document["concepts"] if c["id"] != "scores"]
        with pytest.raises(ValidationError, match="missing concepts: scores"):
            load_registry(_write_document(tmp_path / "registry.json", document))

    def test_invalid_pattern_names_concept_and_pattern(self, tmp_path):
        document = _shipped_document()
        document["concepts"][3]["patterns"].append("(")
        with pytest.raises(ValidationError) as excinfo:
            load_registry(_write_document(tmp_path / "registry.json", document))
        assert "tumor_staging" in str(excinfo.value)
        assert "'('" in str(excinfo.value)

    def test_empty_definition(self, tmp_path):
        document = _shipped_document()
        document["concepts"][0]["definition"] = "  "
        with pytest.raises(ValidationError, match="current_diagnosis has an empty definition"):
            load_registry(_write_document(tmp_path / "registry.json", document))

    def test_unknown_and_duplicate_concepts(self, tmp_path):
        document = _shipped_document()
        document["concepts"].append(dict(document["concepts"][0]))
        with pytest.raises(ValidationError, match="defined twice"):
            load_registry(_write_document(tmp_path / "dup.json", document))

        document = _shipped_document()
        document["concepts"][0]["id"] = "performance_status"
        with pytest.raises(ValidationError, match="performance_status"):
            load_registry(_write_document(tmp_path / "unknown.json", document))

    def test_missing_file(self, tmp_path):
        with pytest.raises(DataIOError):
            load_registry(tmp_path / "nope.json")

    def test_round_trip(self, registry, tmp_path):
        save_registry(registry, tmp_path / "a.json")
        reloaded = load_registry(tmp_path / "a.json")
        assert reloaded == registry
        save_registry(reloaded, tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_patterns_are_case_insensitive(self, registry):
        staging = registry[ConceptId.TUMOR_STAGING]
        assert staging.pattern_spans("pathology shows STAGE iiib disease")
        assert staging.pattern_spans("pT2N0M0")
        assert staging.pattern_spans("no mention here") == []

    def test_compiled_patterns(self, registry):
        staging = registry[ConceptId.TUMOR_STAGING]
        compiled = staging.compiled_patterns()
        assert [p.pattern for p in compiled] == list(staging.patterns)
        assert all(p.flags & re.IGNORECASE for p in compiled)
        assert compiled[0] is staging.compiled_patterns()[0]
        assert compiled[1].search("Stage IIIb adenocarcinoma").group(0) == "Stage IIIb"
        assert compiled[0].search("pT2 N1 M0 after resection")
        assert not any(p.search("ECOG 1 at this visit") for p in compiled)

    @pytest.mark.parametrize(
        "mutate, message",
        [
            (lambda concepts: concepts.__setitem__(0, "current_diagnosis"), "concept entry 0 is not an object"),
            (lambda concepts: concepts[4].__setitem__("seed_queries", ["combined stage", 7]), "combined_stage seed_queries"),
            (lambda concepts: concepts[4].__setitem__("seed_queries", "combined stage"), "combined_stage seed_queries"),
            (lambda concepts: concepts[12].__setitem__("patterns", [None]), "scores patterns"),
            (lambda concepts: concepts[1].__setitem__("definition", ["a", "b"]), "disease_status definition"),
        ],
    )
    def test_malformed_blocks_name_the_concept(self, tmp_path, mutate, message):
        document = _shipped_document()
        mutate(document["concepts"])
        with pytest.raises(ValidationError, match=message):
            load_registry(_write_document(tmp_path / "registry.json", document))


class TestQueryParsing:
    def test_dedupe_is_case_insensitive_and_order_preserving(self):
        queries, dropped = dedupe_queries(["Stage IV", "stage  iv", "TNM stage", "", "tnm STAGE", "grade"])
        assert queries == ["Stage IV", "TNM stage", "grade"]
        assert dropped == 2

    def test_dedupe_idempotent(self):
        once, _ = dedupe_queries(["a b", "A  B", "c"])
        twice, dropped = dedupe_queries(once)
        assert twice == once
        assert dropped == 0

    def test_parse_strips_bullets_and_quotes(self):
        response = '1. first query\n- second query\n* "third query"\n\n```\n(4) fourth query\nb) fifth query'
        assert parse_query_lines(response) == [
            "first query",
            "second query",
            "third query",
            "fourth query",
            "fifth query",
        ]


class TestExpandQueries:
    def test_thirty_distinct_lines(self, registry):
        lines = [f"tumor stage phrasing {i}" for i in range(30)]
        llm = MockLlmClient({"expand:tumor_staging": "\n".join(lines)})
        query_set = expand_queries(registry[ConceptId.TUMOR_STAGING], llm, count=30)
        assert query_set.concept_id is ConceptId.TUMOR_STAGING
        assert list(query_set.queries) == lines
        assert llm.calls("expand") == 1
        prompt = llm.call_history[0]["prompt"]
        assert registry[ConceptId.TUMOR_STAGING].definition in prompt
        assert "Write 30 distinct" in prompt

    def test_single_query(self, registry):
        llm = MockLlmClient({"expand:scores": "cancer stage"})
        query_set = expand_queries(registry[ConceptId.SCORES], llm, count=1)
        assert query_set.queries == ("cancer stage",)

    def test_retries_accumulate_unique_queries(self, registry):
        llm = MockLlmClient(
            {
                "expand:biomarkers_assessed:0": "HER2 status\nER status",
                "expand:biomarkers_assessed:1": "er STATUS\nPD-L1 expression\nKRAS mutation",
            }
        )
        query_set = expand_queries(registry[ConceptId.BIOMARKERS_ASSESSED], llm, count=4)
        assert query_set.queries == ("HER2 status", "ER status", "PD-L1 expression", "KRAS mutation")
        assert llm.calls() == 2
        retry_prompt = llm.call_history[1]["prompt"]
        assert "- HER2 status" in retry_prompt
        assert "Write 2 new ones" in retry_prompt

    def test_too_few_unique_after_retries(self, registry):
        llm = MockLlmClient({"expand:scores": "ECOG 1\necog 1\nKPS 80"})
        with pytest.raises(ValidationError, match="only 2 unique"):
            expand_queries(registry[ConceptId.SCORES], llm, count=5)
        assert llm.calls() == 4

    def test_llm_failure_propagates(self, registry):
        with pytest.raises(RemoteServiceError):
            expand_queries(registry[ConceptId.SCORES], MockLlmClient(), count=3)

    def test_count_must_be_positive(self, registry):
        with pytest.raises(ValidationError):
            expand_queries(registry[ConceptId.SCORES], MockLlmClient(), count=0)


class TestStaticQuerySets:
    def test_shipped_file(self, query_sets):
        assert list(query_sets) == list(CONCEPT_IDS)
        for concept_id, query_set in query_sets.items():
            assert query_set.concept_id is concept_id
            assert len(query_set.queries) == 30
            assert len({q.casefold() for q in query_set.queries}) == 30

    def test_missing_concept(self, registry, tmp_path):
        records = [{"concept_id": c.value, "queries": ["q"]} for c in CONCEPT_IDS if c is not ConceptId.DIAGNOSIS_DATE]
        path = write_lines(tmp_path / "queries.jsonl", records)
        with pytest.raises(ValidationError, match="diagnosis_date"):
            static_query_sets(registry, path)

    def test_empty_query_list(self, registry, tmp_path):
        records = [{"concept_id": c.value, "queries": ["q"]} for c in CONCEPT_IDS]
        records[2]["queries"] = ["  "]
        path = write_lines(tmp_path / "queries.jsonl", records)
        with pytest.raises(ValidationError, match="empty query list for tumor_characteristics"):
            static_query_sets(registry, path)

    def test_duplicates_dropped_with_warning(self, registry, tmp_path, caplog):
        records = [{"concept_id": c.value, "queries": ["q one", "q two"]} for c in CONCEPT_IDS]
        records[0]["queries"] = ["q one", "Q ONE", "q two"]
        path = write_lines(tmp_path / "queries.jsonl", records)
        with caplog.at_level(logging.WARNING, logger="src.concepts"):
            query_sets = static_query_sets(registry, path)
        assert query_sets[ConceptId.CURRENT_DIAGNOSIS].queries == ("q one", "q two")
        assert "dropped 1 duplicate queries for current_diagnosis" in caplog.text

    def test_save_round_trip(self, registry, query_sets, tmp_path):
        assert save_query_sets(query_sets, tmp_path / "q.jsonl") == 13
        assert static_query_sets(registry, tmp_path / "q.jsonl") == query_sets
        assert QUERIES_PATH.exists()
