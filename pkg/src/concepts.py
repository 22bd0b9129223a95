"""The oncology concept registry and per-concept query sets."""
import json
import logging
import re
from enum import Enum
from functools import lru_cache
from pathlib import Path
from typing import Dict, Iterable, List, NamedTuple, Optional, Tuple

from src.errors import DataIOError, ValidationError
from src.llm import load_prompt
from src.utils import PathLike, atomic_output, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

DEFAULT_QUERY_COUNT = 30
MAX_EXPANSION_RETRIES = 3

_BULLET = re.compile(r"^\s*(?:[-*•]+|\(?\d+[.)]|[a-zA-Z][.)])\s+")


class ConceptId(str, Enum):
    CURRENT_DIAGNOSIS = "current_diagnosis"
    DISEASE_STATUS = "disease_status"
    TUMOR_CHARACTERISTICS = "tumor_characteristics"
    TUMOR_STAGING = "tumor_staging"
    COMBINED_STAGE = "combined_stage"
    TREATMENT_OUTCOMES = "treatment_outcomes"
    TREATMENT_TYPES = "treatment_types"
    BIOMARKERS_ASSESSED = "biomarkers_assessed"
    SURGICAL_INTERVENTIONS = "surgical_interventions"
    DIAGNOSTIC_ASSESSMENTS = "diagnostic_assessments"
    DIAGNOSIS_DATE = "diagnosis_date"
    FAMILY_HISTORY = "family_history"
    SCORES = "scores"

    @classmethod
    def parse(cls, value: str, where: str = "") -> "ConceptId":
        try:
            return cls(value)
        except ValueError:
            prefix = f"{where}: " if where else ""
            raise ValidationError(f"{prefix}unknown concept id {value!r}") from None


CONCEPT_IDS: Tuple[ConceptId, ...] = tuple(ConceptId)


class ConceptDef(NamedTuple):
    id: ConceptId
    display_name: str
    definition: str
    patterns: Tuple[str, ...]
    seed_queries: Tuple[str, ...]

    def compiled_patterns(self) -> List["re.Pattern"]:
        return [compile_pattern(p) for p in self.patterns]

    def pattern_spans(self, text: str) -> List[Tuple[int, int]]:
        spans = set()
        for pattern in self.compiled_patterns():
            for match in pattern.finditer(text):
                if match.end() > match.start():
                    spans.add((match.start(), match.end()))
        return sorted(spans)


class QuerySet(NamedTuple):
    concept_id: ConceptId
    queries: Tuple[str, ...]


Registry = Dict[ConceptId, ConceptDef]


@lru_cache(maxsize=None)
def compile_pattern(pattern: str) -> "re.Pattern":
    return re.compile(pattern, re.IGNORECASE)


def _check_complete(found: Iterable[ConceptId], what: str):
    missing = [c.value for c in CONCEPT_IDS if c not in set(found)]
    if missing:
        raise ValidationError(f"{what} is missing concepts: {', '.join(missing)}")


def _string_list(block: dict, field: str, path: Path, concept_id: ConceptId) -> Tuple[str, ...]:
    values = block.get(field, [])
    if not isinstance(values, list) or not all(isinstance(v, str) for v in values):
        raise ValidationError(f"{path}: concept {concept_id.value} {field} must be a list of strings")
    return tuple(values)


def load_registry(path: PathLike) -> Registry:
    path = Path(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            document = json.load(f)
    except OSError as e:
        raise DataIOError(f"Cannot read concept registry {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ValidationError(f"Concept registry {path} is not valid JSON: {e}") from e

    if not isinstance(document, dict) or not isinstance(document.get("concepts"), list):
        raise ValidationError(f"Concept registry {path} must hold a 'concepts' list")

    registry: Registry = {}
    for n, block in enumerate(document["concepts"]):
        if not isinstance(block, dict):
            raise ValidationError(f"{path}: concept entry {n} is not an object")
        concept_id = ConceptId.parse(block.get("id"), where=str(path))
        if concept_id in registry:
            raise ValidationError(f"{path}: concept {concept_id.value} defined twice")

        definition = block.get("definition") or ""
        if not isinstance(definition, str):
            raise ValidationError(f"{path}: concept {concept_id.value} definition must be a string")
        definition = definition.strip()
        if not definition:
            raise ValidationError(f"{path}: concept {concept_id.value} has an empty definition")

        patterns = _string_list(block, "patterns", path, concept_id)
        for pattern in patterns:
            try:
                compile_pattern(pattern)
            except re.error as e:
                raise ValidationError(
                    f"{path}: concept {concept_id.value} has an invalid pattern {pattern!r}: {e}"
                ) from e

        seed_queries = tuple(q for q in _string_list(block, "seed_queries", path, concept_id) if q.strip())
        if not seed_queries:
            raise ValidationError(f"{path}: concept {concept_id.value} has no seed queries")

        registry[concept_id] = ConceptDef(
            id=concept_id,
            display_name=block.get("display_name") or concept_id.value,
            definition=definition,
            patterns=patterns,
            seed_queries=seed_queries,
        )

    _check_complete(registry, f"Concept registry {path}")
    logger.debug(f"Loaded {len(registry)} concepts from {path}")
    return {c: registry[c] for c in CONCEPT_IDS}


def save_registry(registry: Registry, path: PathLike, version: int = 1):
    document = {
        "version": version,
        "concepts": [
            {
                "id": concept.id.value,
                "display_name": concept.display_name,
                "definition": concept.definition,
                "patterns": list(concept.patterns),
                "seed_queries": list(concept.seed_queries),
            }
            for concept in (registry[c] for c in CONCEPT_IDS)
        ],
    }
    with atomic_output(path) as f:
        json.dump(document, f, indent=2, ensure_ascii=False)
        f.write("\n")


def dedupe_queries(queries: Iterable[str]) -> Tuple[List[str], int]:
    """Case-insensitive, whitespace-normalised, order-preserving dedup. Returns (queries, dropped)."""
    seen = set()
    unique = []
    dropped = 0
    for query in queries:
        query = " ".join(query.split())
        if not query:
            continue
        key = query.casefold()
        if key in seen:
            dropped += 1
            continue
        seen.add(key)
        unique.append(query)
    return unique, dropped


def parse_query_lines(response: str) -> List[str]:
    queries = []
    for line in response.splitlines():
        line = _BULLET.sub("", line).strip().strip("\"'`").strip()
        if line and not line.startswith("```"):
            queries.append(line)
    return queries


def render_expansion_prompt(
    template: str, concept: ConceptDef, count: int, already: List[str]
) -> str:
    prompt = template.format(
        display_name=concept.display_name,
        definition=concept.definition,
        count=count,
        seed_queries="\n".join(f"- {q}" for q in concept.seed_queries),
    )
    if already:
        prompt += (
            f"\n\nYou already produced the phrasings below. Write {count - len(already)} "
            "new ones that are different from all of them:\n"
            + "\n".join(f"- {q}" for q in already)
        )
    return prompt


def expand_queries(
    concept: ConceptDef,
    llm,
    count: int = DEFAULT_QUERY_COUNT,
    template: Optional[str] = None,
    max_retries: int = MAX_EXPANSION_RETRIES,
) -> QuerySet:
    if count < 1:
        raise ValidationError(f"count must be >= 1, got {count}")
    if template is None:
        template = load_prompt("expand_queries")

    queries: List[str] = []
    for attempt in range(max_retries + 1):
        prompt = render_expansion_prompt(template, concept, count, queries)
        response = llm.complete(prompt, key=f"expand:{concept.id.value}:{attempt}")
        queries, _ = dedupe_queries(queries + parse_query_lines(response))
        logger.debug(
            f"[{concept.id.value}] attempt {attempt + 1}: {len(queries)}/{count} unique queries"
        )
        if len(queries) >= count:
            return QuerySet(concept.id, tuple(queries[:count]))

    raise ValidationError(
        f"Query expansion for {concept.id.value} produced only {len(queries)} unique "
        f"queries (wanted {count}) after {max_retries} retries"
    )


def static_query_sets(registry: Registry, path: PathLike) -> Dict[ConceptId, QuerySet]:
    query_sets: Dict[ConceptId, QuerySet] = {}
    for line_no, record in read_jsonl(path):
        where = f"{path}:{line_no}"
        concept_id = ConceptId.parse(record.get("concept_id"), where=where)
        if concept_id not in registry:
            raise ValidationError(f"{where}: concept {concept_id.value} not in registry")
        if concept_id in query_sets:
            raise ValidationError(f"{where}: query set for {concept_id.value} given twice")
        queries, dropped = dedupe_queries(record.get("queries") or [])
        if not queries:
            raise ValidationError(f"{where}: empty query list for {concept_id.value}")
        if dropped:
            logger.warning(f"{where}: dropped {dropped} duplicate queries for {concept_id.value}")
        query_sets[concept_id] = QuerySet(concept_id, tuple(queries))

    _check_complete(query_sets, f"Query-set file {path}")
    return {c: query_sets[c] for c in CONCEPT_IDS}


def save_query_sets(query_sets: Dict[ConceptId, QuerySet], path: PathLike) -> int:
    return write_jsonl(
        path,
        (
            {"concept_id": c.value, "queries": list(query_sets[c].queries)}
            for c in CONCEPT_IDS
            if c in query_sets
        ),
    )
