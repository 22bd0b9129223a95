"""Published reference numbers used as marked rows in comparison reports."""
from collections import OrderedDict
from typing import Dict, List, NamedTuple, Tuple

from src.concepts import CONCEPT_IDS, ConceptId

REFERENCE_TAG = "reference [paper]"


class ReferenceSystem(NamedTuple):
    name: str
    per_concept: Dict[ConceptId, Tuple[float, float]]
    overall: Tuple[float, float]


class ReferenceLatency(NamedTuple):
    name: str
    seconds_per_patient: float
    f1: float


class ReferenceSweepPoint(NamedTuple):
    system: str
    k: int
    precision: float
    recall: float


def _system(name: str, rows: List[Tuple[float, float]], overall: Tuple[float, float]) -> ReferenceSystem:
    assert len(rows) == len(CONCEPT_IDS)
    return ReferenceSystem(name, OrderedDict(zip(CONCEPT_IDS, rows)), overall)


# (precision, recall) per concept, in concept order
ONCO_SMALL = _system(
    "Onco-Ret (S)",
    [(0.85, 0.86), (0.65, 0.76), (0.37, 0.77), (0.74, 0.84), (0.52, 0.67), (0.61, 0.69), (0.70, 0.73),
     (0.42, 0.63), (0.64, 0.69), (0.70, 0.76), (0.59, 0.72), (0.62, 0.66), (0.64, 0.66)],
    (0.62, 0.73),
)
ONCO_OPTIMIZED = _system(
    "Onco-Ret (O)",
    [(0.81, 0.78), (0.68, 0.71), (0.42, 0.72), (0.69, 0.81), (0.69, 0.62), (0.75, 0.69), (0.84, 0.77),
     (0.57, 0.58), (0.78, 0.66), (0.64, 0.74), (0.59, 0.76), (0.70, 0.53), (0.77, 0.57)],
    (0.69, 0.69),
)
PUBMEDBERT = _system(
    "PubmedBert",
    [(0.41, 0.50), (0.41, 0.50), (0.42, 0.56), (0.47, 0.54), (0.39, 0.43), (0.46, 0.48), (0.51, 0.57),
     (0.35, 0.45), (0.36, 0.64), (0.49, 0.49), (0.38, 0.36), (0.44, 0.51), (0.45, 0.56)],
    (0.43, 0.51),
)
ONCO_LARGE = _system(
    "Onco-Ret (L)",
    [(0.62, 0.75), (0.61, 0.75), (0.63, 0.83), (0.71, 0.96), (0.58, 0.64), (0.68, 0.72), (0.77, 0.85),
     (0.53, 0.67), (0.54, 0.95), (0.73, 0.73), (0.57, 0.54), (0.66, 0.77), (0.67, 0.84)],
    (0.64, 0.77),
)
ADA = _system(
    "Open AI Ada",
    [(0.59, 0.46), (0.40, 0.49), (0.40, 0.56), (0.29, 0.71), (0.28, 0.80), (0.22, 0.52), (0.38, 0.39),
     (0.24, 0.55), (0.35, 0.48), (0.29, 0.31), (0.42, 0.52), (0.08, 0.65), (0.13, 0.52)],
    (0.31, 0.54),
)
MISTRAL = _system(
    "Mistral SFR",
    [(0.51, 0.39), (0.26, 0.32), (0.30, 0.41), (0.24, 0.59), (0.13, 0.47), (0.22, 0.52), (0.25, 0.26),
     (0.12, 0.27), (0.34, 0.46), (0.15, 0.17), (0.31, 0.38), (0.05, 0.38), (0.05, 0.21)],
    (0.23, 0.37),
)

REFERENCE_SYSTEMS: Tuple[ReferenceSystem, ...] = (
    ONCO_SMALL,
    ONCO_OPTIMIZED,
    PUBMEDBERT,
    ONCO_LARGE,
    ADA,
    MISTRAL,
)

REFERENCE_LATENCIES: Tuple[ReferenceLatency, ...] = (
    ReferenceLatency("Onco-Ret (O)", 318.0, 0.69),
    ReferenceLatency("Onco-Ret (S)", 1200.0, 0.67),
    ReferenceLatency("Onco-Ret (L)", 1140.0, 0.71),
    ReferenceLatency("Open AI Ada", 2289.75, 0.52),
    ReferenceLatency("Mistral SFR", 5160.0, 0.28),
)

# end points of the published k-sweep trend
REFERENCE_SWEEP: Tuple[ReferenceSweepPoint, ...] = (
    ReferenceSweepPoint("Open AI Ada", 25, 0.39, 0.12),
    ReferenceSweepPoint("Open AI Ada", 400, 0.25, 0.75),
    ReferenceSweepPoint("Mistral SFR", 25, 0.46, 0.07),
    ReferenceSweepPoint("Mistral SFR", 400, 0.20, 0.61),
)


def macro_average(system: ReferenceSystem) -> Tuple[float, float]:
    values = list(system.per_concept.values())
    return (
        sum(p for p, _ in values) / len(values),
        sum(r for _, r in values) / len(values),
    )


def reference_system(name: str) -> ReferenceSystem:
    for system in REFERENCE_SYSTEMS:
        if system.name == name:
            return system
    raise KeyError(f"No reference system named {name!r}")
