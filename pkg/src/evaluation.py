"""Gold candidates, confusion-based metrics, k-sweeps, latency benchmarks and report rendering."""
import csv
import io
import logging
import threading
import time
from collections import OrderedDict, defaultdict
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from src.baselines import REFERENCE_LATENCIES, REFERENCE_SWEEP, REFERENCE_SYSTEMS, REFERENCE_TAG, ReferenceSystem
from src.concepts import CONCEPT_IDS, ConceptId, QuerySet
from src.corpus import Chunk
from src.errors import UsageError, ValidationError
from src.retrieval import RankedList, build_index, concept_distances
from src.scoring import ConceptScorer, Prediction
from src.utils import PathLike, atomic_output, read_jsonl, write_jsonl

logger = logging.getLogger(__name__)

GOLD_PER_SELECTION = 2
_BENCH_LOCK = threading.Lock()


class Regime(str, Enum):
    TOP_K = "top-k"
    CLASSIFY_ALL = "classify-all"


class Selection(str, Enum):
    SIMILAR = "similar"
    RANDOM = "random"


class GoldAnnotation(NamedTuple):
    chunk_id: str
    concept_id: ConceptId
    relevant: bool
    annotator: Optional[str] = None


class GoldCandidate(NamedTuple):
    patient_id: str
    concept_id: ConceptId
    chunk_id: str
    selection: Selection


class ConfusionCounts(NamedTuple):
    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0
    unjudged: int = 0

    @property
    def judged(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @property
    def precision(self) -> Optional[float]:
        return self.tp / (self.tp + self.fp) if self.tp + self.fp else None

    @property
    def recall(self) -> Optional[float]:
        return self.tp / (self.tp + self.fn) if self.tp + self.fn else None

    @property
    def f1(self) -> Optional[float]:
        return f1_score(self.precision, self.recall)

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(*(a + b for a, b in zip(self, other)))


class ConceptMetrics(NamedTuple):
    concept_id: ConceptId
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    counts: Optional[ConfusionCounts] = None


class MetricsReport(NamedTuple):
    system: str
    per_concept: Tuple[ConceptMetrics, ...]
    precision: Optional[float]
    recall: Optional[float]
    f1: Optional[float]
    harmonic_f1: Optional[float]
    regime: Optional[Regime]
    k: Optional[int] = None
    reference: bool = False


class LatencyReport(NamedTuple):
    scorer: str
    mean: float
    p50: float
    p95: float
    patients: int
    f1: Optional[float] = None
    samples: Tuple[Tuple[str, float], ...] = ()
    reference: bool = False


class SweepPoint(NamedTuple):
    concept_id: Optional[ConceptId]  # None for the macro-averaged row
    k: int
    precision: Optional[float]
    recall: Optional[float]


def f1_score(precision: Optional[float], recall: Optional[float]) -> Optional[float]:
    if precision is None or recall is None:
        return None
    if precision + recall == 0:
        return None
    return 2 * precision * recall / (precision + recall)


def _mean(values: Iterable[Optional[float]]) -> Optional[float]:
    defined = [v for v in values if v is not None]
    return sum(defined) / len(defined) if defined else None


# gold

def save_gold(gold: Iterable[GoldAnnotation], path: PathLike) -> int:
    return write_jsonl(
        path,
        (
            {"chunk_id": g.chunk_id, "concept_id": g.concept_id.value, "relevant": g.relevant, "annotator": g.annotator}
            for g in gold
        ),
    )


def load_gold(path: PathLike) -> List[GoldAnnotation]:
    gold = []
    seen = set()
    for line_no, record in read_jsonl(path):
        where = f"{path}:{line_no}"
        if not isinstance(record.get("chunk_id"), str) or not isinstance(record.get("relevant"), bool):
            raise ValidationError(f"{where}: malformed gold record")
        concept_id = ConceptId.parse(record.get("concept_id"), where=where)
        key = (record["chunk_id"], concept_id)
        if key in seen:
            raise ValidationError(f"{where}: ({record['chunk_id']}, {concept_id.value}) judged twice")
        seen.add(key)
        gold.append(GoldAnnotation(record["chunk_id"], concept_id, record["relevant"], record.get("annotator")))
    return gold


def gold_from_candidates(candidates: Iterable[GoldCandidate], annotator: Optional[str] = None) -> List[dict]:
    """Blank annotation sheet for the candidate pairs, `relevant` left to the annotator."""
    return [
        {
            "patient_id": c.patient_id,
            "chunk_id": c.chunk_id,
            "concept_id": c.concept_id.value,
            "selection": c.selection.value,
            "relevant": None,
            "annotator": annotator,
        }
        for c in candidates
    ]


def build_gold_candidates(
    test_chunks: Sequence[Chunk],
    query_sets: Dict[ConceptId, QuerySet],
    embedder,
    rng_seed: int,
    index=None,
) -> List[GoldCandidate]:
    """Per patient and concept: the 2 closest chunks plus 2 distinct random others."""
    index = index if index is not None else build_index(test_chunks, embedder)
    distances = {c: concept_distances(index, query_sets[c], embedder) for c in CONCEPT_IDS}

    rows_by_patient: "OrderedDict[str, List[int]]" = OrderedDict()
    for row, patient_id in enumerate(index.patient_ids):
        rows_by_patient.setdefault(patient_id, []).append(row)

    patients = sorted(rows_by_patient)
    seeds = np.random.SeedSequence(rng_seed).spawn(len(patients))
    needed = 2 * GOLD_PER_SELECTION
    candidates = []
    for patient_id, seed in zip(patients, seeds):
        rows = rows_by_patient[patient_id]
        if len(rows) < needed:
            logger.warning(f"Patient {patient_id} has {len(rows)} chunks (< {needed}); skipped")
            continue
        rng = np.random.default_rng(seed)
        for concept_id in CONCEPT_IDS:
            d = distances[concept_id]
            ranked = sorted(rows, key=lambda r: (d[r], index.chunk_ids[r]))
            similar = ranked[:GOLD_PER_SELECTION]
            others = sorted(ranked[GOLD_PER_SELECTION:], key=lambda r: index.chunk_ids[r])
            picked = rng.choice(len(others), size=GOLD_PER_SELECTION, replace=False)
            for r in similar:
                candidates.append(GoldCandidate(patient_id, concept_id, index.chunk_ids[r], Selection.SIMILAR))
            for i in sorted(picked):
                candidates.append(
                    GoldCandidate(patient_id, concept_id, index.chunk_ids[others[i]], Selection.RANDOM)
                )

    logger.info(f"Selected {len(candidates)} gold candidates over {len(patients)} patients")
    return candidates


# metrics

def predictions_from_ranked(ranked: Iterable[RankedList]) -> List[Prediction]:
    """Top-k regime: every ranked entry is a positive prediction."""
    return [
        Prediction(chunk_id, r.concept_id, True, None)
        for r in ranked
        for chunk_id, _ in r.entries
    ]


def compute_confusion(
    predictions: Iterable[Prediction], gold: Iterable[GoldAnnotation], concept_id: ConceptId
) -> ConfusionCounts:
    predicted = {}
    for p in predictions:
        if p.concept_id == concept_id:
            predicted[p.chunk_id] = predicted.get(p.chunk_id, False) or p.predicted

    tp = fp = fn = tn = 0
    judged = set()
    for g in gold:
        if g.concept_id != concept_id:
            continue
        judged.add(g.chunk_id)
        hit = predicted.get(g.chunk_id, False)
        if hit and g.relevant:
            tp += 1
        elif hit:
            fp += 1
        elif g.relevant:
            fn += 1
        else:
            tn += 1
    unjudged = sum(1 for chunk_id in predicted if chunk_id not in judged)
    return ConfusionCounts(tp, fp, fn, tn, unjudged)


def compute_report(
    predictions: Sequence[Prediction],
    gold: Sequence[GoldAnnotation],
    regime: Regime,
    k: Optional[int] = None,
    system: str = "system",
) -> MetricsReport:
    if not gold:
        raise ValidationError("Cannot compute a report against an empty gold set")

    predictions = list(predictions)
    per_concept = []
    for concept_id in CONCEPT_IDS:
        counts = compute_confusion(predictions, gold, concept_id)
        per_concept.append(
            ConceptMetrics(concept_id, counts.precision, counts.recall, counts.f1, counts)
        )
        if counts.unjudged:
            logger.debug(f"[{concept_id.value}] {counts.unjudged} predictions without a gold judgement")

    if not any(m.counts.judged for m in per_concept):
        raise ValidationError("Gold set holds no judged (chunk, concept) pair")

    precision = _mean(m.precision for m in per_concept)
    recall = _mean(m.recall for m in per_concept)
    return MetricsReport(
        system=system,
        per_concept=tuple(per_concept),
        precision=precision,
        recall=recall,
        f1=_mean(m.f1 for m in per_concept),
        harmonic_f1=f1_score(precision, recall),
        regime=Regime(regime),
        k=k,
    )


def per_patient_confusion(
    predictions: Sequence[Prediction], gold: Sequence[GoldAnnotation], chunks: Sequence[Chunk]
) -> "OrderedDict[str, ConfusionCounts]":
    """Counts pooled over all concepts, one entry per patient with judged chunks."""
    patient_of = {c.chunk_id: c.patient_id for c in chunks}
    gold_by_patient = defaultdict(list)
    for g in gold:
        if g.chunk_id not in patient_of:
            raise ValidationError(f"Gold judges unknown chunk {g.chunk_id!r}")
        gold_by_patient[patient_of[g.chunk_id]].append(g)
    predictions_by_patient = defaultdict(list)
    for p in predictions:
        predictions_by_patient[patient_of.get(p.chunk_id)].append(p)

    out = OrderedDict()
    for patient_id in sorted(gold_by_patient):
        total = ConfusionCounts()
        for concept_id in CONCEPT_IDS:
            total = total + compute_confusion(
                predictions_by_patient[patient_id], gold_by_patient[patient_id], concept_id
            )
        out[patient_id] = total
    return out


def reference_report(system: ReferenceSystem) -> MetricsReport:
    per_concept = tuple(
        ConceptMetrics(c, p, r, f1_score(p, r)) for c, (p, r) in system.per_concept.items()
    )
    precision, recall = system.overall
    return MetricsReport(
        system=system.name,
        per_concept=per_concept,
        precision=precision,
        recall=recall,
        f1=_mean(m.f1 for m in per_concept),
        harmonic_f1=f1_score(precision, recall),
        regime=None,
        reference=True,
    )


def k_sweep_eval(
    ranked: Dict[ConceptId, RankedList], gold: Sequence[GoldAnnotation], ks: Sequence[int]
) -> List[SweepPoint]:
    """Precision and recall of every prefix cutoff. Precision counts judged entries only."""
    ks = list(ks)
    if not ks or any(k < 1 for k in ks) or any(a >= b for a, b in zip(ks, ks[1:])):
        raise ValidationError(f"ks must be positive and strictly ascending, got {ks}")

    judgements: Dict[ConceptId, Dict[str, bool]] = defaultdict(dict)
    for g in gold:
        judgements[g.concept_id][g.chunk_id] = g.relevant

    points = []
    for k in ks:
        per_k = []
        for concept_id in CONCEPT_IDS:
            if concept_id not in ranked:
                continue
            judged = judgements[concept_id]
            relevant = sum(judged.values())
            prefix = [chunk_id for chunk_id, _ in ranked[concept_id].entries[:k] if chunk_id in judged]
            tp = sum(judged[chunk_id] for chunk_id in prefix)
            point = SweepPoint(
                concept_id,
                k,
                tp / len(prefix) if prefix else None,
                tp / relevant if relevant else None,
            )
            per_k.append(point)
        points.extend(per_k)
        points.append(
            SweepPoint(None, k, _mean(p.precision for p in per_k), _mean(p.recall for p in per_k))
        )
    return points


# latency

def bench_latency(
    scorer: ConceptScorer,
    patients: Sequence[str],
    chunks: Sequence[Chunk],
    clock: Callable[[], float] = time.perf_counter,
    f1: Optional[float] = None,
) -> LatencyReport:
    if not patients:
        raise ValidationError("Latency benchmark needs at least one patient")
    if not _BENCH_LOCK.acquire(blocking=False):
        raise UsageError("Another latency benchmark is already running in this process")

    try:
        by_patient = defaultdict(list)
        for chunk in chunks:
            by_patient[chunk.patient_id].append(chunk)

        samples = []
        for patient_id in patients:
            if not by_patient[patient_id]:
                raise ValidationError(f"Patient {patient_id} has no chunks to benchmark")
            start = clock()
            for chunk in by_patient[patient_id]:
                scorer.classify(chunk.text)
            samples.append((patient_id, max(0.0, clock() - start)))
            logger.debug(f"{patient_id}: {samples[-1][1]:.3f}s over {len(by_patient[patient_id])} chunks")
    finally:
        _BENCH_LOCK.release()

    seconds = np.array([s for _, s in samples], dtype=np.float64)
    p50, p95 = np.percentile(seconds, [50, 95])
    report = LatencyReport(
        scorer=scorer.name,
        mean=float(seconds.mean()),
        p50=float(p50),
        p95=float(p95),
        patients=len(samples),
        f1=f1,
        samples=tuple(samples),
    )
    logger.info(
        f"{scorer.name}: {report.mean:.3f}s per patient (p50 {report.p50:.3f}, p95 {report.p95:.3f})"
    )
    return report


def reference_latencies() -> List[LatencyReport]:
    return [
        LatencyReport(r.name, r.seconds_per_patient, r.seconds_per_patient, r.seconds_per_patient, 0, r.f1, reference=True)
        for r in REFERENCE_LATENCIES
    ]


def write_latency_csv(report: LatencyReport, path: PathLike):
    with atomic_output(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["scorer", "patient_id", "seconds"])
        for patient_id, seconds in report.samples:
            writer.writerow([report.scorer, patient_id, f"{seconds:.6f}"])


# rendering

def _fmt(value: Optional[float]) -> str:
    return "n/a" if value is None else f"{value:.4f}"


def _label(name: str, reference: bool) -> str:
    return f"{name} {REFERENCE_TAG}" if reference else name


def _align(rows: List[List[str]]) -> str:
    widths = [max(len(row[i]) for row in rows) for i in range(len(rows[0]))]
    lines = []
    for n, row in enumerate(rows):
        lines.append("  ".join(cell.ljust(w) if i == 0 else cell.rjust(w) for i, (cell, w) in enumerate(zip(row, widths))).rstrip())
        if n == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def render_comparison(
    reports: Sequence[MetricsReport],
    latency_reports: Sequence[LatencyReport],
    output_path: PathLike,
    include_baselines: bool = False,
) -> Tuple[Path, Path]:
    """Writes `<output>.csv` and an aligned `<output>.txt`; returns both paths."""
    if not reports:
        raise ValidationError("render_comparison needs at least one report")
    reports = list(reports)
    latency_reports = list(latency_reports)
    if include_baselines:
        reports += [reference_report(s) for s in REFERENCE_SYSTEMS]
        latency_reports += reference_latencies()

    csv_path = Path(output_path).with_suffix(".csv")
    txt_path = Path(output_path).with_suffix(".txt")

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(["system", "concept", "precision", "recall", "f1"])
    for report in reports:
        name = _label(report.system, report.reference)
        for m in report.per_concept:
            writer.writerow([name, m.concept_id.value, _fmt(m.precision), _fmt(m.recall), _fmt(m.f1)])
        writer.writerow([name, "overall", _fmt(report.precision), _fmt(report.recall), _fmt(report.f1)])

    header = ["concept"]
    for report in reports:
        name = _label(report.system, report.reference)
        header += [f"{name} p", f"{name} r", f"{name} f1"]
    rows = [header]
    for i, concept_id in enumerate(CONCEPT_IDS):
        row = [concept_id.value]
        for report in reports:
            m = report.per_concept[i]
            row += [_fmt(m.precision), _fmt(m.recall), _fmt(m.f1)]
        rows.append(row)
    overall = ["overall"]
    for report in reports:
        overall += [_fmt(report.precision), _fmt(report.recall), _fmt(report.f1)]
    rows.append(overall)

    meta = []
    for report in reports:
        if report.reference:
            continue
        regime = report.regime.value if report.regime is not None else "n/a"
        k = report.k if report.k is not None else "n/a"
        meta.append(f"{report.system}: regime={regime} k={k} harmonic_f1={_fmt(report.harmonic_f1)}")

    text = _align(rows) + "\n"
    if meta:
        text += "\n" + "\n".join(meta) + "\n"
    if latency_reports:
        latency_rows = [["system", "mean s/patient", "p50", "p95", "patients", "f1"]]
        for r in latency_reports:
            latency_rows.append(
                [_label(r.scorer, r.reference), f"{r.mean:.3f}", f"{r.p50:.3f}", f"{r.p95:.3f}", str(r.patients), _fmt(r.f1)]
            )
        text += "\nLatency\n" + _align(latency_rows) + "\n"

    with atomic_output(csv_path) as f:
        f.write(buffer.getvalue())
    with atomic_output(txt_path) as f:
        f.write(text)
    logger.info(f"Wrote comparison to {csv_path} and {txt_path}")
    return csv_path, txt_path


def render_sweep(points: Sequence[SweepPoint], output_path: PathLike, include_reference: bool = True) -> Tuple[Path, Path]:
    csv_path = Path(output_path).with_suffix(".csv")
    txt_path = Path(output_path).with_suffix(".txt")

    rows = [["system", "concept", "k", "precision", "recall"]]
    for p in points:
        concept = p.concept_id.value if p.concept_id is not None else "overall"
        rows.append(["pipeline", concept, str(p.k), _fmt(p.precision), _fmt(p.recall)])
    if include_reference:
        for r in REFERENCE_SWEEP:
            rows.append([_label(r.system, True), "overall", str(r.k), _fmt(r.precision), _fmt(r.recall)])

    with atomic_output(csv_path) as f:
        csv.writer(f, lineterminator="\n").writerows(rows)
    with atomic_output(txt_path) as f:
        f.write(_align(rows) + "\n")
    return csv_path, txt_path


def write_patient_breakdown(breakdown: "OrderedDict[str, ConfusionCounts]", path: PathLike):
    with atomic_output(path) as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["patient_id", "tp", "fp", "fn", "tn", "precision", "recall", "f1"])
        for patient_id, counts in breakdown.items():
            writer.writerow(
                [patient_id, counts.tp, counts.fp, counts.fn, counts.tn]
                + [_fmt(counts.precision), _fmt(counts.recall), _fmt(counts.f1)]
            )
