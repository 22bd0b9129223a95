import json
import logging
import os
from contextlib import closing
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from torch.utils.tensorboard import SummaryWriter
from tqdm import tqdm

from src.args import PipelineConfig, config_to_dict
from src.concepts import CONCEPT_IDS, ConceptId, QuerySet, expand_queries, load_registry, save_query_sets, static_query_sets
from src.corpus import chunk_corpus, ingest_notes, load_chunks, save_chunks, save_notes
from src.embedding import make_embedder
from src.evaluation import (
    Regime,
    bench_latency,
    build_gold_candidates,
    compute_report,
    gold_from_candidates,
    k_sweep_eval,
    load_gold,
    per_patient_confusion,
    predictions_from_ranked,
    render_comparison,
    render_sweep,
    save_gold,
    write_latency_csv,
    write_patient_breakdown,
)
from src.labeling import TrainingMode, emit_training_set, load_labels, run_labeling, save_labels
from src.llm import load_prompt, make_llm
from src.retrieval import assign_chunks_to_concept, build_or_load_index, harvest_candidates, load_candidates, save_candidates
from src.scoring import classify_corpus, load_predictions, make_scorer, rank_by_score
from src.synth import generate_corpus, load_template_bank, oracle_llm_script, save_truth, truth_to_gold
from src.utils import require_file, write_jsonl

logger = logging.getLogger(__name__)

QUERIES = "<queries>"

# stage -> (input path keys, output path keys); the first output is the one --output replaces
STAGE_IO: Dict[str, Tuple[Tuple[str, ...], Tuple[str, ...]]] = {
    "ingest": (("raw_notes",), ("notes",)),
    "chunk": (("notes",), ("chunks",)),
    "expand": (("registry",), ("expanded_queries",)),
    "index": (("chunks",), ("index_cache",)),
    "harvest": (("chunks", "registry", QUERIES), ("candidates", "index_cache")),
    "label": (("candidates", "chunks", "registry"), ("labels", "checkpoint")),
    "emit-train": (("labels", "chunks"), ("training_set",)),
    "score": (("chunks", "registry"), ("predictions",)),
    "eval": (("predictions", "gold"), ("report",)),
    "sweep": (("chunks", "registry", QUERIES, "gold"), ("sweep_report", "index_cache")),
    "bench": (("chunks", "registry"), ("latency",)),
    "synth": (("template_bank",), ("notes", "truth", "gold", "mock_script")),
    "gold-candidates": (("chunks", "registry", QUERIES), ("gold_candidates",)),
}

STAGE_PARAMETERS = {
    "chunk": ("chunking",),
    "expand": ("query_count", "llm"),
    "index": ("embedder",),
    "harvest": ("embedder", "per_concept_k", "query_source"),
    "label": ("llm", "parallel_requests", "label_batch_size"),
    "emit-train": ("training_mode",),
    "score": ("scorer", "threshold", "parallel_requests"),
    "eval": ("k", "include_baselines"),
    "sweep": ("embedder", "ks", "query_source"),
    "bench": ("scorer", "threshold", "bench_patients"),
    "synth": ("synth", "chunking"),
    "gold-candidates": ("embedder", "rng_seed", "query_source"),
}


class OncoPipeline(object):
    """Runs one pipeline stage per call over a shared configuration."""

    def __init__(
        self,
        config: PipelineConfig,
        name: Optional[str] = None,
        output: Optional[str] = None,
        mock_llm: Optional[str] = None,
        llm=None,
        embedder=None,
    ):
        self._config = config
        self._paths = config.paths
        self._name = name if name is not None else "pipeline"
        self._output = output
        self._mock_llm = mock_llm
        self._llm = llm
        self._embedder = embedder
        self._summary_writer = None
        self._owned: List[str] = []

    # paths

    def _path(self, key: str) -> str:
        if key == QUERIES:
            key = "queries" if self._config.query_source == "static" else "expanded_queries"
        return getattr(self._paths, key)

    def inputs(self, stage: str) -> List[str]:
        paths = [self._path(k) for k in STAGE_IO[stage][0]]
        if stage in ("label", "expand") and self._mock_llm is not None:
            paths.append(self._mock_llm)
        return paths

    def outputs(self, stage: str) -> List[str]:
        paths = [self._path(k) for k in STAGE_IO[stage][1]]
        if self._output is not None:
            paths[0] = self._output
        return paths

    def plan(self, stage: str) -> dict:
        params = config_to_dict(self._config)
        return {
            "stage": stage,
            "inputs": self.inputs(stage),
            "outputs": self.outputs(stage),
            "parameters": {k: params[k] for k in STAGE_PARAMETERS.get(stage, ())},
            "llm": ("mock:" + self._mock_llm) if self._mock_llm else None,
        }

    # shared resources

    @property
    def embedder(self):
        if self._embedder is None:
            self._embedder = make_embedder(self._config.embedder, self._config.parallel_requests)
            self._owned.append("_embedder")
        return self._embedder

    @property
    def llm(self):
        if self._llm is None:
            self._llm = make_llm(self._config.llm, self._mock_llm)
            self._owned.append("_llm")
        return self._llm

    def _writer(self) -> SummaryWriter:
        if self._summary_writer is None:
            log_dir = self._paths.log_dir
            log_path = f"{log_dir}/{self._name}"
            if os.path.exists(log_path):
                idx = sum(1 for d in os.listdir(log_dir) if d.startswith(self._name))
                log_path = f"{log_dir}/{self._name}.{idx}"
                logger.info(f"Run output {log_dir}/{self._name} already exists, using {log_path}")
            os.makedirs(f"{log_path}/tb")
            with open(f"{log_path}/config.json", "w") as config_file:
                json.dump(config_to_dict(self._config), config_file, indent=4, sort_keys=True)
            logger.info(f"Writing metrics to {log_path}/tb")
            self._summary_writer = SummaryWriter(f"{log_path}/tb")
        return self._summary_writer

    def close(self):
        if self._summary_writer is not None:
            self._summary_writer.close()
            self._summary_writer = None
        # clients passed in by the caller stay open
        for attr in self._owned:
            getattr(self, attr).close()
            setattr(self, attr, None)
        self._owned = []

    def _registry(self):
        return load_registry(self._paths.registry)

    def _query_sets(self, registry) -> Dict[ConceptId, QuerySet]:
        return static_query_sets(registry, self._path(QUERIES))

    # stages

    def run(self, stage: str):
        for path in self.inputs(stage):
            require_file(path, f"input of '{stage}'")
        logger.info(f"Running stage '{stage}'")
        try:
            return getattr(self, "stage_" + stage.replace("-", "_"))()
        finally:
            self.close()

    def stage_ingest(self):
        notes = ingest_notes(self._paths.raw_notes)
        save_notes(notes, self.outputs("ingest")[0])

    def stage_chunk(self):
        chunks = chunk_corpus(ingest_notes(self._paths.notes), self._config.chunking)
        save_chunks(chunks, self.outputs("chunk")[0])

    def stage_expand(self):
        registry = self._registry()
        template = load_prompt("expand_queries", self._paths.prompt_dir)
        query_sets = {}
        for concept_id in tqdm(CONCEPT_IDS, desc="Expanding", disable=None):
            query_sets[concept_id] = expand_queries(
                registry[concept_id], self.llm, self._config.query_count, template
            )
        save_query_sets(query_sets, self.outputs("expand")[0])

    def stage_index(self):
        chunks = load_chunks(self._paths.chunks)
        return build_or_load_index(chunks, self.embedder, self.outputs("index")[0])

    def stage_harvest(self):
        chunks = load_chunks(self._paths.chunks)
        query_sets = self._query_sets(self._registry())
        index = build_or_load_index(chunks, self.embedder, self._paths.index_cache)
        candidates = harvest_candidates(index, query_sets, self.embedder, self._config.per_concept_k)
        save_candidates(candidates, self.outputs("harvest")[0])
        return candidates

    def stage_label(self):
        labels = run_labeling(
            load_candidates(self._paths.candidates),
            load_chunks(self._paths.chunks),
            self._registry(),
            self.llm,
            checkpoint_path=self._paths.checkpoint,
            parallel_requests=self._config.parallel_requests,
            batch_size=self._config.label_batch_size,
            prompt_dir=self._paths.prompt_dir,
            writer=self._writer(),
        )
        save_labels(labels, self.outputs("label")[0])
        return labels

    def stage_emit_train(self):
        return emit_training_set(
            load_labels(self._paths.labels),
            load_chunks(self._paths.chunks),
            TrainingMode(self._config.training_mode),
            self.outputs("emit-train")[0],
        )

    def _scorer(self):
        return make_scorer(self._config.scorer, self._registry(), self._config.threshold)

    def stage_score(self):
        with closing(self._scorer()) as scorer:
            return classify_corpus(
                scorer,
                load_chunks(self._paths.chunks),
                self.outputs("score")[0],
                parallel=self._config.parallel_requests if self._config.scorer != "lexical" else 1,
            )

    def _report(self):
        predictions = load_predictions(self._paths.predictions)
        gold = load_gold(self._paths.gold)
        system = self._config.scorer
        k = self._config.k
        if k is None:
            return compute_report(predictions, gold, Regime.CLASSIFY_ALL, system=system), predictions, gold
        ranked = [rank_by_score(predictions, c, k) for c in CONCEPT_IDS]
        top_k = predictions_from_ranked(ranked)
        return compute_report(top_k, gold, Regime.TOP_K, k=k, system=system), top_k, gold

    def stage_eval(self):
        report, predictions, gold = self._report()
        render_comparison([report], [], self.outputs("eval")[0], self._config.include_baselines)

        if Path(self._paths.chunks).is_file():
            breakdown = per_patient_confusion(predictions, gold, load_chunks(self._paths.chunks))
            write_patient_breakdown(breakdown, Path(self.outputs("eval")[0]).with_suffix(".patients.csv"))

        writer = self._writer()
        for m in report.per_concept:
            for metric in ("precision", "recall", "f1"):
                value = getattr(m, metric)
                if value is not None:
                    writer.add_scalar(f"Eval/{metric}/{m.concept_id.value}", value, 0)
        for metric in ("precision", "recall", "f1"):
            if getattr(report, metric) is not None:
                writer.add_scalar(f"Eval/{metric}/overall", getattr(report, metric), 0)
        logger.info(
            f"{report.system} ({report.regime.value}): precision {report.precision}, "
            f"recall {report.recall}, f1 {report.f1}"
        )
        return report

    def stage_sweep(self):
        chunks = load_chunks(self._paths.chunks)
        query_sets = self._query_sets(self._registry())
        gold = load_gold(self._paths.gold)
        index = build_or_load_index(chunks, self.embedder, self._paths.index_cache)

        ks = list(self._config.ks)
        ranked = {
            c: assign_chunks_to_concept(index, query_sets[c], self.embedder, ks[-1]) for c in CONCEPT_IDS
        }
        points = k_sweep_eval(ranked, gold, ks)
        render_sweep(points, self.outputs("sweep")[0], self._config.include_baselines)

        writer = self._writer()
        for point in points:
            if point.concept_id is None:
                if point.precision is not None:
                    writer.add_scalar("Sweep/precision", point.precision, point.k)
                if point.recall is not None:
                    writer.add_scalar("Sweep/recall", point.recall, point.k)
        return points

    def stage_bench(self):
        chunks = load_chunks(self._paths.chunks)
        patients = sorted({c.patient_id for c in chunks})
        if self._config.bench_patients is not None:
            patients = patients[: self._config.bench_patients]

        f1 = None
        report = None
        if Path(self._paths.predictions).is_file() and Path(self._paths.gold).is_file():
            report = self._report()[0]
            f1 = report.f1
        with closing(self._scorer()) as scorer:
            latency = bench_latency(scorer, patients, chunks, f1=f1)
        write_latency_csv(latency, self.outputs("bench")[0])
        if report is not None:
            render_comparison([report], [latency], self._paths.report, self._config.include_baselines)

        writer = self._writer()
        for step, (_, seconds) in enumerate(latency.samples):
            writer.add_scalar("Bench/seconds_per_patient", seconds, step)
        return latency

    def stage_synth(self):
        bank = load_template_bank(self._paths.template_bank)
        notes, truth = generate_corpus(self._config.synth, bank)
        chunks = chunk_corpus(notes, self._config.chunking)
        gold = truth_to_gold(truth, chunks)

        notes_path, truth_path, gold_path, script_path = self.outputs("synth")
        save_notes(notes, notes_path)
        save_truth(truth, truth_path)
        save_gold(gold, gold_path)
        write_jsonl(script_path, oracle_llm_script(truth, chunks))
        return notes, truth

    def stage_gold_candidates(self):
        chunks = load_chunks(self._paths.chunks)
        query_sets = self._query_sets(self._registry())
        index = build_or_load_index(chunks, self.embedder, self._paths.index_cache)
        candidates = build_gold_candidates(chunks, query_sets, self.embedder, self._config.rng_seed, index=index)
        write_jsonl(self.outputs("gold-candidates")[0], gold_from_candidates(candidates))
        return candidates
