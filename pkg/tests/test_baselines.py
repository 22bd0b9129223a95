import pytest

from src.baselines import (
    REFERENCE_LATENCIES,
    REFERENCE_SWEEP,
    REFERENCE_SYSTEMS,
    macro_average,
    reference_system,
)
from src.concepts import CONCEPT_IDS, ConceptId


class TestReferenceSystems:
    def test_six_systems_over_thirteen_concepts(self):
        assert [s.name for s in REFERENCE_SYSTEMS] == [
            "Onco-Ret (S)",
            "Onco-Ret (O)",
            "PubmedBert",
            "Onco-Ret (L)",
            "Open AI Ada",
            "Mistral SFR",
        ]
        for system in REFERENCE_SYSTEMS:
            assert list(system.per_concept) == list(CONCEPT_IDS)

    @pytest.mark.parametrize("system", REFERENCE_SYSTEMS, ids=lambda s: s.name)
    def test_macro_average_reproduces_overall(self, system):
        precision, recall = macro_average(system)
        assert abs(precision - system.overall[0]) <= 0.01
        assert abs(recall - system.overall[1]) <= 0.01

    def test_spot_values(self):
        small = reference_system("Onco-Ret (S)")
        assert small.per_concept[ConceptId.CURRENT_DIAGNOSIS] == (0.85, 0.86)
        assert small.per_concept[ConceptId.SCORES] == (0.64, 0.66)
        assert reference_system("Onco-Ret (L)").per_concept[ConceptId.TUMOR_STAGING] == (0.71, 0.96)
        assert reference_system("Mistral SFR").overall == (0.23, 0.37)

    def test_unknown_system(self):
        with pytest.raises(KeyError):
            reference_system("GPT-4")


class TestReferenceLatencyAndSweep:
    def test_latencies(self):
        by_name = {r.name: (r.seconds_per_patient, r.f1) for r in REFERENCE_LATENCIES}
        assert by_name == {
            "Onco-Ret (O)": (318.0, 0.69),
            "Onco-Ret (S)": (1200.0, 0.67),
            "Onco-Ret (L)": (1140.0, 0.71),
            "Open AI Ada": (2289.75, 0.52),
            "Mistral SFR": (5160.0, 0.28),
        }
        assert min(REFERENCE_LATENCIES, key=lambda r: r.seconds_per_patient).name == "Onco-Ret (O)"

    def test_sweep_trend(self):
        for system in ("Open AI Ada", "Mistral SFR"):
            low, high = [p for p in REFERENCE_SWEEP if p.system == system]
            assert (low.k, high.k) == (25, 400)
            assert high.recall > low.recall
            assert high.precision < low.precision
