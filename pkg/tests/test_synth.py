import numpy as np
import pytest

from phenoaudit.errors import ValidationError
from phenoaudit.features import PatientHistory, build_vocabulary, encode_dataset, split_dataset
from phenoaudit.rng import derive_rng
from phenoaudit.store import read_tables, validate
from phenoaudit.synth import (
    CoderErrorConfig,
    CohortConfig,
    EncounterCountSpec,
    ErrorLedger,
    FacilityProfile,
    LedgerEntry,
    default_facility_profiles,
    generate_cohort,
    load_cohort_config,
    plant_coder_errors,
    summarize_cohort,
    write_cohort,
    write_default_config,
)


class TestConfigValidation:
    def test_zero_patients_rejected(self):
        with pytest.raises(ValidationError, match="n_patients"):
            CohortConfig(n_patients=0).validate()

    def test_prevalence_bounds(self):
        with pytest.raises(ValidationError, match="true_prevalence"):
            CohortConfig(true_prevalence=1.2).validate()

    def test_bad_multiplier(self):
        profile = FacilityProfile("F01", coder_error_multiplier=0.0)
        with pytest.raises(ValidationError, match="multiplier"):
            CohortConfig(facility_profiles=(profile,)).validate()

    def test_bad_order_propensity(self):
        profile = FacilityProfile("F01", order_propensity={"LAB:glucose": 1.5})
        with pytest.raises(ValidationError, match="order_propensity"):
            CohortConfig(facility_profiles=(profile,)).validate()

    def test_error_rates_bounds(self):
        with pytest.raises(ValidationError, match="miss_rate"):
            CoderErrorConfig(miss_rate=-0.1).validate()

    def test_default_profiles_valid(self):
        for profile in default_facility_profiles():
            profile.validate()


class TestPlantCoderErrors:
    def uniform_labels(self, n, prevalence=0.30, seed=0):
        rng = derive_rng(seed, "labels")
        return [(f"E{i}", "F01", bool(rng.random() < prevalence)) for i in range(n)]

    def test_zero_noise_identity(self):
        labels = self.uniform_labels(5000)
        coded, ledger = plant_coder_errors(labels, CoderErrorConfig(0.0, 0.0),
                                           [FacilityProfile("F01")], seed=1)
        assert all(coded[e] == t for e, _, t in labels)
        assert all(entry.error_kind == "none" for entry in ledger.entries)

    def test_population_rates_at_scale(self):
        """Planted rates are population fractions: 5.68% + 3.39% ~ 9.07%."""
        labels = self.uniform_labels(100_000)
        _, ledger = plant_coder_errors(labels, CoderErrorConfig(0.0568, 0.0339),
                                       [FacilityProfile("F01")], seed=7)
        rates = ledger.planted_rates()
        assert abs(rates["total_rate"] - 0.0907) < 0.005

    def test_full_miss_saturation(self):
        labels = self.uniform_labels(2000)
        coded, _ = plant_coder_errors(labels, CoderErrorConfig(1.0, 0.0),
                                      [FacilityProfile("F01")], seed=3)
        assert not any(coded[e] for e, _, t in labels if t)

    def test_facility_multiplier_scales_errors(self):
        labels = [(f"E{i}", "FLOW" if i % 2 else "FHIGH", i % 3 == 0) for i in range(60_000)]
        profiles = [FacilityProfile("FLOW", coder_error_multiplier=0.5),
                    FacilityProfile("FHIGH", coder_error_multiplier=2.0)]
        _, ledger = plant_coder_errors(labels, CoderErrorConfig(0.03, 0.02), profiles, seed=5)
        by_fac = {"FLOW": 0, "FHIGH": 0}
        totals = {"FLOW": 0, "FHIGH": 0}
        fac_of = {e: f for e, f, _ in labels}
        for entry in ledger.entries:
            fac = fac_of[entry.encounter_id]
            totals[fac] += 1
            if entry.error_kind != "none":
                by_fac[fac] += 1
        low = by_fac["FLOW"] / totals["FLOW"]
        high = by_fac["FHIGH"] / totals["FHIGH"]
        assert high > 2.5 * low

    def test_ledger_consistency_enforced(self):
        with pytest.raises(ValidationError, match="inconsistent"):
            ErrorLedger([LedgerEntry("E1", True, True, "missing")])

    def test_unknown_facility_rejected(self):
        with pytest.raises(ValidationError, match="unknown facility"):
            plant_coder_errors([("E1", "F99", True)], CoderErrorConfig(),
                               [FacilityProfile("F01")], seed=0)


class TestGenerateCohort:
    def test_prevalence_within_band(self):
        config = CohortConfig(n_patients=14300, seed=23)
        encounters, ledger = generate_cohort(config)
        assert len(encounters) > 15_000
        n_true = sum(1 for e in ledger.entries if e.true_diabetic)
        prevalence = n_true / len(ledger)
        assert 0.29 <= prevalence <= 0.31

    def test_determinism_bit_for_bit(self, tmp_path):
        config = CohortConfig(n_patients=300, seed=9)
        a_dir, b_dir = tmp_path / "a", tmp_path / "b"
        for out in (a_dir, b_dir):
            encounters, ledger = generate_cohort(config)
            write_cohort(encounters, ledger, out)
        for name in ("person", "visit", "measurement", "drug_exposure", "condition"):
            assert (a_dir / f"{name}.csv").read_bytes() == (b_dir / f"{name}.csv").read_bytes()
        assert (a_dir / "error_ledger.csv").read_bytes() == (b_dir / "error_ledger.csv").read_bytes()

    def test_age_floor(self, small_cohort):
        _, encounters, _ = small_cohort
        assert min(e.age_years for e in encounters) >= 50

    def test_custom_age_floor(self):
        config = CohortConfig(n_patients=200, seed=2, min_age_years=65)
        encounters, _ = generate_cohort(config)
        assert min(e.age_years for e in encounters) >= 65

    def test_ledger_reconciles_codes(self, small_cohort):
        _, encounters, ledger = small_cohort
        for enc in encounters:
            entry = ledger[enc.encounter_id]
            assert entry.coded_diabetic == enc.coded_diabetic
            assert entry.coded_diabetic == (entry.true_diabetic != (entry.error_kind != "none"))

    def test_generated_bundle_validates(self, small_cohort):
        _, encounters, _ = small_cohort
        assert validate(encounters) == []

    def test_round_trips_through_store(self, small_cohort, tmp_path):
        _, encounters, ledger = small_cohort
        write_cohort(encounters[:50] if False else encounters, ledger, tmp_path)
        back = read_tables(tmp_path)
        assert len(back) == len(encounters)
        assert ErrorLedger.load(tmp_path / "error_ledger.csv").counts() == ledger.counts()

    def test_encounter_count_spec_respected(self):
        spec = EncounterCountSpec(min=2, max=3, mean=2.2)
        config = CohortConfig(n_patients=400, seed=4, encounters_per_patient=spec)
        encounters, _ = generate_cohort(config)
        per_patient = {}
        for e in encounters:
            per_patient[e.patient_id] = per_patient.get(e.patient_id, 0) + 1
        assert set(per_patient.values()) <= {2, 3}

    def test_monotone_separability(self):
        """Bayes-proxy AUROC vs true labels must not decrease with signal."""
        from phenoaudit.metrics import records_from_arrays, roc_curve
        from phenoaudit.training import TrainSchedule, train_baseline

        aurocs = []
        for signal in (0.2, 0.6, 1.0):
            config = CohortConfig(n_patients=2500, seed=31, signal_strength=signal)
            encounters, ledger = generate_cohort(config)
            history = PatientHistory(encounters)
            train_e, val_e, test_e = split_dataset(encounters, seed=31)
            vocab = build_vocabulary(train_e, PatientHistory(train_e))
            dtr = encode_dataset(train_e, history, vocab)
            dva = encode_dataset(val_e, history, vocab)
            dte = encode_dataset(test_e, history, vocab)
            probe = train_baseline("logistic", TrainSchedule(30, 5, 256, 31), dtr, dva, seed=31)
            true_labels = [ledger[i].true_diabetic for i in dte.ids]
            records = records_from_arrays(dte.ids, probe.predict(dte.X), true_labels)
            aurocs.append(roc_curve(records)[1])
        assert aurocs[0] <= aurocs[1] + 0.01
        assert aurocs[1] <= aurocs[2] + 0.01


class TestSummary:
    def test_counts(self, small_cohort):
        _, encounters, ledger = small_cohort
        report = summarize_cohort(encounters, ledger)
        assert report["encounters"] == len(encounters)
        assert report["has_truth"] is True
        assert sum(report["per_facility"].values()) == len(encounters)

    def test_zero_noise_prevalences_equal(self):
        config = CohortConfig(n_patients=800, seed=6, coder_error=CoderErrorConfig(0.0, 0.0))
        encounters, ledger = generate_cohort(config)
        report = summarize_cohort(encounters, ledger)
        assert report["coded_prevalence"] == pytest.approx(report["true_prevalence"])

    def test_split_tallied_from_ledger(self):
        config = CohortConfig(n_patients=6000, seed=13)
        encounters, ledger = generate_cohort(config)
        report = summarize_cohort(encounters, ledger)
        counts = ledger.counts()
        assert report["missing_rate"] == pytest.approx(counts["missing"] / counts["total"])
        assert report["false_code_rate"] == pytest.approx(counts["false_code"] / counts["total"])

    def test_missing_ledger_flagged(self, small_cohort):
        _, encounters, _ = small_cohort
        report = summarize_cohort(encounters, None)
        assert report["has_truth"] is False and "note" in report
        assert "true_prevalence" not in report


class TestConfigFile:
    def test_default_config_round_trip(self, tmp_path):
        path = tmp_path / "cohort.cfg"
        write_default_config(path, n_patients=123, seed=99)
        config = load_cohort_config(path)
        assert config.n_patients == 123 and config.seed == 99
        assert len(config.facility_profiles) == 5
        config.validate()

    def test_facility_sections_parsed(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text(
            "[cohort]\nn_patients = 10\nseed = 1\n\n"
            "[facility.X1]\ncoder_error_multiplier = 2.0\n"
            "order_propensity.LAB:glucose = 0.5\n"
            "reference_range_shift.LAB:glucose = 4.0\n"
        )
        config = load_cohort_config(path)
        assert config.facility_profiles[0].facility_id == "X1"
        assert config.facility_profiles[0].order_propensity["LAB:glucose"] == 0.5

    def test_unknown_facility_key_rejected(self, tmp_path):
        path = tmp_path / "c.cfg"
        path.write_text("[cohort]\nn_patients = 10\n\n[facility.X1]\nbogus = 1\n")
        with pytest.raises(ValidationError, match="bogus"):
            load_cohort_config(path)

    def test_missing_file(self, tmp_path):
        with pytest.raises(ValidationError):
            load_cohort_config(tmp_path / "absent.cfg")
