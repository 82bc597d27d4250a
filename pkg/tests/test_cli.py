import csv
import json
from pathlib import Path

import pytest

from phenoaudit.cli import main
from phenoaudit.manifest import RunDirectory


SMALL_CFG = """[cohort]
n_patients = 1200
true_prevalence = 0.30
seed = 5

[coder_error]
miss_rate = 0.0568
false_code_rate = 0.0339

[facility.F01]
coder_error_multiplier = 1.0

[facility.F02]
coder_error_multiplier = 1.0
"""


@pytest.fixture(scope="module")
def pipeline_run(tmp_path_factory):
    """One full small pipeline run shared by the read-only CLI tests."""
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "cohort.cfg"
    cfg.write_text(SMALL_CFG)
    run = root / "run"
    steps = [
        ["generate", "--config", str(cfg), "--run", str(run)],
        ["featurize", "--run", str(run), "--seed", "5"],
        ["train", "--run", str(run), "--seed", "5", "--epochs", "15"],
        ["baselines", "--run", str(run), "--seed", "5", "--epochs", "20"],
        ["evaluate", "--run", str(run), "--model", "dnn"],
        ["evaluate", "--run", str(run), "--model", "logistic"],
        ["evaluate", "--run", str(run), "--model", "linear_svm"],
        ["audit", "bin", "--run", str(run), "--model", "dnn"],
        ["audit", "sample", "--run", str(run), "--seed", "5"],
        ["audit", "packets", "--run", str(run), "--seed", "5"],
        ["audit", "rates", "--run", str(run), "--oracle"],
        ["audit", "project", "--run", str(run)],
        ["report", "--run", str(run)],
    ]
    for step in steps:
        assert main(step) == 0, step
    return run


class TestPipeline:
    def test_artifacts_exist(self, pipeline_run):
        run = pipeline_run
        for rel in (
            "data/person.csv", "data/visit.csv", "data/measurement.csv",
            "data/drug_exposure.csv", "data/condition.csv", "data/error_ledger.csv",
            "features/vocabulary.json", "features/train.csv",
            "models/dnn.json", "models/logistic.json", "models/linear_svm.json",
            "metrics/dnn/predictions.csv", "metrics/dnn/roc.csv",
            "audit/discordant.csv", "audit/sampled.csv", "audit/packets.jsonl",
            "audit/token_map.csv", "audit/rates.json", "audit/estimate.json",
            "report/comparison.csv",
        ):
            assert (run / rel).exists(), rel

    def test_comparison_rows(self, pipeline_run):
        with open(pipeline_run / "report" / "comparison.csv") as fh:
            rows = list(csv.DictReader(fh))
        assert [r["algorithm"] for r in rows] == ["dnn", "logistic", "linear_svm"]
        for row in rows:
            for col in ("precision", "recall", "f1", "auroc", "ap"):
                assert 0.0 <= float(row[col]) <= 1.0

    def test_manifest_verifies(self, pipeline_run):
        assert RunDirectory(pipeline_run).verify() == []

    def test_estimate_schema(self, pipeline_run):
        estimate = json.loads((pipeline_run / "audit" / "estimate.json").read_text())
        assert estimate["projected_incorrect"] <= estimate["n_discordant"]
        assert 0.0 <= estimate["projected_total_rate"] <= 1.0
        assert estimate["projected_missing_rate"] + estimate["projected_false_rate"] == \
            pytest.approx(estimate["projected_total_rate"])

    def test_report_refuses_tampered_run(self, pipeline_run):
        target = pipeline_run / "metrics" / "dnn" / "summary.csv"
        original = target.read_bytes()
        try:
            target.write_bytes(original + b"tampered\r\n")
            assert main(["report", "--run", str(pipeline_run)]) == 1
        finally:
            target.write_bytes(original)
            assert main(["report", "--run", str(pipeline_run)]) == 0


class TestExitCodes:
    def test_unknown_subcommand_usage(self):
        assert main(["frobnicate"]) == 1

    def test_missing_dependency_exit_1(self, tmp_path):
        assert main(["audit", "project", "--run", str(tmp_path / "empty")]) == 1

    def test_invalid_config_exit_1(self, tmp_path):
        bad = tmp_path / "bad.cfg"
        bad.write_text("[cohort]\nn_patients = 0\n")
        assert main(["generate", "--config", str(bad), "--run", str(tmp_path / "r")]) == 1

    def test_oracle_and_judgments_mutually_exclusive(self, pipeline_run):
        assert main(["audit", "rates", "--run", str(pipeline_run)]) == 1


class TestDeterminism:
    def test_two_runs_identical_manifests(self, tmp_path):
        cfg = tmp_path / "cohort.cfg"
        cfg.write_text(SMALL_CFG)
        manifests = []
        for name in ("a", "b"):
            run = tmp_path / name
            steps = [
                ["generate", "--config", str(cfg), "--run", str(run)],
                ["featurize", "--run", str(run), "--seed", "5"],
                ["train", "--run", str(run), "--seed", "5", "--epochs", "6"],
                ["baselines", "--run", str(run), "--seed", "5", "--epochs", "6"],
                ["evaluate", "--run", str(run), "--model", "dnn"],
                ["audit", "bin", "--run", str(run), "--model", "dnn"],
                ["audit", "sample", "--run", str(run), "--seed", "5"],
                ["audit", "packets", "--run", str(run), "--seed", "5"],
                ["audit", "rates", "--run", str(run), "--oracle"],
                ["audit", "project", "--run", str(run)],
            ]
            for step in steps:
                assert main(step) == 0, step
            manifests.append(RunDirectory(run).manifest())
        assert manifests[0] == manifests[1]

    def test_subcommand_idempotent(self, tmp_path):
        cfg = tmp_path / "cohort.cfg"
        cfg.write_text(SMALL_CFG)
        run = tmp_path / "run"
        assert main(["generate", "--config", str(cfg), "--run", str(run)]) == 0
        first = (run / "data" / "measurement.csv").read_bytes()
        assert main(["generate", "--config", str(cfg), "--run", str(run)]) == 0
        assert (run / "data" / "measurement.csv").read_bytes() == first
