"""Pipeline entry point.

Each subcommand is one resumable, file-mediated stage over a run directory;
all randomness fans out from ``--seed`` through named substreams. Exit codes:
0 success, 1 validation/usage error, 2 internal error.
"""

from __future__ import annotations

import csv
import json
import sys
from pathlib import Path

import click
import numpy as np

from . import __version__
from .audit import (
    agreement_rates,
    build_review_packets,
    find_discordant,
    load_discordant,
    load_judgments,
    load_rates,
    load_token_map,
    oracle_judgments,
    project_prevalence,
    save_discordant,
    save_packets,
    save_rates,
    save_sample,
    save_token_map,
    stratified_sample,
    weighted_bin_rates,
)
from .errors import PhenoAuditError, ValidationError
from .features import (
    Dataset,
    FeatureVocabulary,
    PatientHistory,
    build_vocabulary,
    encode_dataset,
    load_features,
    save_features,
    split_dataset,
)
from .manifest import RunDirectory
from .metrics import (
    confusion_at_threshold,
    export_curves,
    pr_curve,
    records_from_arrays,
    roc_curve,
)
from .network import MlpConfig, load_model, save_model, tapered_widths
from .store import DiabetesCodeSet, read_tables
from .synth import (
    ErrorLedger,
    generate_cohort,
    load_cohort_config,
    summarize_cohort,
    write_cohort,
    write_default_config,
)
from .training import (
    Standardizer,
    TrainResult,
    TrainSchedule,
    SearchGrid,
    hyperparameter_search,
    multi_facility_train,
    train,
    train_baseline,
)


@click.group(name="phenoaudit")
@click.version_option(__version__)
def cli():
    """Synthetic-cohort coding audit pipeline."""


def _run_dir(path) -> RunDirectory:
    return RunDirectory(path).prepare()


def _write_json(path, payload) -> None:
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# --- generate ---------------------------------------------------------------


@cli.command()
@click.option("--config", "config_path", type=click.Path(), default=None,
              help="Cohort config file; a default template is materialized when omitted.")
@click.option("--run", "run_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=None, help="Override the config seed.")
def generate(config_path, run_path, seed):
    """Generate the synthetic cohort tables plus the planted-error ledger."""
    run = _run_dir(run_path)
    if config_path is None:
        config_path = run.path("data", "cohort.cfg")
        if not Path(config_path).exists():
            write_default_config(config_path, seed=seed if seed is not None else 42)
    config = load_cohort_config(config_path)
    if seed is not None:
        from dataclasses import replace

        config = replace(config, seed=seed)
    encounters, ledger = generate_cohort(config)
    data_dir = run.path("data")
    write_cohort(encounters, ledger, data_dir)
    summary = summarize_cohort(encounters, ledger)
    _write_json(run.path("data", "cohort_summary.json"), summary)
    run.record(
        *(data_dir / f"{t}.csv" for t in ("person", "visit", "measurement", "drug_exposure", "condition")),
        data_dir / "error_ledger.csv",
        run.path("data", "cohort_summary.json"),
    )
    click.echo(f"generated {summary['encounters']} encounters "
               f"({summary['coded_prevalence']:.3f} coded prevalence) in {data_dir}")


# --- featurize ----------------------------------------------------------------


@cli.command()
@click.option("--run", "run_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
@click.option("--threshold", type=float, default=0.05,
              help="Positive-case prevalence cut for the vocabulary filter.")
@click.option("--drop-history-diabetes", is_flag=True,
              help="Exclude the aggregated prior-diabetes bit from the features.")
def featurize(run_path, seed, threshold, drop_history_diabetes):
    """Split the cohort and encode the feature matrices."""
    run = _run_dir(run_path)
    run.require("data", "visit.csv")
    encounters = read_tables(run.path("data"))
    history = PatientHistory(encounters)
    train_e, val_e, test_e = split_dataset(encounters, seed=seed)
    # the vocabulary filter sees only the training split, history included
    vocabulary = build_vocabulary(
        train_e, PatientHistory(train_e), threshold=threshold,
        include_history_diabetes_flag=not drop_history_diabetes,
    )
    out = run.path("features")
    vocabulary.save(out / "vocabulary.json")
    with open(out / "splits.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["encounter_id", "split"])
        for name, group in (("train", train_e), ("validation", val_e), ("test", test_e)):
            for enc in group:
                writer.writerow([enc.encounter_id, name])
    written = [out / "vocabulary.json", out / "splits.csv"]
    for name, group in (("train", train_e), ("validation", val_e), ("test", test_e)):
        dataset = encode_dataset(group, history, vocabulary)
        save_features(dataset, vocabulary, out / f"{name}.csv")
        written.append(out / f"{name}.csv")
    run.record(*written)
    click.echo(f"vocabulary {len(vocabulary)} features; splits "
               f"{len(train_e)}/{len(val_e)}/{len(test_e)} written to {out}")


def _load_split(run: RunDirectory, vocabulary: FeatureVocabulary, name: str) -> Dataset:
    return load_features(run.require("features", f"{name}.csv"), vocabulary)


def _facility_of(run: RunDirectory) -> dict[str, str]:
    mapping = {}
    with open(run.require("data", "visit.csv"), newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            mapping[row["visit_id"]] = row["facility_id"]
    return mapping


def _subset(dataset: Dataset, keep: list[int]) -> Dataset:
    return Dataset(dataset.X[keep], dataset.y[keep], [dataset.ids[i] for i in keep])


def _write_run_records(run: RunDirectory, results: list[TrainResult], filename: str):
    """Deterministic TSV, one ranked line per run record (no wall time)."""
    path = run.path("models", filename)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("name\tactivation\toptimizer\tloss\tdepth\tepochs\tbest_epoch\t"
                 "val_loss\tval_f1\tn_params\tseed\terror\n")
        for r in results:
            rec = r.record
            cfg = rec.config
            best_val = min(rec.val_loss) if rec.val_loss else float("nan")
            fh.write("\t".join([
                rec.name, cfg["activation"], cfg["optimizer"], cfg["loss"],
                str(len(cfg["hidden_layers"])), str(rec.epochs_run), str(rec.best_epoch),
                repr(best_val), repr(rec.val_f1), str(rec.n_parameters),
                str(rec.seed), rec.error or "-",
            ]) + "\n")
    return path


def _save_checkpoint(run: RunDirectory, result: TrainResult, vocabulary, name: str):
    path = run.path("models", f"{name}.json")
    save_model(
        result.model,
        path,
        vocab_hash=vocabulary.content_hash(),
        scaler=result.scaler.to_json() if result.scaler else None,
        extra={"name": name, "val_f1": result.record.val_f1},
    )
    return path


@cli.command(name="train")
@click.option("--run", "run_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
@click.option("--depth", type=int, default=10, help="Hidden layer count (paper-best 10).")
@click.option("--activation", type=click.Choice(["tanh", "relu", "selu"]), default="tanh")
@click.option("--loss", type=click.Choice(["mse", "mae", "bce", "hinge"]), default="mse")
@click.option("--optimizer", type=click.Choice(["adam", "sgd"]), default="adam")
@click.option("--epochs", type=int, default=100)
@click.option("--patience", type=int, default=5)
@click.option("--batch-size", type=int, default=256)
@click.option("--name", default="dnn")
@click.option("--multi-facility", is_flag=True,
              help="Balanced training across facilities; per-facility test metrics.")
def train_cmd(run_path, seed, depth, activation, loss, optimizer, epochs, patience,
              batch_size, name, multi_facility):
    """Train the coder-mimic network on the encoded features."""
    run = _run_dir(run_path)
    vocabulary = FeatureVocabulary.load(run.require("features", "vocabulary.json"))
    train_ds = _load_split(run, vocabulary, "train")
    val_ds = _load_split(run, vocabulary, "validation")
    schedule = TrainSchedule(epochs, min(patience, epochs), batch_size, seed)
    config = MlpConfig(
        input_dim=len(vocabulary),
        hidden_layers=tapered_widths(len(vocabulary), depth),
        activation=activation, loss=loss, optimizer=optimizer, seed=seed,
    )
    if multi_facility:
        facility_of = _facility_of(run)
        test_ds = _load_split(run, vocabulary, "test")
        facilities = sorted(set(facility_of.values()))
        per_fac = {}
        for fac in facilities:
            per_fac[fac] = tuple(
                _subset(ds, [i for i, eid in enumerate(ds.ids) if facility_of[eid] == fac])
                for ds in (train_ds, val_ds, test_ds)
            )
        result, evals, info = multi_facility_train(
            per_fac, config, schedule, seed=seed, vocabulary=vocabulary
        )
        for warning in info["warnings"]:
            click.echo(f"warning: {warning}", err=True)
        ckpt = _save_checkpoint(run, result, vocabulary, f"{name}_multi")
        fac_csv = run.path("metrics", "facilities.csv")
        with open(fac_csv, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["facility_id", "f1", "auroc", "n_test"])
            for ev in evals:
                writer.writerow([ev.facility_id, repr(ev.f1), repr(ev.auroc), ev.n_test])
        tsv = _write_run_records(run, [result], f"{name}_multi.runs.tsv")
        run.record(ckpt, fac_csv, tsv)
        click.echo("per-facility F1: " +
                   ", ".join(f"{e.facility_id}={e.f1:.3f}" for e in evals))
        return
    result = train(config, schedule, train_ds, val_ds, name=name)
    ckpt = _save_checkpoint(run, result, vocabulary, name)
    tsv = _write_run_records(run, [result], f"{name}.runs.tsv")
    run.record(ckpt, tsv)
    click.echo(f"{name}: epochs={result.record.epochs_run} "
               f"best={result.record.best_epoch} val_f1={result.record.val_f1:.4f}")


@cli.command()
@click.option("--run", "run_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
@click.option("--epochs", type=int, default=100)
def baselines(run_path, seed, epochs):
    """Train the logistic-regression and linear-SVM reference models."""
    run = _run_dir(run_path)
    vocabulary = FeatureVocabulary.load(run.require("features", "vocabulary.json"))
    train_ds = _load_split(run, vocabulary, "train")
    val_ds = _load_split(run, vocabulary, "validation")
    schedule = TrainSchedule(epochs, min(5, epochs), 256, seed)
    results = []
    written = []
    for kind in ("logistic", "linear_svm"):
        result = train_baseline(kind, schedule, train_ds, val_ds, seed=seed)
        written.append(_save_checkpoint(run, result, vocabulary, kind))
        results.append(result)
        click.echo(f"{kind}: val_f1={result.record.val_f1:.4f}")
    written.append(_write_run_records(run, results, "baselines.runs.tsv"))
    run.record(*written)


@cli.command()
@click.option("--run", "run_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
@click.option("--activations", default="tanh", help="Comma list from tanh,relu,selu.")
@click.option("--optimizers", default="adam", help="Comma list from adam,sgd.")
@click.option("--losses", default="mse,bce", help="Comma list from mse,mae,bce,hinge.")
@click.option("--depths", default="2,10", help="Comma list of hidden-layer counts in [2,15].")
@click.option("--epochs", type=int, default=40)
@click.option("--threads", type=int, default=1)
def search(run_path, seed, activations, optimizers, losses, depths, epochs, threads):
    """Hyperparameter grid search ranked by validation F1, then loss."""
    run = _run_dir(run_path)
    vocabulary = FeatureVocabulary.load(run.require("features", "vocabulary.json"))
    train_ds = _load_split(run, vocabulary, "train")
    val_ds = _load_split(run, vocabulary, "validation")
    grid = SearchGrid(
        activations=tuple(activations.split(",")),
        optimizers=tuple(optimizers.split(",")),
        losses=tuple(losses.split(",")),
        depths=tuple(int(d) for d in depths.split(",")),
    )
    schedule = TrainSchedule(epochs, min(5, epochs), 256, seed)
    ranked = hyperparameter_search(grid, schedule, train_ds, val_ds, seed=seed,
                                   threads=threads)
    tsv = _write_run_records(run, ranked, "search.runs.tsv")
    best = ranked[0]
    ckpt = _save_checkpoint(run, best, vocabulary, "search_best")
    run.record(tsv, ckpt)
    click.echo(f"best: {best.record.name} val_f1={best.record.val_f1:.4f} "
               f"({len(ranked)} grid points)")


# --- evaluate -------------------------------------------------------------------


@cli.command()
@click.option("--run", "run_path", required=True, type=click.Path())
@click.option("--model", "model_name", default="dnn")
@click.option("--split", default="test", type=click.Choice(["test", "validation", "train"]))
def evaluate(run_path, model_name, split):
    """Score a trained model on a split; write predictions and curves."""
    run = _run_dir(run_path)
    vocabulary = FeatureVocabulary.load(run.require("features", "vocabulary.json"))
    model, meta = load_model(run.require("models", f"{model_name}.json"))
    if meta["vocab_hash"] and meta["vocab_hash"] != vocabulary.content_hash():
        raise ValidationError(
            f"checkpoint {model_name} was trained against a different vocabulary"
        )
    dataset = _load_split(run, vocabulary, split)
    result = TrainResult(model, None, Standardizer.from_json(meta["scaler"]))
    probs = result.predict(dataset.X)
    out = run.path("metrics", model_name)
    out.mkdir(parents=True, exist_ok=True)
    pred_path = out / "predictions.csv"
    with open(pred_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["encounter_id", "p", "label"])
        for eid, p, y in zip(dataset.ids, probs, dataset.y):
            writer.writerow([eid, repr(float(p)), int(y)])
    records = records_from_arrays(dataset.ids, probs, dataset.y)
    confusion = confusion_at_threshold(records)
    roc = roc_curve(records)
    pr = pr_curve(records)
    export_curves(roc, pr, out, confusion)
    run.record(pred_path, out / "roc.csv", out / "pr.csv", out / "summary.csv")
    click.echo(f"{model_name} on {split}: precision={confusion.precision:.4f} "
               f"recall={confusion.recall:.4f} f1={confusion.f1:.4f} "
               f"auroc={roc[1]:.4f} ap={pr[1]:.4f}")


# --- audit subcommands ------------------------------------------------------------


@cli.group(name="audit")
def audit_group():
    """Discordance audit stages (bin, sample, packets, rates, project)."""


@audit_group.command(name="bin")
@click.option("--run", "run_path", required=True, type=click.Path())
@click.option("--model", "model_name", default="dnn")
def audit_bin(run_path, model_name):
    """Find model-coder disagreements and bin them by confidence."""
    run = _run_dir(run_path)
    pred_path = run.require("metrics", model_name, "predictions.csv")
    records = []
    with open(pred_path, newline="", encoding="utf-8") as fh:
        from .metrics import PredictionRecord

        for row in csv.DictReader(fh):
            records.append(PredictionRecord(row["encounter_id"], float(row["p"]),
                                            row["label"] == "1"))
    cases = find_discordant(records)
    out = run.path("audit", "discordant.csv")
    save_discordant(cases, out)
    _write_json(run.path("audit", "audit_meta.json"),
                {"model": model_name, "n_total": len(records), "n_discordant": len(cases)})
    run.record(out, run.path("audit", "audit_meta.json"))
    click.echo(f"{len(cases)} discordant of {len(records)} predictions")


@audit_group.command(name="sample")
@click.option("--run", "run_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
@click.option("--per-direction", type=int, default=20)
def audit_sample(run_path, seed, per_direction):
    """Stratified sample of discordant cases (up to 20 per direction per bin)."""
    run = _run_dir(run_path)
    cases = load_discordant(run.require("audit", "discordant.csv"))
    sample = stratified_sample(cases, per_bin=2 * per_direction,
                               per_direction=per_direction, seed=seed)
    save_sample(sample, run.path("audit", "sampled.csv"),
                run.path("audit", "sample_meta.json"))
    run.record(run.path("audit", "sampled.csv"), run.path("audit", "sample_meta.json"))
    shortfalls = ", ".join(f"{b}/{d}" for b, d in sample.shortfalls) or "none"
    click.echo(f"sampled {len(sample.cases)} cases; shortfall strata: {shortfalls}")


@audit_group.command(name="packets")
@click.option("--run", "run_path", required=True, type=click.Path())
@click.option("--seed", type=int, default=42)
def audit_packets(run_path, seed):
    """Build blinded review packets and the restricted token map."""
    run = _run_dir(run_path)
    sampled = load_discordant(run.require("audit", "sampled.csv"))
    encounters = read_tables(run.path("data"))
    history = PatientHistory(encounters)
    by_id = {e.encounter_id: e for e in encounters}
    from .audit import StratifiedSample

    sample = StratifiedSample(cases=sampled)
    packets, token_map = build_review_packets(sample, by_id, history, seed=seed)
    save_packets(packets, run.path("audit", "packets.jsonl"))
    save_token_map(token_map, run.path("audit", "token_map.csv"))
    run.record(run.path("audit", "packets.jsonl"), run.path("audit", "token_map.csv"))
    click.echo(f"{len(packets)} blinded packets written (order randomized)")


@audit_group.command(name="rates")
@click.option("--run", "run_path", required=True, type=click.Path())
@click.option("--judgments", "judgments_path", type=click.Path(), default=None,
              help="Reviewer log (jsonl). Mutually exclusive with --oracle.")
@click.option("--oracle", is_flag=True,
              help="Use the planted-truth ledger as the reviewer.")
@click.option("--reviewers", "n_reviewers", type=int, default=1,
              help="Oracle reviewer count.")
def audit_rates(run_path, judgments_path, oracle, n_reviewers):
    """Per-bin coder-wrong rates with Wilson 95% intervals."""
    run = _run_dir(run_path)
    if oracle == (judgments_path is not None):
        raise ValidationError("provide exactly one of --oracle or --judgments")
    sampled = load_discordant(run.require("audit", "sampled.csv"))
    token_map = load_token_map(run.require("audit", "token_map.csv"))
    cases_by_id = {c.encounter_id: c for c in sampled}
    cases_by_token = {tok: cases_by_id[eid] for tok, eid in token_map.items()}
    if oracle:
        ledger = ErrorLedger.load(run.require("data", "error_ledger.csv"))
        judgments = oracle_judgments(
            token_map, ledger,
            reviewers=tuple(f"oracle-{i+1}" for i in range(n_reviewers)),
        )
    else:
        judgments = load_judgments(judgments_path)
    agreements = agreement_rates(judgments, cases_by_token)
    save_rates(agreements, run.path("audit", "rates.json"))
    run.record(run.path("audit", "rates.json"))
    for bin_name, a in sorted(agreements.items()):
        lo, hi = a.interval
        click.echo(f"{bin_name}: coders wrong {a.coders_wrong}/{a.reviewed} "
                   f"= {a.rate:.3f} [95% {lo:.3f}, {hi:.3f}] "
                   f"low-confidence {a.low_confidence_fraction:.2f}")


@audit_group.command(name="project")
@click.option("--run", "run_path", required=True, type=click.Path())
def audit_project(run_path):
    """Project per-bin rates onto all discordant cases -> estimate.json."""
    run = _run_dir(run_path)
    cases = load_discordant(run.require("audit", "discordant.csv"))
    agreements = load_rates(run.require("audit", "rates.json"))
    meta = json.loads(run.require("audit", "audit_meta.json").read_text())
    bin_counts, bin_rates, direction_splits = weighted_bin_rates(cases, agreements)
    intervals = {b: a.interval for b, a in agreements.items()}
    estimate = project_prevalence(bin_counts, bin_rates, direction_splits,
                                  n_total=meta["n_total"], bin_intervals=intervals)
    _write_json(run.path("audit", "estimate.json"), estimate.to_json())
    run.record(run.path("audit", "estimate.json"))
    click.echo(f"projected incorrect: {estimate.projected_incorrect:.1f} "
               f"({estimate.projected_total_rate:.4f} of population; "
               f"missing {estimate.projected_missing_rate:.4f}, "
               f"false {estimate.projected_false_rate:.4f})")


# --- serve -------------------------------------------------------------------------


@cli.command()
@click.option("--config", "config_path", required=True, type=click.Path(exists=True))
@click.option("--port", type=int, default=None, help="Override the config port.")
@click.option("--owner", is_flag=True, help="Enable owner endpoints (/export, bin counts).")
def serve(config_path, port, owner):
    """Run the blinded review API until interrupted."""
    from .server import ServerConfig, serve as run_server

    config = ServerConfig.from_file(config_path, owner_mode=owner, port=port)
    click.echo(f"serving {config.packets_path} on {config.host}:{config.port}")
    run_server(config)


# --- report ---------------------------------------------------------------------


@cli.command()
@click.option("--run", "run_path", required=True, type=click.Path())
def report(run_path):
    """Assemble the comparison table and figure-style CSVs; verifies hashes."""
    run = _run_dir(run_path)
    problems = run.verify()
    if problems:
        raise ValidationError("manifest verification failed: " + "; ".join(problems))
    rows = []
    for name in ("dnn", "logistic", "linear_svm"):
        summary_path = run.path("metrics", name, "summary.csv")
        if not summary_path.exists():
            raise ValidationError(
                f"missing metrics for {name!r}; run `evaluate --model {name}` first"
            )
        values = {}
        with open(summary_path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                values[row["metric"]] = row["value"]
        rows.append([name, values["precision"], values["recall"], values["f1"],
                     values["auroc"], values["average_precision"]])
    out = run.path("report", "comparison.csv")
    with open(out, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["algorithm", "precision", "recall", "f1", "auroc", "ap"])
        writer.writerows(rows)
    written = [out]

    rates_path = run.path("audit", "rates.json")
    if rates_path.exists():
        agreements = load_rates(rates_path)
        fig2a = run.path("report", "bin_rates.csv")
        with open(fig2a, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["bin", "reviewed", "coders_wrong_rate", "ci_low", "ci_high",
                             "low_confidence_fraction"])
            for bin_name, a in sorted(agreements.items()):
                writer.writerow([bin_name, a.reviewed, repr(a.rate), repr(a.interval[0]),
                                 repr(a.interval[1]), repr(a.low_confidence_fraction)])
        written.append(fig2a)
    facilities = run.path("metrics", "facilities.csv")
    if facilities.exists():
        import shutil

        fig2b = run.path("report", "facility_f1.csv")
        shutil.copyfile(facilities, fig2b)
        written.append(fig2b)
    run.record(*written)
    click.echo(f"report written to {run.path('report')}")


def main(argv=None) -> int:
    try:
        cli.main(args=argv, standalone_mode=False)
        return 0
    except click.exceptions.Abort:
        return 1
    except click.ClickException as exc:
        exc.show()
        return 1
    except PhenoAuditError as exc:
        click.echo(f"error: {exc}", err=True)
        return 1
    except Exception as exc:  # pragma: no cover - defensive
        click.echo(f"internal error: {type(exc).__name__}: {exc}", err=True)
        return 2


if __name__ == "__main__":
    sys.exit(main())
