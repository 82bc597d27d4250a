"""Discordance analysis and miscoding projection.

Pipeline: bin every prediction by model confidence, keep the cases where the
coder label disagrees with the thresholded model (coded != p > 0.5), sample
up to 20 cases per direction per bin, build blinded review packets, ingest
reviewer verdicts, compute per-bin coder-wrong rates with Wilson 95%
intervals, and project those rates onto all discordant cases to estimate the
population miscoding rate.

Confidence bins partition [0,1] exactly:

* High:   p < 0.15 or p > 0.85
* Medium: 0.15 <= p < 0.30 or 0.70 < p <= 0.85
* Low:    0.30 <= p <= 0.70

Blinding: packets carry demographics, lab aggregates, medication names and a
prior-encounter summary - never the model probability, the confidence bin,
the disagreement direction, or any diabetes diagnosis code (prior diabetes
coding is summarized as a boolean). Case ids are replaced by opaque tokens;
only the token map, written with owner-only permissions, can unblind them.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .features import LAB_FIELDS, PatientHistory, aggregate_lab
from .metrics import PredictionRecord
from .rng import derive_rng, derive_token
from .store import DiabetesCodeSet, EncounterRecord
from .synth import ErrorLedger

BIN_HIGH = "High"
BIN_MEDIUM = "Medium"
BIN_LOW = "Low"
BINS = (BIN_HIGH, BIN_MEDIUM, BIN_LOW)

DIR_CODED = "coded_but_model_negative"
DIR_UNCODED = "uncoded_but_model_positive"
DIRECTIONS = (DIR_CODED, DIR_UNCODED)

VERDICT_DIABETIC = "diabetic"
VERDICT_NOT_DIABETIC = "not_diabetic"
VERDICTS = (VERDICT_DIABETIC, VERDICT_NOT_DIABETIC)

CONFIDENCES = ("high", "low")

Z_95 = 1.959963984540054


def assign_bin(p: float) -> str:
    """Map a probability to its confidence bin (exact partition of [0,1])."""
    if not (isinstance(p, (int, float)) and math.isfinite(p) and 0.0 <= p <= 1.0):
        raise ValidationError(f"probability outside [0,1]: {p!r}")
    if p < 0.15 or p > 0.85:
        return BIN_HIGH
    if 0.15 <= p < 0.30 or 0.70 < p <= 0.85:
        return BIN_MEDIUM
    return BIN_LOW


@dataclass(frozen=True)
class DiscordantCase:
    encounter_id: str
    p: float
    coded: bool
    direction: str
    bin: str


def find_discordant(records: list[PredictionRecord]) -> list[DiscordantCase]:
    """Exactly the records with coded != (p > 0.5), with direction and bin."""
    cases = []
    for r in records:
        model_positive = r.p > 0.5
        if r.coded == model_positive:
            continue
        direction = DIR_CODED if r.coded else DIR_UNCODED
        cases.append(DiscordantCase(r.encounter_id, r.p, r.coded, direction, assign_bin(r.p)))
    return cases


@dataclass
class StratifiedSample:
    cases: list[DiscordantCase]
    stratum_sizes: dict = field(default_factory=dict)   # (bin, dir) -> population
    stratum_taken: dict = field(default_factory=dict)   # (bin, dir) -> sampled
    shortfalls: list = field(default_factory=list)      # (bin, dir) strata smaller than quota


def stratified_sample(
    cases: list[DiscordantCase],
    per_bin: int = 40,
    per_direction: int = 20,
    seed: int = 0,
) -> StratifiedSample:
    """Per (bin, direction) stratum, sample uniformly without replacement.

    Quota is ``per_direction`` per stratum (``per_bin`` is its 2-direction
    total, kept for protocol clarity); smaller strata are taken whole and
    flagged as shortfalls.
    """
    if per_direction * 2 != per_bin:
        raise ValidationError("per_bin must equal 2 * per_direction")
    rng = derive_rng(seed, "audit-sample")
    out = StratifiedSample(cases=[])
    for bin_name in BINS:
        for direction in DIRECTIONS:
            stratum = [c for c in cases if c.bin == bin_name and c.direction == direction]
            stratum.sort(key=lambda c: c.encounter_id)
            key = (bin_name, direction)
            out.stratum_sizes[key] = len(stratum)
            if len(stratum) <= per_direction:
                taken = list(stratum)
                if len(stratum) < per_direction:
                    out.shortfalls.append(key)
            else:
                idx = rng.choice(len(stratum), size=per_direction, replace=False)
                taken = [stratum[i] for i in sorted(idx)]
            out.stratum_taken[key] = len(taken)
            out.cases.extend(taken)
    return out


# --- blinded packets ----------------------------------------------------------


def make_review_packet(
    case: DiscordantCase,
    encounter: EncounterRecord,
    history: PatientHistory,
    token: str,
    code_set: DiabetesCodeSet | None = None,
) -> dict:
    """Build one blinded packet: case evidence only, no model or coder fields.

    Lab statistics are rounded to 2 decimals (model probabilities are always
    rendered with 3, so a value scan cannot collide). Prior diabetes coding is
    reduced to a boolean; prior diabetes code strings never appear.
    """
    if encounter.encounter_id != case.encounter_id:
        raise ValidationError("packet encounter does not match case")
    code_set = code_set or DiabetesCodeSet.default()

    by_concept: dict[str, list] = {}
    for lab in encounter.labs:
        by_concept.setdefault(lab.test_concept_id, []).append(lab)
    lab_rows = []
    for concept in sorted(by_concept):
        labs = by_concept[concept]
        agg = aggregate_lab(labs)
        row = {
            "name": concept,
            "unit": labs[0].unit,
            "range_low": None if labs[0].range_low is None else round(labs[0].range_low, 2),
            "range_high": None if labs[0].range_high is None else round(labs[0].range_high, 2),
        }
        for field_name in LAB_FIELDS:
            value = getattr(agg, field_name)
            row[field_name] = round(value, 2) if isinstance(value, float) else value
        lab_rows.append(row)

    prior_codes = sorted(
        code for code in history.prior_codes(encounter.encounter_id) if code not in code_set
    )
    return {
        "token": token,
        "demographics": {
            "age_years": encounter.age_years,
            "sex": encounter.sex,
            "race": encounter.race,
        },
        "labs": lab_rows,
        "meds": sorted(set(encounter.meds)),
        "observations": sorted(set(encounter.observations)),
        "history": {
            "n_prior_encounters": history.n_prior(encounter.encounter_id),
            "prior_codes": prior_codes,
            "prior_diabetes_coded": history.prior_diabetic(encounter.encounter_id),
        },
    }


def build_review_packets(
    sample: StratifiedSample,
    encounters_by_id: dict[str, EncounterRecord],
    history: PatientHistory,
    seed: int = 0,
    code_set: DiabetesCodeSet | None = None,
) -> tuple[list[dict], dict[str, str]]:
    """Packets in randomized order plus the restricted token -> encounter map."""
    token_map: dict[str, str] = {}
    packets = []
    for i, case in enumerate(sample.cases):
        encounter = encounters_by_id.get(case.encounter_id)
        if encounter is None:
            raise ValidationError(f"cannot resolve encounter {case.encounter_id!r}")
        token = derive_token(seed, "token", i, case.encounter_id)
        token_map[token] = case.encounter_id
        packets.append(make_review_packet(case, encounter, history, token, code_set))
    order = derive_rng(seed, "packet-order").permutation(len(packets))
    return [packets[i] for i in order], token_map


def save_packets(packets: list[dict], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for packet in packets:
            fh.write(json.dumps(packet, sort_keys=True) + "\n")


def load_packets(path) -> list[dict]:
    packets = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                packets.append(json.loads(line))
    return packets


def save_token_map(token_map: dict[str, str], path) -> None:
    """Owner-only file; unblinds tokens back to encounter ids."""
    path = Path(path)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("token,encounter_id\r\n")
        for token in sorted(token_map):
            fh.write(f"{token},{token_map[token]}\r\n")
    try:
        os.chmod(path, 0o600)
    except OSError:
        pass


def load_token_map(path) -> dict[str, str]:
    out = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        if line.strip():
            token, encounter_id = line.split(",", 1)
            out[token] = encounter_id
    return out


def blinding_violations(
    packet: dict,
    p_values: list[float] | None = None,
    code_set: DiabetesCodeSet | None = None,
) -> list[str]:
    """Scan one packet for blinding leaks; returns human-readable findings.

    Checks for forbidden field names, bin/direction label values, diabetes
    code strings anywhere, and 3-decimal renderings of the given model
    probabilities in the serialized text.
    """
    code_set = code_set or DiabetesCodeSet.default()
    findings = []
    forbidden_keys = {"p", "probability", "prob", "bin", "direction", "coded", "verdict"}
    forbidden_values = set(BINS) | set(DIRECTIONS)

    def walk(node, trail):
        if isinstance(node, dict):
            for key, value in node.items():
                if key.lower() in forbidden_keys:
                    findings.append(f"forbidden field {trail}{key}")
                walk(value, f"{trail}{key}.")
        elif isinstance(node, list):
            for i, value in enumerate(node):
                walk(value, f"{trail}{i}.")
        elif isinstance(node, str):
            if node in forbidden_values:
                findings.append(f"forbidden label value at {trail[:-1]}: {node}")
            if node in code_set:
                findings.append(f"diabetes code at {trail[:-1]}: {node}")

    walk(packet, "")
    if p_values:
        text = json.dumps(packet, sort_keys=True)
        for p in p_values:
            needle = f"{p:.3f}"
            if needle in text:
                findings.append(f"model probability {needle} leaked")
    return findings


def save_discordant(cases: list[DiscordantCase], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        fh.write("encounter_id,p,coded,direction,bin\r\n")
        for c in cases:
            fh.write(f"{c.encounter_id},{c.p!r},{int(c.coded)},{c.direction},{c.bin}\r\n")


def load_discordant(path) -> list[DiscordantCase]:
    cases = []
    for line in Path(path).read_text(encoding="utf-8").splitlines()[1:]:
        line = line.rstrip("\r")
        if not line:
            continue
        eid, p, coded, direction, bin_name = line.split(",")
        cases.append(DiscordantCase(eid, float(p), coded == "1", direction, bin_name))
    return cases


def save_sample(sample: StratifiedSample, cases_path, meta_path) -> None:
    save_discordant(sample.cases, cases_path)
    meta = {
        "stratum_sizes": {f"{b}/{d}": n for (b, d), n in sample.stratum_sizes.items()},
        "stratum_taken": {f"{b}/{d}": n for (b, d), n in sample.stratum_taken.items()},
        "shortfalls": [f"{b}/{d}" for b, d in sample.shortfalls],
    }
    Path(meta_path).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def save_rates(agreements: dict[str, BinAgreement], path) -> None:
    payload = {
        b: {
            "reviewed": a.reviewed,
            "coders_wrong": a.coders_wrong,
            "rate": a.rate,
            "interval": list(a.interval),
            "low_confidence_fraction": a.low_confidence_fraction,
            "inconclusive": a.inconclusive,
            "diabetic_rate": a.diabetic_rate,
            "mean_p": a.mean_p,
            "by_direction": a.by_direction,
        }
        for b, a in agreements.items()
    }
    Path(path).write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


def load_rates(path) -> dict[str, BinAgreement]:
    payload = json.loads(Path(path).read_text())
    out = {}
    for b, a in payload.items():
        out[b] = BinAgreement(
            bin=b,
            reviewed=a["reviewed"],
            coders_wrong=a["coders_wrong"],
            rate=a["rate"],
            interval=tuple(a["interval"]),
            low_confidence_fraction=a["low_confidence_fraction"],
            inconclusive=a["inconclusive"],
            diabetic_rate=a["diabetic_rate"],
            mean_p=a["mean_p"],
            by_direction=a["by_direction"],
        )
    return out


# --- judgments and agreement ----------------------------------------------------


@dataclass(frozen=True)
class ReviewJudgment:
    token: str
    reviewer: str
    verdict: str
    confidence: str
    timestamp: int

    def __post_init__(self):
        if self.verdict not in VERDICTS:
            raise ValidationError(f"verdict must be one of {VERDICTS}, got {self.verdict!r}")
        if self.confidence not in CONFIDENCES:
            raise ValidationError(
                f"confidence must be one of {CONFIDENCES}, got {self.confidence!r}"
            )

    def to_json(self) -> dict:
        return {
            "token": self.token,
            "reviewer": self.reviewer,
            "verdict": self.verdict,
            "confidence": self.confidence,
            "timestamp": self.timestamp,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "ReviewJudgment":
        return cls(
            payload["token"],
            payload["reviewer"],
            payload["verdict"],
            payload["confidence"],
            int(payload["timestamp"]),
        )


def load_judgments(path) -> list[ReviewJudgment]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(ReviewJudgment.from_json(json.loads(line)))
    return out


def wilson_interval(k: int, n: int, z: float = Z_95) -> tuple[float, float]:
    """Wilson score interval for a binomial proportion."""
    if n <= 0:
        raise ValidationError("Wilson interval needs n > 0")
    p_hat = k / n
    denom = 1.0 + z * z / n
    center = (p_hat + z * z / (2.0 * n)) / denom
    half = z * math.sqrt(p_hat * (1.0 - p_hat) / n + z * z / (4.0 * n * n)) / denom
    return (max(0.0, center - half), min(1.0, center + half))


@dataclass
class BinAgreement:
    bin: str
    reviewed: int
    coders_wrong: int
    rate: float
    interval: tuple[float, float]
    low_confidence_fraction: float
    inconclusive: int
    diabetic_rate: float            # reviewer-majority diabetes prevalence
    mean_p: float                   # mean model probability over reviewed cases
    by_direction: dict = field(default_factory=dict)  # direction -> {reviewed, wrong, rate}


def agreement_rates(
    judgments: list[ReviewJudgment],
    cases_by_token: dict[str, DiscordantCase],
) -> dict[str, BinAgreement]:
    """Per-bin coder-wrong rates from blinded reviewer verdicts.

    The expert answer per case is the majority verdict across reviewers; even
    splits are inconclusive and excluded (but counted). A coder is wrong when
    the expert answer contradicts the coded label. Bins with zero reviewed
    cases are absent from the result, never reported as zero.
    """
    per_case: dict[str, list[ReviewJudgment]] = {}
    for judgment in judgments:
        if judgment.token not in cases_by_token:
            raise ValidationError(f"judgment references unknown case token {judgment.token!r}")
        per_case.setdefault(judgment.token, []).append(judgment)

    stats: dict[str, dict] = {
        b: {
            "reviewed": 0,
            "wrong": 0,
            "low_conf": 0,
            "judgments": 0,
            "inconclusive": 0,
            "diabetic": 0,
            "p_sum": 0.0,
            "dirs": {d: {"reviewed": 0, "wrong": 0} for d in DIRECTIONS},
        }
        for b in BINS
    }
    for token, case_judgments in per_case.items():
        case = cases_by_token[token]
        bin_stats = stats[case.bin]
        bin_stats["judgments"] += len(case_judgments)
        bin_stats["low_conf"] += sum(1 for j in case_judgments if j.confidence == "low")
        n_diabetic = sum(1 for j in case_judgments if j.verdict == VERDICT_DIABETIC)
        n_not = len(case_judgments) - n_diabetic
        if n_diabetic == n_not:
            bin_stats["inconclusive"] += 1
            continue
        expert_diabetic = n_diabetic > n_not
        coder_wrong = expert_diabetic != case.coded
        bin_stats["reviewed"] += 1
        bin_stats["p_sum"] += case.p
        if expert_diabetic:
            bin_stats["diabetic"] += 1
        if coder_wrong:
            bin_stats["wrong"] += 1
        dir_stats = bin_stats["dirs"][case.direction]
        dir_stats["reviewed"] += 1
        if coder_wrong:
            dir_stats["wrong"] += 1

    out: dict[str, BinAgreement] = {}
    for bin_name, s in stats.items():
        if s["reviewed"] == 0:
            continue
        by_direction = {}
        for direction, d in s["dirs"].items():
            if d["reviewed"]:
                by_direction[direction] = {
                    "reviewed": d["reviewed"],
                    "wrong": d["wrong"],
                    "rate": d["wrong"] / d["reviewed"],
                }
        out[bin_name] = BinAgreement(
            bin=bin_name,
            reviewed=s["reviewed"],
            coders_wrong=s["wrong"],
            rate=s["wrong"] / s["reviewed"],
            interval=wilson_interval(s["wrong"], s["reviewed"]),
            low_confidence_fraction=s["low_conf"] / s["judgments"] if s["judgments"] else 0.0,
            inconclusive=s["inconclusive"],
            diabetic_rate=s["diabetic"] / s["reviewed"],
            mean_p=s["p_sum"] / s["reviewed"],
            by_direction=by_direction,
        )
    return out


# --- projection -----------------------------------------------------------------


@dataclass
class PrevalenceEstimate:
    n_total: int
    n_discordant: int
    bin_counts: dict
    bin_rates: dict
    bin_intervals: dict
    projected_incorrect: float
    projected_total_rate: float
    projected_missing: float
    projected_false: float
    projected_missing_rate: float
    projected_false_rate: float
    detail: dict = field(default_factory=dict)

    def to_json(self) -> dict:
        return {
            "n_total": self.n_total,
            "n_discordant": self.n_discordant,
            "bin_counts": self.bin_counts,
            "bin_rates": self.bin_rates,
            "bin_intervals": {b: list(v) for b, v in self.bin_intervals.items()},
            "projected_incorrect": self.projected_incorrect,
            "projected_total_rate": self.projected_total_rate,
            "projected_missing": self.projected_missing,
            "projected_false": self.projected_false,
            "projected_missing_rate": self.projected_missing_rate,
            "projected_false_rate": self.projected_false_rate,
            "detail": self.detail,
        }


def project_prevalence(
    bin_counts: dict[str, int],
    bin_rates: dict[str, float],
    direction_splits: dict[str, dict],
    n_total: int,
    bin_intervals: dict[str, tuple] | None = None,
) -> PrevalenceEstimate:
    """Project per-bin coder-wrong rates onto all discordant cases.

    ``direction_splits`` maps bin -> direction -> {"count": population count,
    "rate": direction-specific wrong rate}. The projected incorrect count is
    sum(count_bin * rate_bin); the missing/false split prorates each bin's
    projection by the direction-specific products (uncoded-direction wrongs
    are missing codes; coded-direction wrongs are false codes). When a
    direction stratum was unreviewed, the bin-level rate substitutes.
    """
    if n_total <= 0:
        raise ValidationError("n_total must be positive")
    missing_rates = [b for b, c in bin_counts.items() if c > 0 and b not in bin_rates]
    if missing_rates:
        raise ValidationError(f"no reviewed rate for non-empty bins: {sorted(missing_rates)}")

    projected = 0.0
    missing_part = 0.0
    false_part = 0.0
    per_bin_detail = {}
    for bin_name, count in bin_counts.items():
        if count == 0:
            continue
        rate = bin_rates[bin_name]
        if not 0.0 <= rate <= 1.0:
            raise ValidationError(f"rate for bin {bin_name} outside [0,1]")
        bin_projection = count * rate
        projected += bin_projection

        dirs = direction_splits.get(bin_name, {})
        weights = {}
        for direction in DIRECTIONS:
            d = dirs.get(direction)
            d_count = d.get("count", 0) if d else 0
            d_rate = d.get("rate") if d and d.get("rate") is not None else rate
            weights[direction] = d_count * d_rate
        total_weight = sum(weights.values())
        if total_weight > 0:
            miss_share = weights[DIR_UNCODED] / total_weight
        else:
            miss_share = 0.0
        missing_part += bin_projection * miss_share
        false_part += bin_projection * (1.0 - miss_share)
        per_bin_detail[bin_name] = {
            "count": count,
            "rate": rate,
            "projection": bin_projection,
            "missing_share": miss_share,
        }

    n_discordant = sum(bin_counts.values())
    return PrevalenceEstimate(
        n_total=n_total,
        n_discordant=n_discordant,
        bin_counts=dict(bin_counts),
        bin_rates=dict(bin_rates),
        bin_intervals=dict(bin_intervals or {}),
        projected_incorrect=projected,
        projected_total_rate=projected / n_total,
        projected_missing=missing_part,
        projected_false=false_part,
        projected_missing_rate=missing_part / n_total,
        projected_false_rate=false_part / n_total,
        detail={"per_bin": per_bin_detail},
    )


def weighted_bin_rates(
    cases: list[DiscordantCase],
    agreements: dict[str, BinAgreement],
) -> tuple[dict, dict, dict]:
    """Population bin counts plus direction-weighted projection inputs.

    The bin-level projection rate reweights the sampled direction-specific
    rates by each direction's *population* share within the bin, correcting
    for the equal-per-direction sampling design.
    """
    bin_counts = {b: 0 for b in BINS}
    dir_counts = {b: {d: 0 for d in DIRECTIONS} for b in BINS}
    for case in cases:
        bin_counts[case.bin] += 1
        dir_counts[case.bin][case.direction] += 1

    bin_rates = {}
    direction_splits = {}
    for bin_name in BINS:
        if bin_counts[bin_name] == 0:
            continue
        agreement = agreements.get(bin_name)
        if agreement is None:
            continue
        splits = {}
        weighted = 0.0
        for direction in DIRECTIONS:
            count = dir_counts[bin_name][direction]
            d = agreement.by_direction.get(direction)
            rate = d["rate"] if d else agreement.rate
            splits[direction] = {"count": count, "rate": rate}
            weighted += count * rate
        bin_rates[bin_name] = weighted / bin_counts[bin_name]
        direction_splits[bin_name] = splits
    return bin_counts, bin_rates, direction_splits


# --- oracle reviewer --------------------------------------------------------------


def oracle_judgments(
    token_map: dict[str, str],
    ledger: ErrorLedger,
    reviewers: tuple[str, ...] = ("oracle-1",),
) -> list[ReviewJudgment]:
    """Planted-truth reviewer: verdicts read straight from the error ledger.

    Timestamps are deterministic (sequence numbers) so oracle-driven pipeline
    runs stay byte-identical across repeats.
    """
    out = []
    t = 0
    for token in sorted(token_map):
        entry = ledger[token_map[token]]
        verdict = VERDICT_DIABETIC if entry.true_diabetic else VERDICT_NOT_DIABETIC
        for reviewer in reviewers:
            out.append(ReviewJudgment(token, reviewer, verdict, "high", t))
            t += 1
    return out
