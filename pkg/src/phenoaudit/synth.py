"""Deterministic synthetic EHR cohorts with planted ground truth.

Stands in for the proprietary inpatient data: emits the five-table encounter
bundle plus an error ledger recording, for every encounter, its true diabetes
status, the coder-assigned status, and which planted error (if any) separates
the two.

The generative story, per patient:

* true diabetes is a patient-level Bernoulli at the configured prevalence;
  diabetic patients carry a severity in (0,1] that scales how visible the
  disease is. Severity is bimodal: an ``occult_fraction`` of diabetics is
  nearly invisible (severity ~ 0), the rest draw from [0.55, 1] with mass
  toward 1 - so the disease is either hidden or clearly expressed;
* a ``confusable_fraction`` of non-diabetic patients presents diabetes-like
  evidence (stress hyperglycemia, prediabetes on metformin): partial lab
  shifts and occasional metformin orders scaled by a pseudo-severity in
  [0.18, 0.45];
* lab values draw from normal distributions; disease shifts the glucose,
  HbA1c and creatinine means by ``signal_strength * severity * max_shift``,
  so the separability knob interpolates linearly between no signal and a
  documented maximum;
* diabetic patients are more likely to have HbA1c ordered and to receive
  diabetes medications; everyone accrues background meds, observations and
  non-diabetes diagnosis codes;
* facilities add per-lab additive offsets to values *and* reference ranges
  (a calibration-style batch effect), scale order probabilities, and scale
  the global coder-error rates.

Coder errors are planted i.i.d. per encounter. The configured rates are
fractions of the *total* encounter population (the convention in which a
5.68% missing rate plus a 3.39% false-code rate plant ~9.07% total error);
they are converted internally to per-encounter conditional flip
probabilities by dividing by the empirical class fraction, then scaled by
the facility multiplier and capped at 1.

Everything derives from one 64-bit seed through named substreams, so equal
(config, seed) reproduces byte-identical table files.
"""

from __future__ import annotations

import configparser
import csv
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ValidationError
from .rng import derive_rng
from .store import DiabetesCodeSet, EncounterRecord, LabResult, write_tables

# --- catalogs ---------------------------------------------------------------


@dataclass(frozen=True)
class LabSpec:
    concept: str
    unit: str
    mean: float
    sd: float
    range_low: float
    range_high: float
    diabetic_shift: float  # added at signal_strength=1, severity=1
    order_p: float
    diabetic_order_boost: float = 0.0  # relative bump when diabetes suspected
    confusable_factor: float = 0.0     # fraction of the shift confusables show


LAB_CATALOG = (
    LabSpec("LAB:glucose", "mg/dL", 95.0, 15.0, 70.0, 110.0, 85.0, 0.92, 0.0, 1.0),
    LabSpec("LAB:hba1c", "%", 5.3, 0.45, 4.0, 5.7, 2.9, 0.30, 1.6, 0.55),
    LabSpec("LAB:creatinine", "mg/dL", 1.0, 0.22, 0.6, 1.3, 0.18, 0.88, 0.0, 0.8),
    LabSpec("LAB:sodium", "mmol/L", 140.0, 3.0, 135.0, 145.0, 0.0, 0.85),
    LabSpec("LAB:wbc", "10^3/uL", 7.5, 2.0, 4.0, 11.0, 0.0, 0.80),
)

# (concept, p_if_diabetic scaled by severity*signal, p_otherwise)
MED_CATALOG = (
    ("RX:metformin", 0.55, 0.012),
    ("RX:insulin", 0.38, 0.006),
    ("RX:lisinopril", 0.34, 0.24),
    ("RX:atorvastatin", 0.38, 0.28),
    ("RX:aspirin", 0.42, 0.40),
    ("RX:omeprazole", 0.20, 0.20),
)

OBS_CATALOG = (
    ("OBS:bmi_obese", 0.45, 0.24),
    ("OBS:smoker", 0.20, 0.20),
    ("OBS:former_smoker", 0.26, 0.26),
)

BACKGROUND_CONDITIONS = (
    ("I10", 0.52, 0.42),       # hypertension
    ("E78.5", 0.44, 0.33),     # hyperlipidemia
    ("N18.3", 0.16, 0.07),     # chronic kidney disease
    ("J44.9", 0.12, 0.12),     # COPD
    ("I25.10", 0.18, 0.14),    # coronary artery disease
    ("M54.5", 0.10, 0.10),     # low back pain
    ("J18.9", 0.09, 0.09),     # pneumonia
)

# codes assigned when an encounter is coded diabetic, with pick weights
DIABETES_CODE_CHOICES = (("E11.9", 0.55), ("E11.65", 0.15), ("250.00", 0.20), ("E10.9", 0.10))

RACE_CHOICES = (("white", 0.60), ("black", 0.15), ("hispanic", 0.12), ("asian", 0.08), ("other", 0.05))

_FIRST_ADMIT_EPOCH = 1262304000  # 2010-01-01T00:00:00Z
_ADMIT_WINDOW_DAYS = 4 * 365


# --- configuration ----------------------------------------------------------


@dataclass(frozen=True)
class EncounterCountSpec:
    """Truncated geometric distribution over encounters per patient."""

    min: int = 1
    max: int = 8
    mean: float = 1.4

    def validate(self):
        if self.min < 1 or self.max < self.min:
            raise ValidationError("encounters_per_patient: need 1 <= min <= max")
        if self.mean < 1.0:
            raise ValidationError("encounters_per_patient: mean must be >= 1")


@dataclass(frozen=True)
class FacilityProfile:
    facility_id: str
    reference_range_shift: dict = field(default_factory=dict)  # lab concept -> offset
    order_propensity: dict = field(default_factory=dict)       # lab concept -> probability
    coder_error_multiplier: float = 1.0

    def validate(self):
        if not self.facility_id:
            raise ValidationError("facility_id must be non-empty")
        if self.coder_error_multiplier <= 0:
            raise ValidationError(
                f"facility {self.facility_id}: coder_error_multiplier must be > 0"
            )
        for lab, p in self.order_propensity.items():
            if not 0.0 <= p <= 1.0:
                raise ValidationError(
                    f"facility {self.facility_id}: order_propensity[{lab}] outside [0,1]"
                )


@dataclass(frozen=True)
class CoderErrorConfig:
    """Planted error rates, expressed as fractions of all encounters.

    ``miss_rate`` is the fraction of encounters that are truly diabetic but
    carry no diabetes code; ``false_code_rate`` the fraction that are not
    diabetic yet carry one. Defaults plant ~9.07% total error.
    """

    miss_rate: float = 0.0568
    false_code_rate: float = 0.0339

    def validate(self):
        for name in ("miss_rate", "false_code_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValidationError(f"coder_error.{name} must lie in [0,1], got {v}")


def default_facility_profiles(n: int = 5) -> list[FacilityProfile]:
    """Five mildly different synthetic facilities (shift, ordering, coding)."""
    shifts = (0.0, 4.0, -3.0, 6.0, -5.0)
    order_scale = (1.0, 0.94, 1.0, 0.88, 0.97)
    multipliers = (1.0, 1.2, 0.85, 1.1, 0.9)
    profiles = []
    for i in range(n):
        j = i % 5
        glucose_shift = shifts[j]
        profiles.append(
            FacilityProfile(
                facility_id=f"F{i + 1:02d}",
                reference_range_shift={
                    "LAB:glucose": glucose_shift,
                    "LAB:sodium": glucose_shift / 4.0,
                },
                order_propensity={
                    lab.concept: min(1.0, lab.order_p * order_scale[j])
                    for lab in LAB_CATALOG
                },
                coder_error_multiplier=multipliers[j],
            )
        )
    return profiles


@dataclass(frozen=True)
class CohortConfig:
    n_patients: int = 14300
    encounters_per_patient: EncounterCountSpec = field(default_factory=EncounterCountSpec)
    true_prevalence: float = 0.30
    facility_profiles: tuple = ()
    coder_error: CoderErrorConfig = field(default_factory=CoderErrorConfig)
    signal_strength: float = 0.95
    seed: int = 42
    min_age_years: int = 50
    occult_fraction: float = 0.008
    confusable_fraction: float = 0.015
    confusable_band: tuple = (0.18, 0.45)  # pseudo-severity range

    def __post_init__(self):
        if not self.facility_profiles:
            object.__setattr__(self, "facility_profiles", tuple(default_facility_profiles()))

    def validate(self):
        if self.n_patients < 1:
            raise ValidationError(f"n_patients must be >= 1, got {self.n_patients}")
        if not 0.0 <= self.true_prevalence <= 1.0:
            raise ValidationError(
                f"true_prevalence must lie in [0,1], got {self.true_prevalence}"
            )
        if not 0.0 <= self.signal_strength <= 1.0:
            raise ValidationError(
                f"signal_strength must lie in [0,1], got {self.signal_strength}"
            )
        if not 0.0 <= self.occult_fraction <= 1.0:
            raise ValidationError("occult_fraction must lie in [0,1]")
        if not 0.0 <= self.confusable_fraction <= 1.0:
            raise ValidationError("confusable_fraction must lie in [0,1]")
        lo, hi = self.confusable_band
        if not 0.0 <= lo <= hi <= 1.0:
            raise ValidationError("confusable_band must satisfy 0 <= lo <= hi <= 1")
        if self.min_age_years < 0:
            raise ValidationError("min_age_years must be >= 0")
        if not self.facility_profiles:
            raise ValidationError("at least one facility profile required")
        self.encounters_per_patient.validate()
        self.coder_error.validate()
        for profile in self.facility_profiles:
            profile.validate()


# --- error ledger -----------------------------------------------------------

ERROR_NONE = "none"
ERROR_MISSING = "missing"
ERROR_FALSE_CODE = "false_code"


@dataclass(frozen=True)
class LedgerEntry:
    encounter_id: str
    true_diabetic: bool
    coded_diabetic: bool
    error_kind: str


class ErrorLedger:
    """Per-encounter reconciliation of true vs coded diabetes status."""

    def __init__(self, entries: list[LedgerEntry]):
        for e in entries:
            expected = (
                ERROR_MISSING
                if e.true_diabetic and not e.coded_diabetic
                else ERROR_FALSE_CODE
                if e.coded_diabetic and not e.true_diabetic
                else ERROR_NONE
            )
            if e.error_kind != expected:
                raise ValidationError(
                    f"ledger entry {e.encounter_id}: error_kind {e.error_kind!r} "
                    f"inconsistent with labels"
                )
        self.entries = list(entries)
        self._by_id = {e.encounter_id: e for e in self.entries}

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, encounter_id: str) -> LedgerEntry:
        return self._by_id[encounter_id]

    def __contains__(self, encounter_id: str) -> bool:
        return encounter_id in self._by_id

    def counts(self) -> dict:
        n_missing = sum(1 for e in self.entries if e.error_kind == ERROR_MISSING)
        n_false = sum(1 for e in self.entries if e.error_kind == ERROR_FALSE_CODE)
        return {
            "total": len(self.entries),
            "missing": n_missing,
            "false_code": n_false,
            "errors": n_missing + n_false,
        }

    def planted_rates(self) -> dict:
        c = self.counts()
        n = max(1, c["total"])
        return {
            "missing_rate": c["missing"] / n,
            "false_code_rate": c["false_code"] / n,
            "total_rate": c["errors"] / n,
        }

    def save(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.writer(fh)
            writer.writerow(["encounter_id", "true_diabetic", "coded_diabetic", "error_kind"])
            for e in self.entries:
                writer.writerow(
                    [e.encounter_id, int(e.true_diabetic), int(e.coded_diabetic), e.error_kind]
                )

    @classmethod
    def load(cls, path) -> "ErrorLedger":
        entries = []
        with open(path, newline="", encoding="utf-8") as fh:
            for row in csv.DictReader(fh):
                entries.append(
                    LedgerEntry(
                        row["encounter_id"],
                        row["true_diabetic"] == "1",
                        row["coded_diabetic"] == "1",
                        row["error_kind"],
                    )
                )
        return cls(entries)


# --- label corruption --------------------------------------------------------


def plant_coder_errors(
    true_labels: list[tuple[str, str, bool]],
    error_config: CoderErrorConfig,
    facility_profiles,
    seed: int,
) -> tuple[dict[str, bool], ErrorLedger]:
    """Flip labels i.i.d. per encounter; returns coded labels plus the ledger.

    ``true_labels`` is a list of (encounter_id, facility_id, true_diabetic).
    Population-level target rates are converted to conditional Bernoulli
    probabilities (rate * facility_multiplier / class_fraction, capped at 1).
    """
    error_config.validate()
    multipliers = {p.facility_id: p.coder_error_multiplier for p in facility_profiles}
    for _, fac, _ in true_labels:
        if fac not in multipliers:
            raise ValidationError(f"unknown facility in labels: {fac!r}")

    n = len(true_labels)
    n_pos = sum(1 for _, _, t in true_labels if t)
    pos_frac = n_pos / n if n else 0.0
    neg_frac = 1.0 - pos_frac

    rng = derive_rng(seed, "coder-errors")
    coded: dict[str, bool] = {}
    entries: list[LedgerEntry] = []
    for encounter_id, facility_id, true_diabetic in true_labels:
        mult = multipliers[facility_id]
        if true_diabetic:
            p_flip = (
                min(1.0, error_config.miss_rate * mult / pos_frac) if pos_frac > 0 else 0.0
            )
            flip = rng.random() < p_flip
            coded_flag = not flip
            kind = ERROR_MISSING if flip else ERROR_NONE
        else:
            p_flip = (
                min(1.0, error_config.false_code_rate * mult / neg_frac)
                if neg_frac > 0
                else 0.0
            )
            flip = rng.random() < p_flip
            coded_flag = flip
            kind = ERROR_FALSE_CODE if flip else ERROR_NONE
        coded[encounter_id] = coded_flag
        entries.append(LedgerEntry(encounter_id, true_diabetic, coded_flag, kind))
    return coded, ErrorLedger(entries)


# --- cohort generation -------------------------------------------------------


def _truncated_geometric(rng, spec: EncounterCountSpec) -> int:
    if spec.max == spec.min:
        return spec.min
    extra_mean = max(1e-9, spec.mean - spec.min)
    p = min(1.0, 1.0 / (1.0 + extra_mean))
    k = spec.min + int(rng.geometric(p)) - 1
    return min(spec.max, k)


def _weighted_choice(rng, choices):
    values = [c[0] for c in choices]
    weights = [c[1] for c in choices]
    total = sum(weights)
    x = rng.random() * total
    acc = 0.0
    for v, w in zip(values, weights):
        acc += w
        if x < acc:
            return v
    return values[-1]


def generate_cohort(config: CohortConfig) -> tuple[list[EncounterRecord], ErrorLedger]:
    """Generate the full encounter list plus its planted-truth ledger."""
    config.validate()
    seed = config.seed
    profiles = list(config.facility_profiles)
    signal = config.signal_strength

    encounters: list[EncounterRecord] = []
    truth: list[tuple[str, str, bool]] = []
    severity_by_patient: dict[str, float] = {}

    for p_idx in range(config.n_patients):
        rng = derive_rng(seed, "patient", p_idx)
        patient_id = f"P{p_idx:07d}"
        profile = profiles[int(rng.integers(0, len(profiles)))]
        sex = "F" if rng.random() < 0.5 else "M"
        race = _weighted_choice(rng, RACE_CHOICES)
        age0 = int(config.min_age_years + rng.integers(0, 41))
        diabetic = bool(rng.random() < config.true_prevalence)
        # disease expression is bimodal: occult cases look normal, the rest
        # sit well above the ambiguity band
        severity = 0.0
        pseudo = 0.0
        if diabetic:
            if rng.random() < config.occult_fraction:
                severity = float(rng.uniform(0.0, 0.05))
            else:
                severity = 0.55 + 0.45 * float(rng.beta(2.2, 1.3))
        elif rng.random() < config.confusable_fraction:
            lo, hi = config.confusable_band
            pseudo = lo + (hi - lo) * float(rng.beta(1.4, 1.4))
        severity_by_patient[patient_id] = severity

        n_enc = _truncated_geometric(rng, config.encounters_per_patient)
        admit = _FIRST_ADMIT_EPOCH + int(rng.integers(0, _ADMIT_WINDOW_DAYS)) * 86400
        for e_idx in range(n_enc):
            encounter_id = f"E{p_idx:07d}-{e_idx}"
            age = age0 + (admit - _FIRST_ADMIT_EPOCH) // (365 * 86400)
            enc = EncounterRecord(
                encounter_id=encounter_id,
                patient_id=patient_id,
                facility_id=profile.facility_id,
                admit_time=admit,
                age_years=age,
                sex=sex,
                race=race,
            )
            strength = signal * severity
            suspicion = max(strength, signal * pseudo)
            for lab in LAB_CATALOG:
                order_p = profile.order_propensity.get(lab.concept, lab.order_p)
                if lab.diabetic_order_boost > 0.0 and suspicion > 0.0:
                    order_p = min(1.0, order_p * (1.0 + lab.diabetic_order_boost * suspicion))
                if rng.random() >= order_p:
                    continue
                shift = profile.reference_range_shift.get(lab.concept, 0.0)
                disease_shift = lab.diabetic_shift * (
                    strength if diabetic else signal * pseudo * lab.confusable_factor
                )
                mean = lab.mean + shift + disease_shift
                k = 1 + int(rng.integers(0, 3))
                values = mean + lab.sd * rng.standard_normal(k)
                for i, value in enumerate(values):
                    enc.labs.append(
                        LabResult(
                            test_concept_id=lab.concept,
                            value=float(round(value, 2)),
                            unit=lab.unit,
                            range_low=lab.range_low + shift,
                            range_high=lab.range_high + shift,
                            result_time=admit + 1800 + 3600 * i,
                        )
                    )
            for concept, p_diab, p_base in MED_CATALOG:
                p = p_base + (p_diab - p_base) * strength if diabetic else p_base
                if not diabetic and pseudo > 0.0 and concept == "RX:metformin":
                    p = min(1.0, p_base + 0.5 * signal * pseudo)
                if rng.random() < p:
                    enc.meds.append(concept)
            for concept, p_diab, p_base in OBS_CATALOG:
                p = p_diab if diabetic else p_base
                if not diabetic and pseudo > 0.0 and concept == "OBS:bmi_obese":
                    p = 0.38
                if rng.random() < p:
                    enc.observations.append(concept)
            for code, p_diab, p_base in BACKGROUND_CONDITIONS:
                p = p_diab if diabetic else p_base
                if rng.random() < p:
                    enc.diagnosis_codes.add(code)
            enc.labs.sort(key=lambda lab: (lab.result_time, lab.test_concept_id, lab.value))
            encounters.append(enc)
            truth.append((encounter_id, profile.facility_id, diabetic))
            admit += int(rng.integers(30, 400)) * 86400

    coded, ledger = plant_coder_errors(truth, config.coder_error, profiles, seed)

    code_rng = derive_rng(seed, "diabetes-codes")
    for enc in encounters:
        if coded[enc.encounter_id]:
            enc.diagnosis_codes.add(_weighted_choice(code_rng, DIABETES_CODE_CHOICES))
            enc.coded_diabetic = True
        else:
            enc.coded_diabetic = False
    return encounters, ledger


def write_cohort(
    encounters: list[EncounterRecord], ledger: ErrorLedger, directory
) -> dict[str, int]:
    """Write the table bundle plus error_ledger.csv; returns row counts."""
    directory = Path(directory)
    manifest = write_tables(encounters, directory)
    ledger.save(directory / "error_ledger.csv")
    manifest["error_ledger"] = len(ledger)
    return manifest


# --- summary ----------------------------------------------------------------


def summarize_cohort(encounters: list[EncounterRecord], ledger: ErrorLedger | None = None) -> dict:
    """Counts, prevalences, planted error split, and per-facility tallies."""
    n = len(encounters)
    coded = sum(1 for e in encounters if e.coded_diabetic)
    per_facility: dict[str, int] = {}
    for e in encounters:
        per_facility[e.facility_id] = per_facility.get(e.facility_id, 0) + 1
    report = {
        "encounters": n,
        "patients": len({e.patient_id for e in encounters}),
        "coded_prevalence": coded / n if n else 0.0,
        "per_facility": dict(sorted(per_facility.items())),
        "has_truth": ledger is not None,
    }
    if ledger is None:
        report["note"] = "no ledger supplied; truth columns omitted"
        return report
    n_true = sum(1 for e in encounters if e.encounter_id in ledger and ledger[e.encounter_id].true_diabetic)
    report["true_prevalence"] = n_true / n if n else 0.0
    report.update(ledger.planted_rates())
    return report


# --- config file ------------------------------------------------------------


def load_cohort_config(path) -> CohortConfig:
    """Parse the INI-style cohort config (sections: cohort, coder_error,
    facility.<id> with dotted per-lab keys)."""
    # '=' as the only delimiter keeps ':' usable inside lab concept keys;
    # optionxform=str preserves concept-id case
    parser = configparser.ConfigParser(delimiters=("=",))
    parser.optionxform = str
    read = parser.read(path)
    if not read:
        raise ValidationError(f"cannot read cohort config {path}")

    c = parser["cohort"] if parser.has_section("cohort") else {}

    def get(section, key, cast, default):
        if isinstance(section, dict) or not parser.has_option(section.name, key):
            return default
        try:
            return cast(section.get(key))
        except ValueError:
            raise ValidationError(f"cohort config: bad value for {key!r}") from None

    spec = EncounterCountSpec(
        min=get(c, "encounters_min", int, 1),
        max=get(c, "encounters_max", int, 8),
        mean=get(c, "encounters_mean", float, 1.4),
    )
    coder = CoderErrorConfig()
    if parser.has_section("coder_error"):
        s = parser["coder_error"]
        coder = CoderErrorConfig(
            miss_rate=float(s.get("miss_rate", coder.miss_rate)),
            false_code_rate=float(s.get("false_code_rate", coder.false_code_rate)),
        )
    profiles = []
    for section in parser.sections():
        if not section.startswith("facility."):
            continue
        fac_id = section.split(".", 1)[1]
        s = parser[section]
        shifts, orders = {}, {}
        mult = 1.0
        for key, value in s.items():
            if key.startswith("reference_range_shift."):
                shifts[key.split(".", 1)[1]] = float(value)
            elif key.startswith("order_propensity."):
                orders[key.split(".", 1)[1]] = float(value)
            elif key == "coder_error_multiplier":
                mult = float(value)
            else:
                raise ValidationError(f"cohort config: unknown facility key {key!r}")
        profiles.append(
            FacilityProfile(
                facility_id=fac_id,
                reference_range_shift=shifts,
                order_propensity=orders,
                coder_error_multiplier=mult,
            )
        )
    config = CohortConfig(
        n_patients=get(c, "n_patients", int, 14300),
        encounters_per_patient=spec,
        true_prevalence=get(c, "true_prevalence", float, 0.30),
        facility_profiles=tuple(profiles),
        coder_error=coder,
        signal_strength=get(c, "signal_strength", float, 0.95),
        seed=get(c, "seed", int, 42),
        min_age_years=get(c, "min_age_years", int, 50),
        occult_fraction=get(c, "occult_fraction", float, 0.008),
        confusable_fraction=get(c, "confusable_fraction", float, 0.015),
    )
    config.validate()
    return config


def write_default_config(path, n_patients: int = 14300, seed: int = 42) -> None:
    lines = [
        "[cohort]",
        f"n_patients = {n_patients}",
        "true_prevalence = 0.30",
        "signal_strength = 0.95",
        f"seed = {seed}",
        "min_age_years = 50",
        "occult_fraction = 0.008",
        "confusable_fraction = 0.015",
        "encounters_min = 1",
        "encounters_max = 8",
        "encounters_mean = 1.4",
        "",
        "[coder_error]",
        "miss_rate = 0.0568",
        "false_code_rate = 0.0339",
        "",
    ]
    for profile in default_facility_profiles():
        lines.append(f"[facility.{profile.facility_id}]")
        lines.append(f"coder_error_multiplier = {profile.coder_error_multiplier}")
        for lab, shift in sorted(profile.reference_range_shift.items()):
            lines.append(f"reference_range_shift.{lab} = {shift}")
        for lab, p in sorted(profile.order_propensity.items()):
            lines.append(f"order_propensity.{lab} = {p}")
        lines.append("")
    Path(path).write_text("\n".join(lines))
