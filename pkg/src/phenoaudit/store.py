"""On-disk encounter tables and their in-memory record form.

The table set is a deliberately minimal echo of a clinical common data model:
five CSV files (person, visit, measurement, drug_exposure, condition) joined
on person/visit ids. Files use RFC-4180 quoting, UTF-8, and a mandatory
header row. Timestamps are ISO-8601 UTC strings on disk and integer epoch
seconds in memory.

Observation-style concepts ride in the drug_exposure table under an ``OBS:``
prefix; they are split back into ``EncounterRecord.observations`` on read, so
write -> read round-trips exactly.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from importlib import resources
from pathlib import Path

from .errors import IntegrityError, TableParseError, ValidationError

TABLE_COLUMNS = {
    "person": ["person_id", "sex", "race", "birth_year"],
    "visit": ["visit_id", "person_id", "facility_id", "admit_time"],
    "measurement": [
        "visit_id",
        "test_concept_id",
        "value",
        "unit",
        "range_low",
        "range_high",
        "result_time",
    ],
    "drug_exposure": ["visit_id", "drug_concept_id"],
    "condition": ["visit_id", "condition_code"],
}

_OBS_PREFIX = "OBS:"


def to_iso(epoch_seconds: int) -> str:
    return datetime.fromtimestamp(int(epoch_seconds), tz=timezone.utc).strftime(
        "%Y-%m-%dT%H:%M:%SZ"
    )


def from_iso(text: str) -> int:
    dt = datetime.strptime(text, "%Y-%m-%dT%H:%M:%SZ")
    return int(dt.replace(tzinfo=timezone.utc).timestamp())


@dataclass(frozen=True)
class LabResult:
    test_concept_id: str
    value: float
    unit: str
    range_low: float | None
    range_high: float | None
    result_time: int


@dataclass
class EncounterRecord:
    encounter_id: str
    patient_id: str
    facility_id: str
    admit_time: int
    age_years: int
    sex: str
    race: str
    labs: list[LabResult] = field(default_factory=list)
    meds: list[str] = field(default_factory=list)
    observations: list[str] = field(default_factory=list)
    diagnosis_codes: set[str] = field(default_factory=set)
    coded_diabetic: bool = False


class DiabetesCodeSet:
    """The diagnosis codes that constitute the target phenotype.

    Membership is exact string match after normalization (trim, uppercase).
    Ships as a data file so other phenotypes can reuse the pipeline.
    """

    def __init__(self, codes):
        normalized = {self.normalize(c) for c in codes}
        normalized.discard("")
        if not normalized:
            raise ValidationError("diabetes code set must not be empty")
        self.codes = frozenset(normalized)

    @staticmethod
    def normalize(code: str) -> str:
        return code.strip().upper()

    def __contains__(self, code: str) -> bool:
        return self.normalize(code) in self.codes

    def __iter__(self):
        return iter(sorted(self.codes))

    def __len__(self):
        return len(self.codes)

    def matches_any(self, codes) -> bool:
        return any(c in self for c in codes)

    @classmethod
    def from_file(cls, path) -> "DiabetesCodeSet":
        codes = []
        for line in Path(path).read_text(encoding="utf-8").splitlines():
            line = line.split("#", 1)[0].strip()
            if line:
                codes.append(line)
        return cls(codes)

    @classmethod
    def default(cls) -> "DiabetesCodeSet":
        ref = resources.files("phenoaudit.data").joinpath("diabetes_codes.txt")
        with resources.as_file(ref) as path:
            return cls.from_file(path)


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_tables(encounters: list[EncounterRecord], directory) -> dict[str, int]:
    """Write the five-table bundle; returns a manifest of data-row counts."""
    directory = Path(directory)
    try:
        directory.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create table directory {directory}: {exc}") from exc

    persons: dict[str, tuple] = {}
    visit_rows, meas_rows, drug_rows, cond_rows = [], [], [], []
    for enc in encounters:
        birth_year = datetime.fromtimestamp(enc.admit_time, tz=timezone.utc).year - enc.age_years
        persons.setdefault(enc.patient_id, (enc.patient_id, enc.sex, enc.race, birth_year))
        visit_rows.append(
            (enc.encounter_id, enc.patient_id, enc.facility_id, to_iso(enc.admit_time))
        )
        for lab in enc.labs:
            meas_rows.append(
                (
                    enc.encounter_id,
                    lab.test_concept_id,
                    _fmt(lab.value),
                    lab.unit,
                    _fmt(lab.range_low),
                    _fmt(lab.range_high),
                    to_iso(lab.result_time),
                )
            )
        for med in enc.meds:
            drug_rows.append((enc.encounter_id, med))
        for obs in enc.observations:
            drug_rows.append((enc.encounter_id, _OBS_PREFIX + obs))
        for code in sorted(enc.diagnosis_codes):
            cond_rows.append((enc.encounter_id, code))

    tables = {
        "person": sorted(persons.values()),
        "visit": visit_rows,
        "measurement": meas_rows,
        "drug_exposure": drug_rows,
        "condition": cond_rows,
    }
    manifest = {}
    for name, rows in tables.items():
        path = directory / f"{name}.csv"
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                writer = csv.writer(fh)
                writer.writerow(TABLE_COLUMNS[name])
                writer.writerows(rows)
        except OSError as exc:
            raise OSError(f"cannot write table {path}: {exc}") from exc
        manifest[name] = len(rows)
    return manifest


def _parse_float(text: str, table: str, line_num: int, column: str) -> float | None:
    if text == "":
        return None
    try:
        return float(text)
    except ValueError:
        raise TableParseError(
            f"{table}.csv line {line_num}: column {column!r} has malformed numeric {text!r}"
        ) from None


def _read_rows(directory: Path, table: str):
    path = directory / f"{table}.csv"
    if not path.exists():
        raise TableParseError(f"missing table file: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in TABLE_COLUMNS[table] if c not in header]
        if missing:
            raise TableParseError(f"{table}.csv: missing columns {missing}")
        for row in reader:
            yield reader.line_num, row


def read_tables(directory, code_set: DiabetesCodeSet | None = None) -> list[EncounterRecord]:
    """Parse and join the five-table bundle into encounter records.

    Labs come back sorted by result time; ``coded_diabetic`` is derived from
    the diabetes code set. Dangling foreign keys raise ``IntegrityError``.
    """
    directory = Path(directory)
    code_set = code_set or DiabetesCodeSet.default()

    persons = {}
    for line_num, row in _read_rows(directory, "person"):
        _parse_float(row["birth_year"], "person", line_num, "birth_year")
        persons[row["person_id"]] = row

    encounters: dict[str, EncounterRecord] = {}
    order: list[str] = []
    for line_num, row in _read_rows(directory, "visit"):
        person = persons.get(row["person_id"])
        if person is None:
            raise IntegrityError(
                f"visit.csv line {line_num}: unknown person_id {row['person_id']!r}"
            )
        try:
            admit = from_iso(row["admit_time"])
        except ValueError:
            raise TableParseError(
                f"visit.csv line {line_num}: bad timestamp {row['admit_time']!r}"
            ) from None
        admit_year = datetime.fromtimestamp(admit, tz=timezone.utc).year
        record = EncounterRecord(
            encounter_id=row["visit_id"],
            patient_id=row["person_id"],
            facility_id=row["facility_id"],
            admit_time=admit,
            age_years=admit_year - int(float(person["birth_year"])),
            sex=person["sex"],
            race=person["race"],
        )
        encounters[record.encounter_id] = record
        order.append(record.encounter_id)

    def resolve(table: str, line_num: int, visit_id: str) -> EncounterRecord:
        enc = encounters.get(visit_id)
        if enc is None:
            raise IntegrityError(f"{table}.csv line {line_num}: unknown visit_id {visit_id!r}")
        return enc

    for line_num, row in _read_rows(directory, "measurement"):
        enc = resolve("measurement", line_num, row["visit_id"])
        value = _parse_float(row["value"], "measurement", line_num, "value")
        if value is None:
            raise TableParseError(f"measurement.csv line {line_num}: empty value")
        try:
            result_time = from_iso(row["result_time"])
        except ValueError:
            raise TableParseError(
                f"measurement.csv line {line_num}: bad timestamp {row['result_time']!r}"
            ) from None
        enc.labs.append(
            LabResult(
                test_concept_id=row["test_concept_id"],
                value=value,
                unit=row["unit"],
                range_low=_parse_float(row["range_low"], "measurement", line_num, "range_low"),
                range_high=_parse_float(row["range_high"], "measurement", line_num, "range_high"),
                result_time=result_time,
            )
        )

    for line_num, row in _read_rows(directory, "drug_exposure"):
        enc = resolve("drug_exposure", line_num, row["visit_id"])
        concept = row["drug_concept_id"]
        if concept.startswith(_OBS_PREFIX):
            enc.observations.append(concept[len(_OBS_PREFIX):])
        else:
            enc.meds.append(concept)

    for line_num, row in _read_rows(directory, "condition"):
        enc = resolve("condition", line_num, row["visit_id"])
        enc.diagnosis_codes.add(row["condition_code"])

    for enc in encounters.values():
        enc.labs.sort(key=lambda lab: (lab.result_time, lab.test_concept_id, lab.value))
        enc.coded_diabetic = code_set.matches_any(enc.diagnosis_codes)
    return [encounters[eid] for eid in order]


def validate(encounters: list[EncounterRecord], code_set: DiabetesCodeSet | None = None) -> list[str]:
    """Report invariant violations; an empty list means the bundle is valid."""
    code_set = code_set or DiabetesCodeSet.default()
    problems = []
    for enc in encounters:
        where = f"encounter {enc.encounter_id}"
        derived = code_set.matches_any(enc.diagnosis_codes)
        if enc.coded_diabetic != derived:
            problems.append(f"{where}: coded_diabetic flag disagrees with diagnosis codes")
        times = [lab.result_time for lab in enc.labs]
        if times != sorted(times):
            problems.append(f"{where}: labs not ordered by result time")
        if enc.age_years < 0:
            problems.append(f"{where}: negative age")
        for lab in enc.labs:
            if not math.isfinite(lab.value):
                problems.append(f"{where}: lab {lab.test_concept_id} value is not finite")
            if (
                lab.range_low is not None
                and lab.range_high is not None
                and lab.range_low > lab.range_high
            ):
                problems.append(
                    f"{where}: lab {lab.test_concept_id} range_low > range_high"
                )
    return problems
