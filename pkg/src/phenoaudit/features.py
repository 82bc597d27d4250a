"""Encounter featurization.

Turns encounter records into the model's dense feature matrix:

* per-lab aggregate statistics (count, min, max, median, high/normal/low
  tallies, last-minus-first delta),
* 1-hot categorical encoding for demographics, medication and observation
  concepts (age enters as decade bands so everything stays categorical),
* a binary history vector over diagnosis codes from the patient's prior
  encounters plus one aggregated prior-diabetes bit,
* a prevalence filter: a candidate feature enters the vocabulary only when it
  is present in at least ``threshold`` (default 5%) of positive training
  cases; the comparison is inclusive.

Missing labs are encoded as zeros across all eight aggregate slots; count=0
is the absence signal, so no imputation is needed. Values exactly on a range
bound count as normal (strict inequalities decide high/low).
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin

from .errors import ValidationError
from .rng import derive_rng
from .store import DiabetesCodeSet, EncounterRecord, LabResult

LAB_FIELDS = ("count", "min", "max", "median", "n_high", "n_normal", "n_low", "delta")

KIND_LAB = "lab"
KIND_CATEGORICAL = "categorical"
KIND_HISTORY_CODE = "history_code"
KIND_HISTORY_DIABETES = "history_diabetes"

HISTORY_DIABETES_CONCEPT = "prior_diabetes_any"


@dataclass(frozen=True)
class LabAggregate:
    count: int
    min: float
    max: float
    median: float
    n_high: int
    n_normal: int
    n_low: int
    delta: float

    def as_dict(self) -> dict:
        return {f: getattr(self, f) for f in LAB_FIELDS}


def aggregate_lab(labs: list[LabResult]) -> LabAggregate:
    """Aggregate one test's time-ordered results for one encounter."""
    if not labs:
        raise ValidationError("aggregate_lab requires at least one result")
    values = [lab.value for lab in labs]
    n_high = n_low = 0
    for lab in labs:
        if lab.range_high is not None and lab.value > lab.range_high:
            n_high += 1
        elif lab.range_low is not None and lab.value < lab.range_low:
            n_low += 1
    ordered = sorted(values)
    mid = len(ordered) // 2
    if len(ordered) % 2:
        median = float(ordered[mid])
    else:
        median = (ordered[mid - 1] + ordered[mid]) / 2.0
    return LabAggregate(
        count=len(values),
        min=float(min(values)),
        max=float(max(values)),
        median=median,
        n_high=n_high,
        n_normal=len(values) - n_high - n_low,
        n_low=n_low,
        delta=float(values[-1] - values[0]),
    )


@dataclass(frozen=True)
class FeatureDescriptor:
    kind: str
    concept: str
    field: str | None = None

    @property
    def name(self) -> str:
        if self.kind == KIND_LAB:
            return f"lab:{self.concept}:{self.field}"
        if self.kind == KIND_CATEGORICAL:
            return f"cat:{self.concept}"
        if self.kind == KIND_HISTORY_CODE:
            return f"hist:{self.concept}"
        return f"hist:{HISTORY_DIABETES_CONCEPT}"


class PatientHistory:
    """Prior-encounter lookup built from a full encounter corpus.

    For each encounter, exposes the set of diagnosis codes and the aggregated
    coded-diabetes flag over the patient's strictly earlier encounters.
    Earlier means ``admit_time`` strictly before the index encounter's.
    """

    def __init__(self, encounters: list[EncounterRecord]):
        by_patient: dict[str, list[EncounterRecord]] = {}
        for enc in encounters:
            by_patient.setdefault(enc.patient_id, []).append(enc)
        self._prior_codes: dict[str, frozenset[str]] = {}
        self._prior_diabetic: dict[str, bool] = {}
        self._n_prior: dict[str, int] = {}
        for group in by_patient.values():
            group.sort(key=lambda e: (e.admit_time, e.encounter_id))
            for i, enc in enumerate(group):
                priors = [p for p in group[:i] if p.admit_time < enc.admit_time]
                codes: set[str] = set()
                diabetic = False
                for p in priors:
                    codes.update(p.diagnosis_codes)
                    diabetic = diabetic or p.coded_diabetic
                self._prior_codes[enc.encounter_id] = frozenset(codes)
                self._prior_diabetic[enc.encounter_id] = diabetic
                self._n_prior[enc.encounter_id] = len(priors)

    def prior_codes(self, encounter_id: str) -> frozenset[str]:
        return self._prior_codes.get(encounter_id, frozenset())

    def prior_diabetic(self, encounter_id: str) -> bool:
        return self._prior_diabetic.get(encounter_id, False)

    def n_prior(self, encounter_id: str) -> int:
        return self._n_prior.get(encounter_id, 0)


def build_history_vector(
    prior_encounters: list[EncounterRecord],
    code_vocabulary: list[str],
    code_set: DiabetesCodeSet | None = None,
) -> np.ndarray:
    """Binary vector over ``code_vocabulary`` plus a trailing diabetes bit."""
    code_set = code_set or DiabetesCodeSet.default()
    seen: set[str] = set()
    diabetic = False
    for enc in prior_encounters:
        seen.update(enc.diagnosis_codes)
        diabetic = diabetic or code_set.matches_any(enc.diagnosis_codes)
    bits = np.zeros(len(code_vocabulary) + 1)
    for i, code in enumerate(code_vocabulary):
        if code in seen:
            bits[i] = 1.0
    bits[-1] = 1.0 if diabetic else 0.0
    return bits


def _categorical_values(enc: EncounterRecord):
    yield f"sex={enc.sex}"
    yield f"race={enc.race}"
    yield f"age_band={(enc.age_years // 10) * 10}s"
    for med in enc.meds:
        yield f"med={med}"
    for obs in enc.observations:
        yield f"obs={obs}"


class FeatureVocabulary:
    """Ordered feature descriptors, frozen after construction."""

    def __init__(self, descriptors: list[FeatureDescriptor], threshold: float):
        names = [d.name for d in descriptors]
        if len(set(names)) != len(names):
            raise ValidationError("duplicate feature descriptors")
        self.descriptors = tuple(descriptors)
        self.threshold = threshold
        self._index = {d: i for i, d in enumerate(self.descriptors)}
        self.lab_concepts = sorted(
            {d.concept for d in descriptors if d.kind == KIND_LAB}
        )
        self._lab_slots = {
            concept: {
                f: self._index.get(FeatureDescriptor(KIND_LAB, concept, f))
                for f in LAB_FIELDS
            }
            for concept in self.lab_concepts
        }
        self._cat_slots = {
            d.concept: i for d, i in self._index.items() if d.kind == KIND_CATEGORICAL
        }
        self._hist_slots = {
            d.concept: i for d, i in self._index.items() if d.kind == KIND_HISTORY_CODE
        }
        self._hist_diabetes_slot = next(
            (i for d, i in self._index.items() if d.kind == KIND_HISTORY_DIABETES), None
        )

    def __len__(self) -> int:
        return len(self.descriptors)

    @property
    def names(self) -> list[str]:
        return [d.name for d in self.descriptors]

    def content_hash(self) -> str:
        payload = json.dumps(
            [(d.kind, d.concept, d.field) for d in self.descriptors]
        ).encode()
        return hashlib.sha256(payload).hexdigest()

    def to_json(self) -> dict:
        return {
            "format": "phenoaudit-vocabulary/1",
            "threshold": self.threshold,
            "descriptors": [
                {"kind": d.kind, "concept": d.concept, "field": d.field}
                for d in self.descriptors
            ],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "FeatureVocabulary":
        descriptors = [
            FeatureDescriptor(d["kind"], d["concept"], d.get("field"))
            for d in payload["descriptors"]
        ]
        return cls(descriptors, payload["threshold"])

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2) + "\n")

    @classmethod
    def load(cls, path) -> "FeatureVocabulary":
        return cls.from_json(json.loads(Path(path).read_text()))


def build_vocabulary(
    train_encounters: list[EncounterRecord],
    history: PatientHistory,
    threshold: float = 0.05,
    include_history_diabetes_flag: bool = True,
) -> FeatureVocabulary:
    """Keep candidates present in >= threshold of positive training cases."""
    if not 0.0 <= threshold <= 1.0:
        raise ValidationError(f"threshold must be in [0,1], got {threshold}")
    positives = [enc for enc in train_encounters if enc.coded_diabetic]
    if not positives:
        raise ValidationError("cannot build vocabulary: no positive training cases")

    lab_hits: dict[str, int] = {}
    cat_hits: dict[str, int] = {}
    hist_hits: dict[str, int] = {}
    hist_diabetes_hits = 0
    for enc in positives:
        for concept in {lab.test_concept_id for lab in enc.labs}:
            lab_hits[concept] = lab_hits.get(concept, 0) + 1
        for value in set(_categorical_values(enc)):
            cat_hits[value] = cat_hits.get(value, 0) + 1
        for code in history.prior_codes(enc.encounter_id):
            hist_hits[code] = hist_hits.get(code, 0) + 1
        if history.prior_diabetic(enc.encounter_id):
            hist_diabetes_hits += 1

    n_pos = len(positives)
    cut = threshold * n_pos
    descriptors: list[FeatureDescriptor] = []
    for concept in sorted(lab_hits):
        if lab_hits[concept] >= cut:
            for f in LAB_FIELDS:
                descriptors.append(FeatureDescriptor(KIND_LAB, concept, f))
    for value in sorted(cat_hits):
        if cat_hits[value] >= cut:
            descriptors.append(FeatureDescriptor(KIND_CATEGORICAL, value))
    for code in sorted(hist_hits):
        if hist_hits[code] >= cut:
            descriptors.append(FeatureDescriptor(KIND_HISTORY_CODE, code))
    if include_history_diabetes_flag and hist_diabetes_hits >= cut:
        descriptors.append(FeatureDescriptor(KIND_HISTORY_DIABETES, HISTORY_DIABETES_CONCEPT))
    return FeatureVocabulary(descriptors, threshold)


def candidate_count(encounters: list[EncounterRecord], history: PatientHistory) -> int:
    """Size of the unfiltered candidate pool (for filter-shrinkage checks)."""
    labs, cats, hist = set(), set(), set()
    for enc in encounters:
        labs.update(lab.test_concept_id for lab in enc.labs)
        cats.update(_categorical_values(enc))
        hist.update(history.prior_codes(enc.encounter_id))
    return len(labs) * len(LAB_FIELDS) + len(cats) + len(hist) + 1


@dataclass
class FeatureVector:
    encounter_id: str
    values: np.ndarray
    label: bool


def encode_encounter(
    enc: EncounterRecord, history: PatientHistory, vocabulary: FeatureVocabulary
) -> FeatureVector:
    """Pure function of (encounter, history, vocabulary) -> dense vector."""
    values = np.zeros(len(vocabulary))
    by_concept: dict[str, list[LabResult]] = {}
    for lab in enc.labs:
        by_concept.setdefault(lab.test_concept_id, []).append(lab)
    for concept, labs in by_concept.items():
        slots = vocabulary._lab_slots.get(concept)
        if slots is None:
            continue
        agg = aggregate_lab(labs).as_dict()
        for field_name, idx in slots.items():
            if idx is not None:
                values[idx] = float(agg[field_name])
    for value in _categorical_values(enc):
        idx = vocabulary._cat_slots.get(value)
        if idx is not None:
            values[idx] = 1.0
    for code in history.prior_codes(enc.encounter_id):
        idx = vocabulary._hist_slots.get(code)
        if idx is not None:
            values[idx] = 1.0
    if vocabulary._hist_diabetes_slot is not None and history.prior_diabetic(enc.encounter_id):
        values[vocabulary._hist_diabetes_slot] = 1.0
    if not np.all(np.isfinite(values)):
        raise ValidationError(f"non-finite feature for encounter {enc.encounter_id}")
    return FeatureVector(enc.encounter_id, values, enc.coded_diabetic)


@dataclass
class Dataset:
    """A dense feature matrix with aligned labels and encounter ids."""

    X: np.ndarray
    y: np.ndarray
    ids: list[str]

    def __len__(self) -> int:
        return len(self.ids)


def encode_dataset(
    encounters: list[EncounterRecord],
    history: PatientHistory,
    vocabulary: FeatureVocabulary,
) -> Dataset:
    if not encounters:
        return Dataset(np.zeros((0, len(vocabulary))), np.zeros(0), [])
    vectors = [encode_encounter(e, history, vocabulary) for e in encounters]
    return Dataset(
        X=np.stack([v.values for v in vectors]),
        y=np.array([1.0 if v.label else 0.0 for v in vectors]),
        ids=[v.encounter_id for v in vectors],
    )


def split_dataset(
    encounters: list[EncounterRecord],
    test_fraction: float = 0.20,
    val_fraction: float = 0.20,
    seed: int = 0,
):
    """Label-stratified (train, validation, test) split.

    The test cut is drawn first; validation is then ``val_fraction`` of the
    remainder. Splits are disjoint and exhaustive.
    """
    if not 0.0 < test_fraction < 1.0 or not 0.0 < val_fraction < 1.0:
        raise ValidationError("split fractions must lie in (0,1)")
    rng = derive_rng(seed, "split")
    pos = [e for e in encounters if e.coded_diabetic]
    neg = [e for e in encounters if not e.coded_diabetic]
    if len(pos) < 3 or len(neg) < 3:
        raise ValidationError("too few cases in one class to stratify the split")

    def cut(group: list[EncounterRecord], fraction: float):
        order = rng.permutation(len(group))
        k = int(round(fraction * len(group)))
        taken = [group[i] for i in order[:k]]
        rest = [group[i] for i in order[k:]]
        return taken, rest

    test_p, rest_p = cut(pos, test_fraction)
    test_n, rest_n = cut(neg, test_fraction)
    val_p, train_p = cut(rest_p, val_fraction)
    val_n, train_n = cut(rest_n, val_fraction)

    def merge(a, b):
        merged = a + b
        merged.sort(key=lambda e: e.encounter_id)
        return merged

    return merge(train_p, train_n), merge(val_p, val_n), merge(test_p, test_n)


class EncounterFeaturizer(BaseEstimator, TransformerMixin):
    """Sklearn-style transformer from encounter records to a dense matrix.

    ``fit`` builds the vocabulary from the encounters it is given (the
    training split); history context for the vocabulary filter is derived
    from those same encounters, so held-out data can never influence which
    features exist. ``transform`` encodes any encounter list against the
    frozen vocabulary, using the supplied full-corpus ``PatientHistory``
    when available (each patient's real chart past), otherwise history over
    the transformed encounters themselves.
    """

    def __init__(
        self,
        threshold: float = 0.05,
        include_history_diabetes_flag: bool = True,
        history: PatientHistory | None = None,
    ):
        self.threshold = threshold
        self.include_history_diabetes_flag = include_history_diabetes_flag
        self.history = history

    def fit(self, X: list[EncounterRecord], y=None):
        self.vocabulary_ = build_vocabulary(
            X,
            PatientHistory(X),
            threshold=self.threshold,
            include_history_diabetes_flag=self.include_history_diabetes_flag,
        )
        return self

    def transform(self, X: list[EncounterRecord]) -> np.ndarray:
        if not hasattr(self, "vocabulary_"):
            raise ValidationError("featurizer is not fitted")
        history = self.history if self.history is not None else PatientHistory(X)
        return encode_dataset(X, history, self.vocabulary_).X

    def get_feature_names_out(self, input_features=None):
        return np.array(self.vocabulary_.names)


def save_features(dataset: Dataset, vocabulary: FeatureVocabulary, path) -> None:
    """Persist the matrix as CSV: encounter_id, label, then descriptor columns."""
    import csv as _csv

    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = _csv.writer(fh)
        writer.writerow(["encounter_id", "label"] + vocabulary.names)
        for i, eid in enumerate(dataset.ids):
            writer.writerow(
                [eid, int(dataset.y[i])] + [repr(float(v)) for v in dataset.X[i]]
            )


def load_features(path, vocabulary: FeatureVocabulary) -> Dataset:
    import csv as _csv

    ids: list[str] = []
    rows: list[list[float]] = []
    labels: list[float] = []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = _csv.reader(fh)
        header = next(reader)
        if header[2:] != vocabulary.names:
            raise ValidationError("features file does not match vocabulary")
        for row in reader:
            ids.append(row[0])
            labels.append(float(row[1]))
            rows.append([float(v) for v in row[2:]])
    if not ids:
        return Dataset(np.zeros((0, len(vocabulary))), np.zeros(0), [])
    return Dataset(np.array(rows), np.array(labels), ids)


def _finite_matrix(X: np.ndarray, what: str) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if X.ndim != 2:
        raise ValidationError(f"{what} must be a 2-d array")
    if not np.all(np.isfinite(X)):
        raise ValidationError(f"{what} contains non-finite entries")
    return X
