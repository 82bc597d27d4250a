import math

import pytest

from phenoaudit.errors import IntegrityError, TableParseError
from phenoaudit.store import (
    DiabetesCodeSet,
    EncounterRecord,
    LabResult,
    from_iso,
    read_tables,
    to_iso,
    validate,
    write_tables,
)


def make_encounter(eid="E1", pid="P1", codes=None, labs=None, obs=None):
    code_set = DiabetesCodeSet.default()
    codes = set(codes or [])
    return EncounterRecord(
        encounter_id=eid,
        patient_id=pid,
        facility_id="F01",
        admit_time=1262350000,
        age_years=61,
        sex="F",
        race="white",
        labs=labs or [],
        meds=["RX:aspirin"],
        observations=obs or [],
        diagnosis_codes=codes,
        coded_diabetic=code_set.matches_any(codes),
    )


def lab(value, t=1262353600, lo=70.0, hi=110.0):
    return LabResult("LAB:glucose", value, "mg/dL", lo, hi, t)


class TestTimestamps:
    def test_round_trip(self):
        assert from_iso(to_iso(1262350000)) == 1262350000

    def test_format(self):
        assert to_iso(0) == "1970-01-01T00:00:00Z"


class TestDiabetesCodeSet:
    def test_normalization_idempotent(self):
        cs = DiabetesCodeSet(["  e11.9 ", "250.00"])
        for code in cs:
            assert DiabetesCodeSet.normalize(code) == code

    def test_membership_after_normalization(self):
        cs = DiabetesCodeSet(["E11.9"])
        assert "e11.9 " in cs
        assert "I10" not in cs

    def test_comments_and_blank_lines(self, tmp_path):
        path = tmp_path / "codes.txt"
        path.write_text("# header\nE11.9  # inline\n\n250.00\n")
        cs = DiabetesCodeSet.from_file(path)
        assert sorted(cs) == ["250.00", "E11.9"]

    def test_empty_rejected(self):
        with pytest.raises(Exception):
            DiabetesCodeSet([])


class TestRoundTrip:
    def test_empty_list_gives_header_only_files(self, tmp_path):
        write_tables([], tmp_path)
        for name in ("person", "visit", "measurement", "drug_exposure", "condition"):
            lines = (tmp_path / f"{name}.csv").read_text().strip().splitlines()
            assert len(lines) == 1

    def test_measurement_cardinality(self, tmp_path):
        enc = make_encounter(labs=[lab(100.0, 1262353600), lab(120.0, 1262357200), lab(90.0, 1262360800)])
        manifest = write_tables([enc], tmp_path)
        assert manifest["measurement"] == 3
        assert manifest["visit"] == 1

    def test_write_read_identity(self, tmp_path):
        encs = [
            make_encounter("E1", "P1", codes={"E11.9", "I10"},
                           labs=[lab(100.0, 2000000000), lab(95.0, 2000003600)]),
            make_encounter("E2", "P2", codes={"I10"}, obs=["OBS:smoker"]),
        ]
        write_tables(encs, tmp_path)
        back = read_tables(tmp_path)
        assert [e.encounter_id for e in back] == ["E1", "E2"]
        for orig, rt in zip(encs, back):
            assert rt.patient_id == orig.patient_id
            assert rt.admit_time == orig.admit_time
            assert rt.age_years == orig.age_years
            assert rt.diagnosis_codes == orig.diagnosis_codes
            assert rt.meds == orig.meds
            assert rt.observations == orig.observations
            assert rt.labs == sorted(orig.labs, key=lambda l: (l.result_time, l.test_concept_id, l.value))
            assert rt.coded_diabetic == orig.coded_diabetic

    def test_labs_sorted_even_if_file_shuffled(self, tmp_path):
        enc = make_encounter(labs=[lab(100.0, 2000007200), lab(95.0, 2000000000)])
        write_tables([enc], tmp_path)
        back = read_tables(tmp_path)
        times = [l.result_time for l in back[0].labs]
        assert times == sorted(times)

    def test_coded_diabetic_derived_from_code_set(self, tmp_path):
        enc = make_encounter(codes={"250.00"})
        write_tables([enc], tmp_path)
        assert read_tables(tmp_path)[0].coded_diabetic is True


class TestIntegrity:
    def test_dangling_visit_reference(self, tmp_path):
        write_tables([make_encounter()], tmp_path)
        with open(tmp_path / "condition.csv", "a", newline="") as fh:
            fh.write("GHOST,I10\r\n")
        with pytest.raises(IntegrityError, match="condition.csv") as exc:
            read_tables(tmp_path)
        assert "GHOST" in str(exc.value)

    def test_unknown_person(self, tmp_path):
        write_tables([make_encounter()], tmp_path)
        with open(tmp_path / "visit.csv", "a", newline="") as fh:
            fh.write("E9,P-MISSING,F01,2010-01-01T00:00:00Z\r\n")
        with pytest.raises(IntegrityError, match="visit.csv"):
            read_tables(tmp_path)

    def test_malformed_numeric_names_line(self, tmp_path):
        write_tables([make_encounter(labs=[lab(100.0)])], tmp_path)
        text = (tmp_path / "measurement.csv").read_text().replace("100.0", "not-a-number", 1)
        (tmp_path / "measurement.csv").write_text(text)
        with pytest.raises(TableParseError, match="line 2"):
            read_tables(tmp_path)

    def test_missing_table(self, tmp_path):
        write_tables([make_encounter()], tmp_path)
        (tmp_path / "person.csv").unlink()
        with pytest.raises(TableParseError, match="person"):
            read_tables(tmp_path)


class TestValidate:
    def test_valid_bundle_empty_report(self):
        enc = make_encounter(labs=[lab(100.0)])
        assert validate([enc]) == []

    def test_inverted_range_flagged(self):
        enc = make_encounter(labs=[lab(100.0, lo=120.0, hi=80.0)])
        report = validate([enc])
        assert len(report) == 1 and "range_low" in report[0]

    def test_nan_value_flagged(self):
        enc = make_encounter(labs=[lab(math.nan)])
        report = validate([enc])
        assert len(report) == 1 and "finite" in report[0]

    def test_never_raises_on_flag_mismatch(self):
        enc = make_encounter(codes={"E11.9"})
        enc.coded_diabetic = False
        report = validate([enc])
        assert any("coded_diabetic" in p for p in report)
