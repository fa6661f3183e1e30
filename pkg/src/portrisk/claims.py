"""Normalized claims data model, CSV parsing, and validation.

One row of the claims CSV is one pre-consolidated claim line.  Dates are
calendar dates (day precision); day arithmetic is the plain calendar-day
difference (Jan 1 -> Jan 3 = 2 days).  Codes are opaque strings; anything
clinical about them (cancer prefixes, comorbidity categories) lives in
configuration, not here.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace
from datetime import date
from enum import Enum
from pathlib import Path

from .errors import DataError

CLAIMS_COLUMNS = [
    "patient_id",
    "admit_date",
    "discharge_date",
    "setting",
    "discharge_status",
    "dx_codes",
    "proc_codes",
    "drug_codes",
    "primary_dx",
    "planned_flag",
]

DEMOGRAPHICS_COLUMNS = ["patient_id", "birth_year", "sex", "region"]

BIRTH_YEAR_MIN = 1900


class Setting(str, Enum):
    INPATIENT = "inpatient"
    OUTPATIENT = "outpatient"
    EMERGENCY = "emergency"
    REHAB = "rehab"


class DischargeStatus(str, Enum):
    HOME = "home"
    IN_HOSPITAL_DEATH = "in_hospital_death"
    TRANSFER_ACUTE = "transfer_acute"
    LEFT_AMA = "left_ama"
    OTHER = "other"


class Sex(str, Enum):
    F = "F"
    M = "M"
    U = "U"


@dataclass(frozen=True)
class ClaimRecord:
    """One normalized claim line for one patient."""

    patient_id: str
    admit_date: date
    discharge_date: date
    setting: Setting
    discharge_status: DischargeStatus
    dx_codes: tuple[str, ...] = ()
    proc_codes: tuple[str, ...] = ()
    drug_codes: tuple[str, ...] = ()
    primary_dx: str = ""
    planned_flag: bool = False

    def duration_days(self) -> int:
        return (self.discharge_date - self.admit_date).days


@dataclass(frozen=True)
class PatientDemographics:
    patient_id: str
    birth_year: int
    sex: Sex
    region: str = ""


@dataclass(frozen=True)
class PatientHistory:
    """All claims for one patient, sorted by admit date.

    Construct through :meth:`build` to get the canonical sort (admit date,
    then discharge date, then input order).  The raw constructor is kept
    for tests that need deliberately broken histories.
    """

    demographics: PatientDemographics
    claims: tuple[ClaimRecord, ...] = field(default_factory=tuple)

    @property
    def patient_id(self) -> str:
        return self.demographics.patient_id

    @classmethod
    def build(cls, demographics: PatientDemographics,
              claims: list[ClaimRecord] | tuple[ClaimRecord, ...]) -> "PatientHistory":
        ordered = sorted(claims, key=lambda c: (c.admit_date, c.discharge_date))
        return cls(demographics=demographics, claims=tuple(ordered))


@dataclass
class RejectedRow:
    file: str
    line: int
    reason: str


@dataclass
class ParseResult:
    histories: list[PatientHistory]
    rejected_rows: list[RejectedRow] = field(default_factory=list)
    dropped_patients: list[str] = field(default_factory=list)

    @property
    def rejection_count(self) -> int:
        return len(self.rejected_rows)


def _split_codes(cell: str) -> tuple[str, ...]:
    return tuple(c for c in cell.split(";") if c)


def _join_codes(codes: tuple[str, ...]) -> str:
    return ";".join(codes)


def _parse_claim_row(row: dict[str, str]) -> ClaimRecord:
    patient_id = row["patient_id"].strip()
    if not patient_id:
        raise ValueError("empty patient_id")
    admit = date.fromisoformat(row["admit_date"])
    discharge = date.fromisoformat(row["discharge_date"])
    if admit > discharge:
        raise ValueError("admit_date > discharge_date")
    try:
        setting = Setting(row["setting"])
    except ValueError:
        raise ValueError(f"unknown setting {row['setting']!r}") from None
    try:
        status = DischargeStatus(row["discharge_status"])
    except ValueError:
        raise ValueError(f"unknown discharge_status {row['discharge_status']!r}") from None
    dx = _split_codes(row["dx_codes"])
    primary = row["primary_dx"].strip()
    if dx and primary and primary not in dx:
        raise ValueError("primary_dx not in dx_codes")
    flag = row["planned_flag"].strip()
    if flag not in ("0", "1"):
        raise ValueError(f"planned_flag must be 0 or 1, got {flag!r}")
    return ClaimRecord(
        patient_id=patient_id,
        admit_date=admit,
        discharge_date=discharge,
        setting=setting,
        discharge_status=status,
        dx_codes=dx,
        proc_codes=_split_codes(row["proc_codes"]),
        drug_codes=_split_codes(row["drug_codes"]),
        primary_dx=primary,
        planned_flag=flag == "1",
    )


def _parse_demo_row(row: dict[str, str]) -> PatientDemographics:
    patient_id = row["patient_id"].strip()
    if not patient_id:
        raise ValueError("empty patient_id")
    birth_year = int(row["birth_year"])
    if not (BIRTH_YEAR_MIN <= birth_year <= date.today().year):
        raise ValueError(f"birth_year {birth_year} out of range")
    return PatientDemographics(
        patient_id=patient_id,
        birth_year=birth_year,
        sex=Sex(row["sex"]),
        region=row["region"].strip(),
    )


def _read_rows(path: Path, required: list[str]) -> list[tuple[int, dict[str, str]]]:
    if not path.exists():
        raise DataError(f"file not found: {path}")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = reader.fieldnames or []
        missing = [c for c in required if c not in header]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        return [(i, row) for i, row in enumerate(reader, start=2)]


def parse_claims_file(path: str | Path, demo_path: str | Path) -> ParseResult:
    """Parse claims and demographics CSVs into per-patient histories.

    Malformed rows are rejected (not fatal) and reported; patients that
    have claims but no demographics row are dropped with a warning entry.
    """
    path, demo_path = Path(path), Path(demo_path)
    result = ParseResult(histories=[])

    demos: dict[str, PatientDemographics] = {}
    for line, row in _read_rows(demo_path, DEMOGRAPHICS_COLUMNS):
        try:
            demo = _parse_demo_row(row)
        except (ValueError, KeyError) as exc:
            result.rejected_rows.append(RejectedRow(demo_path.name, line, str(exc)))
            continue
        demos[demo.patient_id] = demo

    claims_by_patient: dict[str, list[ClaimRecord]] = {}
    for line, row in _read_rows(path, CLAIMS_COLUMNS):
        try:
            claim = _parse_claim_row(row)
        except (ValueError, KeyError) as exc:
            result.rejected_rows.append(RejectedRow(path.name, line, str(exc)))
            continue
        claims_by_patient.setdefault(claim.patient_id, []).append(claim)

    for patient_id in sorted(claims_by_patient):
        demo = demos.get(patient_id)
        if demo is None:
            result.dropped_patients.append(patient_id)
            continue
        result.histories.append(PatientHistory.build(demo, claims_by_patient[patient_id]))
    return result


def validate_history(history: PatientHistory) -> list[str]:
    """Check every type invariant; returns violation descriptions, never raises."""
    violations: list[str] = []
    demo = history.demographics
    if not demo.patient_id:
        violations.append("empty patient_id in demographics")
    if not (BIRTH_YEAR_MIN <= demo.birth_year <= date.today().year):
        violations.append(f"birth_year {demo.birth_year} out of range")
    for i, claim in enumerate(history.claims):
        if not claim.patient_id:
            violations.append(f"claim {i}: empty patient_id")
        elif claim.patient_id != demo.patient_id:
            violations.append(f"claim {i}: patient_id {claim.patient_id!r} differs from history")
        if claim.admit_date > claim.discharge_date:
            violations.append(f"claim {i}: admit_date after discharge_date")
        if claim.dx_codes and claim.primary_dx and claim.primary_dx not in claim.dx_codes:
            violations.append(f"claim {i}: primary_dx not in dx_codes")
    for i in range(1, len(history.claims)):
        prev, cur = history.claims[i - 1], history.claims[i]
        if (cur.admit_date, cur.discharge_date) < (prev.admit_date, prev.discharge_date):
            violations.append(f"order violation between claims {i - 1} and {i}")
    return violations


def write_claims_file(path: str | Path, histories: list[PatientHistory]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(CLAIMS_COLUMNS)
        for history in histories:
            for c in history.claims:
                writer.writerow([
                    c.patient_id,
                    c.admit_date.isoformat(),
                    c.discharge_date.isoformat(),
                    c.setting.value,
                    c.discharge_status.value,
                    _join_codes(c.dx_codes),
                    _join_codes(c.proc_codes),
                    _join_codes(c.drug_codes),
                    c.primary_dx,
                    "1" if c.planned_flag else "0",
                ])


def write_demographics_file(path: str | Path, histories: list[PatientHistory]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(DEMOGRAPHICS_COLUMNS)
        for history in histories:
            d = history.demographics
            writer.writerow([d.patient_id, d.birth_year, d.sex.value, d.region])


def with_patient_id(claim: ClaimRecord, patient_id: str) -> ClaimRecord:
    return replace(claim, patient_id=patient_id)
