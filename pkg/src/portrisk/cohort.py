"""Cohort construction: exclusions, episode merging, and readmission labels.

A patient is excluded on the first matching rule, checked in a fixed
order: long stay, then death/transfer/left-AMA, then cancer, then rehab.
Kept patients have their inpatient claims merged into episodes (a claim
admitting within ``merge_gap_days`` of the running episode's end extends
it), and each episode becomes one index event labeled for all-cause
readmission: true iff another inpatient claim admits within 1..30 days
after the episode's discharge.  Because of the merge rule, a claim
admitting within the gap can never start the readmitting episode, so the
effective readmitting gap is ``merge_gap_days + 1 .. 30``.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import date
from pathlib import Path

from .claims import ClaimRecord, PatientHistory, Setting, DischargeStatus

EXCLUSION_REASONS = ("long_stay", "death_transfer_ama", "cancer", "rehab")

_ACUTE_STATUSES = (
    DischargeStatus.IN_HOSPITAL_DEATH,
    DischargeStatus.TRANSFER_ACUTE,
    DischargeStatus.LEFT_AMA,
)


@dataclass(frozen=True)
class CohortConfig:
    long_stay_threshold_days: int = 30
    cancer_dx_prefixes: tuple[str, ...] = ("C",)
    rehab_dx_prefixes: tuple[str, ...] = ("REH",)
    merge_gap_days: int = 2
    readmission_window_days: int = 30

    def __post_init__(self):
        if self.long_stay_threshold_days < 1 or self.merge_gap_days < 1 \
                or self.readmission_window_days < 1:
            raise ValueError("all day counts must be >= 1")

    @classmethod
    def from_json(cls, path: str | Path) -> "CohortConfig":
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return cls(
            long_stay_threshold_days=raw.get("long_stay_threshold_days", 30),
            cancer_dx_prefixes=tuple(raw.get("cancer_dx_prefixes", ["C"])),
            rehab_dx_prefixes=tuple(raw.get("rehab_dx_prefixes", ["REH"])),
            merge_gap_days=raw.get("merge_gap_days", 2),
            readmission_window_days=raw.get("readmission_window_days", 30),
        )


@dataclass(frozen=True)
class Episode:
    """A maximal run of inpatient claims chained by the merge-gap rule."""

    patient_id: str
    start_date: date
    end_date: date
    merged_claims: tuple[ClaimRecord, ...]


@dataclass(frozen=True)
class IndexEvent:
    patient_id: str
    discharge_date: date
    label_30d: bool
    unplanned_flag: bool
    source_episode: Episode | None = None


@dataclass
class CohortAudit:
    n_patients: int = 0
    n_kept: int = 0
    exclusion_counts: dict[str, int] = field(
        default_factory=lambda: {r: 0 for r in EXCLUSION_REASONS})
    n_index_events: int = 0
    n_positive: int = 0

    @property
    def positive_rate(self) -> float:
        return self.n_positive / self.n_index_events if self.n_index_events else 0.0

    def to_dict(self) -> dict:
        return {
            "n_patients": self.n_patients,
            "n_kept": self.n_kept,
            "exclusion_counts": dict(self.exclusion_counts),
            "n_index_events": self.n_index_events,
            "n_positive": self.n_positive,
            "positive_rate": self.positive_rate,
        }


def _matches_prefix(code: str, prefixes: tuple[str, ...]) -> bool:
    return any(code.startswith(p) for p in prefixes)


def apply_exclusions(history: PatientHistory, cfg: CohortConfig) -> str | None:
    """Return the first matching exclusion reason, or None when kept."""
    for claim in history.claims:
        if claim.setting is Setting.INPATIENT \
                and claim.duration_days() > cfg.long_stay_threshold_days:
            return "long_stay"
    for claim in history.claims:
        if claim.discharge_status in _ACUTE_STATUSES:
            return "death_transfer_ama"
    for claim in history.claims:
        if any(_matches_prefix(dx, cfg.cancer_dx_prefixes) for dx in claim.dx_codes):
            return "cancer"
    for claim in history.claims:
        if claim.setting is Setting.REHAB \
                or any(_matches_prefix(dx, cfg.rehab_dx_prefixes) for dx in claim.dx_codes):
            return "rehab"
    return None


def merge_contiguous_claims(history: PatientHistory, cfg: CohortConfig) -> list[Episode]:
    """Fold sorted inpatient claims into episodes under the merge-gap rule."""
    episodes: list[Episode] = []
    current: list[ClaimRecord] = []
    end: date | None = None
    for claim in history.claims:
        if claim.setting is not Setting.INPATIENT:
            continue
        if current and (claim.admit_date - end).days <= cfg.merge_gap_days:
            current.append(claim)
            end = max(end, claim.discharge_date)
        else:
            if current:
                episodes.append(Episode(history.patient_id, current[0].admit_date,
                                        end, tuple(current)))
            current = [claim]
            end = claim.discharge_date
    if current:
        episodes.append(Episode(history.patient_id, current[0].admit_date,
                                end, tuple(current)))
    return episodes


def find_readmitting_claim(episode: Episode, history: PatientHistory,
                           cfg: CohortConfig) -> ClaimRecord | None:
    """Earliest inpatient claim admitting 1..window days after the episode ends.

    Claims merged into the episode admit on or before its end date, so they
    can never qualify.
    """
    best: ClaimRecord | None = None
    for claim in history.claims:
        if claim.setting is not Setting.INPATIENT:
            continue
        gap = (claim.admit_date - episode.end_date).days
        if 1 <= gap <= cfg.readmission_window_days:
            if best is None or claim.admit_date < best.admit_date:
                best = claim
    return best


def flag_unplanned(label_30d: bool, readmitting_claim: ClaimRecord | None) -> bool:
    """Readmission via acute care (inpatient/emergency) without a scheduled procedure."""
    if not label_30d or readmitting_claim is None:
        return False
    return (readmitting_claim.setting in (Setting.INPATIENT, Setting.EMERGENCY)
            and not readmitting_claim.planned_flag)


def label_index_events(episodes: list[Episode], history: PatientHistory,
                       cfg: CohortConfig) -> list[IndexEvent]:
    events = []
    for episode in episodes:
        readmitting = find_readmitting_claim(episode, history, cfg)
        label = readmitting is not None
        events.append(IndexEvent(
            patient_id=episode.patient_id,
            discharge_date=episode.end_date,
            label_30d=label,
            unplanned_flag=flag_unplanned(label, readmitting),
            source_episode=episode,
        ))
    return events


def build_cohort(histories: list[PatientHistory],
                 cfg: CohortConfig) -> tuple[list[IndexEvent], CohortAudit]:
    """Run exclusions, merging, and labeling over all patients.

    Patients are processed in patient-id order so audit counters and event
    order never depend on input order.
    """
    audit = CohortAudit(n_patients=len(histories))
    events: list[IndexEvent] = []
    for history in sorted(histories, key=lambda h: h.patient_id):
        reason = apply_exclusions(history, cfg)
        if reason is not None:
            audit.exclusion_counts[reason] += 1
            continue
        audit.n_kept += 1
        episodes = merge_contiguous_claims(history, cfg)
        for event in label_index_events(episodes, history, cfg):
            events.append(event)
            audit.n_index_events += 1
            audit.n_positive += int(event.label_30d)
    return events, audit


def write_cohort_csv(path: str | Path, events: list[IndexEvent]) -> None:
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "discharge_date", "label_30d", "unplanned_flag"])
        for e in events:
            writer.writerow([e.patient_id, e.discharge_date.isoformat(),
                             int(e.label_30d), int(e.unplanned_flag)])


def write_audit_json(path: str | Path, audit: CohortAudit) -> None:
    Path(path).write_text(json.dumps(audit.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def read_cohort_csv(path: str | Path) -> list[IndexEvent]:
    from .errors import DataError

    p = Path(path)
    if not p.exists():
        raise DataError(f"file not found: {p}")
    events = []
    with p.open(newline="", encoding="utf-8") as fh:
        for row in csv.DictReader(fh):
            events.append(IndexEvent(
                patient_id=row["patient_id"],
                discharge_date=date.fromisoformat(row["discharge_date"]),
                label_30d=row["label_30d"] == "1",
                unplanned_flag=row["unplanned_flag"] == "1"))
    return events
