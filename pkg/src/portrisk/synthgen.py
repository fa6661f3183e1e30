"""Seeded synthetic two-site claims generator with controllable shift.

Each patient is generated from an independent substream derived from
(seed, patient index), so output is a pure function of (profile, seed)
and generation could fan out per patient without changing a byte.

Readmission labels come from a logistic model over the patient's planted
codes plus age.  The intercept is solved by bisection so the positive
fraction over all planted index events matches the profile's base rate.
Claim timelines are laid out so that the cohort builder recovers exactly
the planted episodes and labels:

* non-inpatient history claims never form episodes;
* inpatient history claims sit in two windows ending 45+ days before the
  index admission, far enough apart that none of them readmits another;
* a positive label plants an inpatient claim admitting 3..30 days after
  the index discharge (more than the 2-day merge gap, inside the 30-day
  window), and nothing is ever planted after a negative index discharge.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field, asdict, replace
from datetime import date, timedelta
from pathlib import Path

import numpy as np

from .claims import (ClaimRecord, PatientDemographics, PatientHistory,
                     Setting, DischargeStatus, Sex)
from .errors import ConfigError

# Planting constants; aligned with the default cohort rules.
LONG_STAY_PLANT_DAYS = 45      # exceeds the default 30-day long-stay threshold
READMIT_GAP_MIN = 3            # first gap that survives the 2-day merge rule
READMIT_GAP_MAX = 30
HISTORY_IP_WINDOWS = ((365, 225), (185, 45))  # days before index admit

_ACUTE_STATUSES = (DischargeStatus.IN_HOSPITAL_DEATH,
                   DischargeStatus.TRANSFER_ACUTE,
                   DischargeStatus.LEFT_AMA)


@dataclass(frozen=True)
class VocabCode:
    code: str
    prevalence: float
    kind: str = "dx"  # dx | drug | proc


@dataclass
class DemographicMix:
    age_mean: float = 60.0
    age_sd: float = 12.0
    female_fraction: float = 0.52
    age_log_odds_per_decade: float = 0.2


@dataclass
class SiteProfile:
    site_name: str
    n_patients: int
    code_vocab: list[VocabCode]
    mean_claims_per_patient: float
    readmission_base_rate: float
    risk_coefficients: dict[str, float]
    demographic_mix: DemographicMix = field(default_factory=DemographicMix)
    exclusion_rates: dict[str, float] = field(default_factory=dict)
    index_admit_start: date = date(2018, 1, 1)
    index_admit_span_days: int = 480
    cancer_code: str = "C509"
    rehab_code: str = "REH01"

    def validate(self) -> None:
        if self.n_patients < 0:
            raise ConfigError("n_patients must be nonnegative")
        if not (0.0 < self.readmission_base_rate < 0.10):
            raise ConfigError(
                f"readmission_base_rate must be in (0, 0.10), got {self.readmission_base_rate}")
        if self.mean_claims_per_patient <= 0:
            raise ConfigError("mean_claims_per_patient must be positive")
        for vc in self.code_vocab:
            if not (0.0 <= vc.prevalence <= 1.0):
                raise ConfigError(f"prevalence of {vc.code} outside [0, 1]")
            if vc.kind not in ("dx", "drug", "proc"):
                raise ConfigError(f"unknown code kind {vc.kind!r}")
        for key, rate in self.exclusion_rates.items():
            if key not in ("long_stay", "death_or_transfer_or_ama", "cancer", "rehab"):
                raise ConfigError(f"unknown exclusion rate key {key!r}")
            if not (0.0 <= rate <= 1.0):
                raise ConfigError(f"exclusion rate {key} outside [0, 1]")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["index_admit_start"] = self.index_admit_start.isoformat()
        return d

    @classmethod
    def from_dict(cls, raw: dict) -> "SiteProfile":
        raw = dict(raw)
        raw["code_vocab"] = [VocabCode(**v) for v in raw["code_vocab"]]
        raw["demographic_mix"] = DemographicMix(**raw.get("demographic_mix", {}))
        if "index_admit_start" in raw:
            raw["index_admit_start"] = date.fromisoformat(raw["index_admit_start"])
        return cls(**raw)

    @classmethod
    def from_json(cls, path: str | Path) -> "SiteProfile":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def write_json(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


@dataclass
class ShiftSpec:
    """Perturbation applied to a base profile to induce inter-site shift."""

    prevalence_deltas: dict[str, float] = field(default_factory=dict)
    coefficient_scales: dict[str, float] = field(default_factory=dict)
    coefficient_deltas: dict[str, float] = field(default_factory=dict)
    base_rate_delta: float = 0.0
    age_mean_delta: float = 0.0

    @classmethod
    def from_dict(cls, raw: dict) -> "ShiftSpec":
        return cls(**raw)


def shift_profile(base: SiteProfile, shift: ShiftSpec) -> SiteProfile:
    """Return a perturbed copy of ``base``; the base profile is untouched."""
    prof = copy.deepcopy(base)
    for code, delta in shift.prevalence_deltas.items():
        found = False
        for i, vc in enumerate(prof.code_vocab):
            if vc.code == code:
                new_prev = vc.prevalence + delta
                if not (0.0 <= new_prev <= 1.0):
                    raise ConfigError(
                        f"prevalence shift pushes {code} to {new_prev}, outside [0, 1]")
                prof.code_vocab[i] = VocabCode(vc.code, new_prev, vc.kind)
                found = True
        if not found:
            raise ConfigError(f"prevalence shift references unknown code {code!r}")
    for code, scale in shift.coefficient_scales.items():
        if code not in prof.risk_coefficients:
            raise ConfigError(f"coefficient scale references unknown code {code!r}")
        prof.risk_coefficients[code] *= scale
    for code, delta in shift.coefficient_deltas.items():
        prof.risk_coefficients[code] = prof.risk_coefficients.get(code, 0.0) + delta
    prof.readmission_base_rate += shift.base_rate_delta
    prof.demographic_mix.age_mean += shift.age_mean_delta
    prof.validate()
    return prof


@dataclass(frozen=True)
class PlantedLabel:
    patient_id: str
    discharge_date: date
    label: bool


@dataclass
class _PatientDraft:
    """Everything drawn in pass 1; the label and readmission come in pass 2."""

    demographics: PatientDemographics
    claims: list[ClaimRecord]
    episode_ends: list[date]        # history inpatient episodes, all labeled false
    index_end: date
    index_primary_dx_pool: tuple[str, ...]
    logit: float
    death_marker: bool


def _sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def _draw_codes_for_claim(rng: np.random.Generator, present: list[str],
                          p_each: float) -> list[str]:
    if not present:
        return []
    mask = rng.random(len(present)) < p_each
    return [c for c, m in zip(present, mask) if m]


def _draft_patient(profile: SiteProfile, seed: int, index: int) -> _PatientDraft:
    rng = np.random.default_rng([seed, index])
    mix = profile.demographic_mix
    pid = f"{profile.site_name}-{index:06d}"

    index_admit = profile.index_admit_start + timedelta(
        days=int(rng.integers(0, profile.index_admit_span_days + 1)))

    age = int(np.clip(round(rng.normal(mix.age_mean, mix.age_sd)), 20, 90))
    sex = Sex.F if rng.random() < mix.female_fraction else Sex.M
    demo = PatientDemographics(patient_id=pid, birth_year=index_admit.year - age,
                               sex=sex, region=profile.site_name)

    ex = profile.exclusion_rates
    mark_long = rng.random() < ex.get("long_stay", 0.0)
    mark_acute = rng.random() < ex.get("death_or_transfer_or_ama", 0.0)
    mark_cancer = rng.random() < ex.get("cancer", 0.0)
    mark_rehab = rng.random() < ex.get("rehab", 0.0)
    acute_status = _ACUTE_STATUSES[int(rng.integers(0, 3))] if mark_acute else None

    # Patient-level code presence; prevalence is the per-patient carry rate.
    present_mask = rng.random(len(profile.code_vocab)) < np.array(
        [vc.prevalence for vc in profile.code_vocab])
    present = [vc for vc, m in zip(profile.code_vocab, present_mask) if m]
    present_dx = [vc.code for vc in present if vc.kind == "dx"]
    present_drug = [vc.code for vc in present if vc.kind == "drug"]
    present_proc = [vc.code for vc in present if vc.kind == "proc"]

    claims: list[ClaimRecord] = []

    # Non-inpatient history claims carry most of the code signal.
    n_hist = int(np.clip(rng.poisson(profile.mean_claims_per_patient), 1, 24))
    for _ in range(n_hist):
        offset = int(rng.integers(3, 359))
        admit = index_admit - timedelta(days=offset)
        setting = Setting.OUTPATIENT if rng.random() < 0.75 else Setting.EMERGENCY
        dx = _draw_codes_for_claim(rng, present_dx, 0.35)
        claims.append(ClaimRecord(
            patient_id=pid, admit_date=admit, discharge_date=admit,
            setting=setting, discharge_status=DischargeStatus.HOME,
            dx_codes=tuple(dx), primary_dx=dx[0] if dx else "",
            drug_codes=tuple(_draw_codes_for_claim(rng, present_drug, 0.35)),
            proc_codes=tuple(_draw_codes_for_claim(rng, present_proc, 0.25)),
            planned_flag=bool(rng.random() < 0.10),
        ))
    # Guarantee every present code shows up on at least one history claim.
    for code_list, pool in ((present_dx, "dx_codes"), (present_drug, "drug_codes"),
                            (present_proc, "proc_codes")):
        for code in code_list:
            slot = int(rng.integers(0, n_hist))
            claim = claims[slot]
            codes = getattr(claim, pool)
            if code in codes:
                continue
            fields = {pool: codes + (code,)}
            if pool == "dx_codes" and not claim.primary_dx:
                fields["primary_dx"] = code
            claims[slot] = replace(claim, **fields)

    if mark_cancer:
        slot = int(rng.integers(0, n_hist))
        claim = claims[slot]
        claims[slot] = replace(claim,
                               dx_codes=claim.dx_codes + (profile.cancer_code,),
                               primary_dx=claim.primary_dx or profile.cancer_code)
    if mark_rehab:
        offset = int(rng.integers(10, 200))
        admit = index_admit - timedelta(days=offset)
        if rng.random() < 0.5:
            claims.append(ClaimRecord(
                patient_id=pid, admit_date=admit, discharge_date=admit,
                setting=Setting.REHAB, discharge_status=DischargeStatus.HOME,
                dx_codes=(profile.rehab_code,), primary_dx=profile.rehab_code))
        else:
            claims.append(ClaimRecord(
                patient_id=pid, admit_date=admit, discharge_date=admit,
                setting=Setting.OUTPATIENT, discharge_status=DischargeStatus.HOME,
                dx_codes=(profile.rehab_code,), primary_dx=profile.rehab_code))

    # Inpatient history stays: isolated windows so none of them can readmit
    # another or bleed into the index episode.
    episode_ends: list[date] = []
    for hi, lo in HISTORY_IP_WINDOWS:
        if rng.random() >= 0.30:
            continue
        offset = int(rng.integers(lo, hi - 6))
        admit = index_admit - timedelta(days=offset)
        dur = int(rng.integers(1, 6))
        dx = _draw_codes_for_claim(rng, present_dx, 0.5)
        claims.append(ClaimRecord(
            patient_id=pid, admit_date=admit,
            discharge_date=admit + timedelta(days=dur),
            setting=Setting.INPATIENT, discharge_status=DischargeStatus.HOME,
            dx_codes=tuple(dx), primary_dx=dx[0] if dx else "",
            drug_codes=tuple(_draw_codes_for_claim(rng, present_drug, 0.3)),
            planned_flag=bool(rng.random() < 0.10)))
        episode_ends.append(admit + timedelta(days=dur))

    # Index episode: one long claim for planted long stays, otherwise one to
    # three contiguous segments chained by gaps inside the merge rule.
    if mark_long:
        segments = [(index_admit, LONG_STAY_PLANT_DAYS)]
    else:
        n_seg = int(rng.choice([1, 2, 3], p=[0.6, 0.3, 0.1]))
        segments = []
        admit = index_admit
        for s in range(n_seg):
            dur = int(rng.integers(1, 8)) if s == 0 else int(rng.integers(1, 6))
            segments.append((admit, dur))
            admit = admit + timedelta(days=dur + int(rng.integers(1, 3)))
    index_end = segments[-1][0] + timedelta(days=segments[-1][1])
    for s, (admit, dur) in enumerate(segments):
        dx = _draw_codes_for_claim(rng, present_dx, 0.6)
        last = s == len(segments) - 1
        claims.append(ClaimRecord(
            patient_id=pid, admit_date=admit,
            discharge_date=admit + timedelta(days=dur),
            setting=Setting.INPATIENT,
            discharge_status=(acute_status if (last and acute_status) else
                              DischargeStatus.HOME),
            dx_codes=tuple(dx), primary_dx=dx[0] if dx else "",
            drug_codes=tuple(_draw_codes_for_claim(rng, present_drug, 0.3)),
            proc_codes=tuple(_draw_codes_for_claim(rng, present_proc, 0.3)),
            planned_flag=False))

    present_codes = {vc.code for vc in present}
    logit = sum(coef for code, coef in profile.risk_coefficients.items()
                if code in present_codes)
    logit += mix.age_log_odds_per_decade * (age - mix.age_mean) / 10.0

    death = acute_status is DischargeStatus.IN_HOSPITAL_DEATH
    return _PatientDraft(demographics=demo, claims=claims,
                         episode_ends=episode_ends, index_end=index_end,
                         index_primary_dx_pool=tuple(present_dx),
                         logit=logit, death_marker=death)


def _solve_intercept(drafts: list[_PatientDraft], target_rate: float) -> float:
    """Bisection so the expected positive fraction over all planted index
    events (history episodes + index + expected readmission episodes)
    equals the base rate."""
    n_base = sum(len(d.episode_ends) + 1 for d in drafts)
    eligible = [d.logit for d in drafts if not d.death_marker]
    if not eligible or n_base == 0:
        return 0.0

    def event_rate(c: float) -> float:
        expected_pos = sum(_sigmoid(l + c) for l in eligible)
        return expected_pos / (n_base + expected_pos)

    lo, hi = -20.0, 20.0
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if event_rate(mid) < target_rate:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


def generate_site(profile: SiteProfile,
                  seed: int) -> tuple[list[PatientHistory], list[PlantedLabel]]:
    """Generate one site's histories plus the planted ground-truth labels.

    Deterministic for a fixed (profile, seed).  The returned label list has
    one entry per planted inpatient episode, matching what the cohort
    builder recovers for non-excluded patients.
    """
    profile.validate()
    if profile.n_patients == 0:
        return [], []

    drafts = [_draft_patient(profile, seed, i) for i in range(profile.n_patients)]
    intercept = _solve_intercept(drafts, profile.readmission_base_rate)

    histories: list[PatientHistory] = []
    labels: list[PlantedLabel] = []
    for i, draft in enumerate(drafts):
        rng = np.random.default_rng([seed, i, 1])
        pid = draft.demographics.patient_id
        p = 0.0 if draft.death_marker else _sigmoid(draft.logit + intercept)
        positive = bool(rng.random() < p)

        claims = list(draft.claims)
        for end in draft.episode_ends:
            labels.append(PlantedLabel(pid, end, False))
        labels.append(PlantedLabel(pid, draft.index_end, positive))
        if positive:
            gap = int(rng.integers(READMIT_GAP_MIN, READMIT_GAP_MAX + 1))
            dur = int(rng.integers(1, 7))
            admit = draft.index_end + timedelta(days=gap)
            dx = _draw_codes_for_claim(rng, list(draft.index_primary_dx_pool), 0.5)
            claims.append(ClaimRecord(
                patient_id=pid, admit_date=admit,
                discharge_date=admit + timedelta(days=dur),
                setting=Setting.INPATIENT, discharge_status=DischargeStatus.HOME,
                dx_codes=tuple(dx), primary_dx=dx[0] if dx else "",
                planned_flag=bool(rng.random() < 0.15)))
            labels.append(PlantedLabel(pid, admit + timedelta(days=dur), False))

        histories.append(PatientHistory.build(draft.demographics, claims))

    labels.sort(key=lambda r: (r.patient_id, r.discharge_date))
    return histories, labels


def write_labels_csv(path: str | Path, labels: list[PlantedLabel]) -> None:
    import csv
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["patient_id", "index_discharge_date", "label"])
        for r in labels:
            writer.writerow([r.patient_id, r.discharge_date.isoformat(), int(r.label)])
