from __future__ import annotations

from datetime import date
from pathlib import Path

import pytest

from portrisk.claims import (ClaimRecord, PatientDemographics, PatientHistory,
                             Setting, DischargeStatus, Sex)
from portrisk.synthgen import DemographicMix, SiteProfile, VocabCode

DATA_DIR = Path(__file__).parent / "data"


def make_claim(patient_id="P1", admit="2018-03-01", discharge="2018-03-03",
               setting=Setting.INPATIENT, status=DischargeStatus.HOME,
               dx=(), proc=(), drug=(), primary="", planned=False) -> ClaimRecord:
    return ClaimRecord(
        patient_id=patient_id,
        admit_date=date.fromisoformat(admit),
        discharge_date=date.fromisoformat(discharge),
        setting=setting,
        discharge_status=status,
        dx_codes=tuple(dx),
        proc_codes=tuple(proc),
        drug_codes=tuple(drug),
        primary_dx=primary or (dx[0] if dx else ""),
        planned_flag=planned,
    )


def make_history(claims, patient_id="P1", birth_year=1950,
                 sex=Sex.F) -> PatientHistory:
    demo = PatientDemographics(patient_id=patient_id, birth_year=birth_year,
                               sex=sex, region="test")
    return PatientHistory.build(demo, claims)


def tiny_profile(n_patients=300, base_rate=0.08, site_name="tiny",
                 seed_vocab=None) -> SiteProfile:
    vocab = seed_vocab or [
        VocabCode("I50", 0.20, "dx"),
        VocabCode("E11", 0.25, "dx"),
        VocabCode("J44", 0.15, "dx"),
        VocabCode("N18", 0.10, "dx"),
        VocabCode("DX001", 0.30, "dx"),
        VocabCode("DX002", 0.15, "dx"),
        VocabCode("RX001", 0.25, "drug"),
        VocabCode("PX001", 0.10, "proc"),
    ]
    return SiteProfile(
        site_name=site_name,
        n_patients=n_patients,
        code_vocab=vocab,
        mean_claims_per_patient=4.0,
        readmission_base_rate=base_rate,
        risk_coefficients={"I50": 0.9, "E11": 0.5, "J44": 0.7, "N18": 0.8,
                           "RX001": 0.4, "DX001": 0.1},
        demographic_mix=DemographicMix(age_mean=60, age_sd=11,
                                       female_fraction=0.5,
                                       age_log_odds_per_decade=0.3),
        exclusion_rates={"long_stay": 0.02, "death_or_transfer_or_ama": 0.03,
                         "cancer": 0.04, "rehab": 0.02},
    )


@pytest.fixture
def fixture_claims_path() -> Path:
    return DATA_DIR / "cohort_fixture_claims.csv"


@pytest.fixture
def fixture_demographics_path() -> Path:
    return DATA_DIR / "cohort_fixture_demographics.csv"
