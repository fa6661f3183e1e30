from __future__ import annotations

import copy

import pytest

from portrisk.claims import (Setting, DischargeStatus, validate_history,
                             write_claims_file, write_demographics_file)
from portrisk.cohort import CohortConfig, build_cohort
from portrisk.errors import ConfigError
from portrisk.synthgen import (ShiftSpec, SiteProfile, VocabCode, generate_site,
                               shift_profile, write_labels_csv)

from conftest import tiny_profile


def _site_bytes(tmp_path, histories, labels, tag):
    write_claims_file(tmp_path / f"{tag}_claims.csv", histories)
    write_demographics_file(tmp_path / f"{tag}_demo.csv", histories)
    write_labels_csv(tmp_path / f"{tag}_labels.csv", labels)
    return tuple((tmp_path / f"{tag}_{n}.csv").read_bytes()
                 for n in ("claims", "demo", "labels"))


def test_generation_is_deterministic(tmp_path):
    profile = tiny_profile(n_patients=200)
    a = _site_bytes(tmp_path, *generate_site(profile, 99), tag="a")
    b = _site_bytes(tmp_path, *generate_site(profile, 99), tag="b")
    assert a == b


def test_different_seeds_differ(tmp_path):
    profile = tiny_profile(n_patients=200)
    a = _site_bytes(tmp_path, *generate_site(profile, 1), tag="a")
    b = _site_bytes(tmp_path, *generate_site(profile, 2), tag="b")
    assert a != b


def test_generated_histories_all_validate():
    histories, _ = generate_site(tiny_profile(n_patients=300), 5)
    for h in histories:
        assert validate_history(h) == []


def test_empirical_positive_rate_tracks_base_rate():
    profile = tiny_profile(n_patients=10000, base_rate=0.08)
    _, labels = generate_site(profile, 42)
    rate = sum(r.label for r in labels) / len(labels)
    assert 0.06 <= rate <= 0.10


def test_zero_exclusion_rates_leave_no_markers():
    profile = tiny_profile(n_patients=400)
    profile.exclusion_rates = {k: 0.0 for k in profile.exclusion_rates}
    histories, _ = generate_site(profile, 3)
    for h in histories:
        for c in h.claims:
            assert c.setting is not Setting.REHAB
            assert c.discharge_status is DischargeStatus.HOME
            assert not any(dx.startswith(("C", "REH")) for dx in c.dx_codes)


def test_zero_patients_empty_output():
    profile = tiny_profile(n_patients=0)
    histories, labels = generate_site(profile, 0)
    assert histories == [] and labels == []


def test_invalid_profile_rejected():
    profile = tiny_profile()
    profile.readmission_base_rate = 0.15
    with pytest.raises(ConfigError):
        generate_site(profile, 0)


def test_planted_labels_agree_with_cohort():
    histories, labels = generate_site(tiny_profile(n_patients=600), 17)
    events, _ = build_cohort(histories, CohortConfig())
    planted = {(r.patient_id, r.discharge_date): r.label for r in labels}
    recovered = {(e.patient_id, e.discharge_date): e.label_30d for e in events}
    assert recovered  # nonempty cohort
    for key, label in recovered.items():
        assert planted[key] == label
    # every planted episode of a kept patient is recovered
    kept = {e.patient_id for e in events}
    for (pid, d), _ in planted.items():
        if pid in kept:
            assert (pid, d) in recovered


# --- shift_profile -------------------------------------------------------

def test_zero_shift_is_identity():
    base = tiny_profile()
    shifted = shift_profile(base, ShiftSpec())
    assert shifted == base
    assert shifted is not base


def test_coefficient_flip_touches_only_that_coefficient():
    base = tiny_profile()
    before = copy.deepcopy(base)
    shifted = shift_profile(base, ShiftSpec(coefficient_scales={"I50": -1.0}))
    assert base == before  # base untouched
    assert shifted.risk_coefficients["I50"] == -base.risk_coefficients["I50"]
    for code, coef in base.risk_coefficients.items():
        if code != "I50":
            assert shifted.risk_coefficients[code] == coef
    assert shifted.code_vocab == base.code_vocab


def test_prevalence_shift_shows_up_empirically():
    base = tiny_profile(n_patients=10000)
    base.code_vocab = [VocabCode("N18", 0.10, "dx"), VocabCode("E11", 0.20, "dx")]
    base.risk_coefficients = {"N18": 0.8, "E11": 0.4}
    shifted = shift_profile(base, ShiftSpec(prevalence_deltas={"N18": 0.20}))
    histories, _ = generate_site(shifted, 8)
    carrying = sum(
        1 for h in histories
        if any("N18" in c.dx_codes for c in h.claims))
    prevalence = carrying / len(histories)
    assert abs(prevalence - 0.30) <= 0.02


def test_shift_out_of_range_rejected():
    base = tiny_profile()
    with pytest.raises(ConfigError):
        shift_profile(base, ShiftSpec(prevalence_deltas={"I50": 0.95}))
    with pytest.raises(ConfigError):
        shift_profile(base, ShiftSpec(prevalence_deltas={"NOPE": 0.1}))
    with pytest.raises(ConfigError):
        shift_profile(base, ShiftSpec(base_rate_delta=0.5))


def test_profile_json_round_trip(tmp_path):
    profile = tiny_profile()
    profile.write_json(tmp_path / "p.json")
    loaded = SiteProfile.from_json(tmp_path / "p.json")
    assert loaded == profile
