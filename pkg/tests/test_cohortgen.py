from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from vo2fit import cohortgen as cg
from vo2fit.errors import ConfigurationError, DataError


@pytest.fixture(scope="module")
def cohort():
    return cg.generate_cohort(cg.PopulationSpec.desk(n_train=3000, n_longitudinal=600, seed=42))


def test_defaults_match_population_table():
    spec = cg.PopulationSpec()
    assert spec.male.vo2max == cg.Moments(41.95, 4.61)
    assert spec.female.vo2max == cg.Moments(37.44, 4.73)
    assert spec.male.rhr == cg.Moments(61.48, 8.68)
    assert spec.female.age == cg.Moments(47.66, 7.36)
    assert (spec.n_male, spec.n_female) == (5229, 5830)


@pytest.mark.parametrize("sex", ["M", "F"])
@pytest.mark.parametrize("field", ["age", "height", "weight", "bmi", "rhr", "vo2max_current"])
def test_sample_means_within_three_standard_errors(cohort, sex, field):
    spec = cg.PopulationSpec()
    people = [p for p in cohort if p.sex == sex]
    assert len(people) >= 1000
    m = getattr(spec.stats(sex), "vo2max" if field == "vo2max_current" else field)
    mean = np.mean([getattr(p, field) for p in people])
    assert abs(mean - m.mean) <= 3 * m.std / math.sqrt(len(people))


def test_rhr_signal_is_negative_and_strong(cohort):
    r = np.corrcoef([p.rhr for p in cohort], [p.vo2max_current for p in cohort])[0, 1]
    assert r < 0 and abs(r) >= 0.3


def test_cohort_is_byte_identical_for_a_seed():
    spec = cg.PopulationSpec.desk(n_train=200, n_longitudinal=40, seed=42)
    assert cg.cohort_to_csv(cg.generate_cohort(spec)) == cg.cohort_to_csv(cg.generate_cohort(spec))
    other = dataclasses.replace(spec, seed=43)
    assert cg.cohort_to_csv(cg.generate_cohort(spec)) != cg.cohort_to_csv(cg.generate_cohort(other))


def test_zero_std_is_a_configuration_error():
    with pytest.raises(ConfigurationError):
        cg.PopulationSpec.from_dict({"male": {"age": {"std": 0}}})
    with pytest.raises(ConfigurationError):
        cg.PopulationSpec(n_male=0)


def test_participant_invariants(cohort):
    for p in cohort[:500]:
        assert abs(p.bmi - p.weight / p.height ** 2) <= 1e-6 * p.bmi
        assert 1 <= p.month <= 12
        assert 15 <= p.vo2max_current <= 70
        assert 30 <= p.rhr <= 220
    with pytest.raises(DataError):
        dataclasses.replace(cohort[0], month=13)
    with pytest.raises(DataError):
        dataclasses.replace(cohort[0], bmi=cohort[0].bmi * 1.01)


def test_ground_truth_function_is_the_documented_linear_form():
    spec = cg.PopulationSpec()
    gt = cg.GROUND_TRUTH
    st_m = spec.male
    age, bmi, rhr, act = 50.0, 25.0, 70.0, 0.5
    rz = (rhr - st_m.rhr.mean) / st_m.rhr.std
    expected = (st_m.vo2max.mean + gt.age * (age - st_m.age.mean) + gt.bmi * (bmi - st_m.bmi.mean)
                + gt.rhr * (rhr - st_m.rhr.mean) + gt.activity * act + gt.activity_x_rhr * act * rz)
    assert cg.vo2max_expected("M", age, bmi, rhr, act, spec) == pytest.approx(expected, rel=1e-15)


def test_identity_drift_keeps_vo2max_and_ages_seven_years(cohort):
    p = dataclasses.replace(cohort[0], age=47.0)
    q = cg.generate_future_snapshot(p, cg.DriftSpec.identity(), seed=1)
    assert q.vo2max_future == p.vo2max_current
    assert q.age == 54.0
    assert q.cohort == "FII"
    assert cg.generate_future_snapshot(p, cg.DriftSpec(), 3) == cg.generate_future_snapshot(p, cg.DriftSpec(), 3)


def test_default_drift_is_roughly_symmetric():
    study = cg.generate_study(cg.PopulationSpec.desk(n_train=100, n_longitudinal=600, seed=5))
    deltas = np.array([p.vo2max_current - p.vo2max_future for p in study.fi if p.vo2max_future is not None])
    assert (deltas > 0).sum() > 0.3 * len(deltas) and (deltas < 0).sum() > 0.3 * len(deltas)


def test_study_round_trips_through_csv(tmp_path):
    study = cg.generate_study(cg.PopulationSpec.desk(n_train=50, n_longitudinal=20, seed=3))
    cg.write_study(study, tmp_path)
    back = cg.read_study(tmp_path)
    assert back.fi == study.fi
    assert back.fii == study.fii
    assert back.fii_with_sensors == study.fii_with_sensors
    header = (tmp_path / "cohort.csv").read_text().splitlines()[0]
    assert header == "id,cohort,sex,age,height_m,weight_kg,bmi,rhr_bpm,month,vo2max_current,vo2max_future"


def test_sensor_week_shape_and_determinism(cohort):
    p = cohort[0]
    w = cg.generate_sensor_week(p, cg.week_seed(1, p.id, "FI"))
    assert len(w) == 8640
    assert np.all(np.diff(w.minute_index) == 1)
    for ch in (w.hr, w.accel, w.hrv):
        assert np.all(np.isfinite(ch)) and np.all(ch >= 0)
    w2 = cg.generate_sensor_week(p, cg.week_seed(1, p.id, "FI"))
    assert np.array_equal(w.hr, w2.hr) and np.array_equal(w.accel, w2.accel)


def test_injected_nonwear_has_a_long_zero_run(cohort):
    w = cg.generate_sensor_week(cohort[1], 9, force_nonwear=True)
    (start, length), = w.nonwear_episodes
    assert length >= 91
    assert np.all(w.accel[start:start + length] == 0)
    run = best = 0
    for a in w.accel:
        run = run + 1 if a == 0 else 0
        best = max(best, run)
    assert best >= 91


def test_nonwear_injection_rate_near_ten_percent(cohort):
    hits = sum(bool(cg.generate_sensor_week(p, cg.week_seed(0, p.id, "FI")).nonwear_episodes) for p in cohort[:400])
    assert 20 <= hits <= 65


def test_fitter_participant_has_lower_hr_for_same_activity(cohort):
    base = dataclasses.replace(cohort[0], activity=0.0)
    fit = dataclasses.replace(base, vo2max_current=50.0)
    unfit = dataclasses.replace(base, vo2max_current=30.0)
    wa = cg.generate_sensor_week(fit, 5, force_nonwear=False)
    wb = cg.generate_sensor_week(unfit, 5, force_nonwear=False)
    assert np.array_equal(wa.accel, wb.accel)
    assert wa.hr.mean() < wb.hr.mean()
    met = np.array([1.0, 3.0, 6.0])
    assert np.all(cg.hr_response(met[1:], 60, 50) < cg.hr_response(met[1:], 60, 30))


@given(st.floats(0, 12), st.floats(15, 70), st.floats(15, 70))
def test_hr_response_slope_decreases_with_vo2max(met, v1, v2):
    lo, hi = sorted((v1, v2))
    assert cg.hr_response(met, 60.0, hi) <= cg.hr_response(met, 60.0, lo) + 1e-12


def test_sensor_csv_round_trip(tmp_path, cohort):
    w = cg.generate_sensor_week(cohort[2], 4, force_nonwear=True)
    path = tmp_path / "w.csv"
    cg.write_sensor_csv(w, path)
    assert path.read_text().splitlines()[0] == "minute_index,hr_bpm,accel_mg,hrv_ms"
    back = cg.read_sensor_csv(path, w.participant_id, w.start_month)
    assert np.array_equal(back.hr, w.hr) and np.array_equal(back.accel, w.accel)
    assert np.array_equal(back.hrv, w.hrv)
