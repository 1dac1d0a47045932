from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from vo2fit import cohortgen as cg
from vo2fit import featurize as fz
from vo2fit import sensorproc as sp
from vo2fit.errors import DataError, FeaturizationError, LayoutMismatchError


def brute_percentile(x, q):
    s = sorted(x)
    pos = (len(s) - 1) * q / 100
    lo = math.floor(pos)
    hi = min(lo + 1, len(s) - 1)
    return s[lo] + (s[hi] - s[lo]) * (pos - lo)


def brute_stats(x, t):
    n = len(x)
    mean = sum(x) / n
    tm = sum(t) / n
    sxx = sum((ti - tm) ** 2 for ti in t)
    return {
        "mean": mean, "min": min(x), "max": max(x),
        "std": math.sqrt(sum((v - mean) ** 2 for v in x) / n),
        "p25": brute_percentile(x, 25), "p50": brute_percentile(x, 50), "p75": brute_percentile(x, 75),
        "slope": sum((ti - tm) * (v - mean) for ti, v in zip(t, x)) / sxx if sxx else 0.0,
    }


def test_canonical_layout_has_68_unique_entries():
    layout = fz.CANONICAL_LAYOUT
    assert len(layout) == 68
    assert len(set(layout.names)) == 68
    assert {s for _, _, s in layout.entries if s} <= set(fz.STATISTICS)
    assert layout.names[-8:] == ["age", "sex", "weight", "height", "bmi", "rhr", "month_sin", "month_cos"]


def test_summary_examples():
    s = fz.summarize_channel([5.0] * 10)
    assert s == {"mean": 5, "min": 5, "max": 5, "std": 0, "p25": 5, "p50": 5, "p75": 5, "slope": 0}
    assert fz.summarize_channel(np.arange(50.0))["slope"] == pytest.approx(1.0, abs=1e-12)
    s = fz.summarize_channel([1.0, 2.0, 3.0, 4.0])
    assert (s["p25"], s["p50"], s["p75"]) == (1.75, 2.5, 3.25)
    with pytest.raises(FeaturizationError):
        fz.summarize_channel([1.0, np.nan])


@given(arrays(float, st.integers(2, 1000), elements=st.floats(-1e3, 1e3)))
def test_statistics_match_brute_force(x):
    t = list(range(len(x)))
    got = fz.summarize_channel(x)
    want = brute_stats(list(x), t)
    scale = max(1.0, float(np.max(np.abs(x))))
    for k in want:
        assert got[k] == pytest.approx(want[k], rel=1e-9, abs=1e-9 * scale), k


@given(arrays(float, st.integers(3, 200), elements=st.floats(0, 100)), st.randoms())
def test_shuffle_changes_only_the_slope(x, rnd):
    perm = rnd.sample(range(len(x)), len(x))
    a, b = fz.summarize_channel(x), fz.summarize_channel(x[perm])
    for k in ("mean", "min", "max", "std", "p25", "p50", "p75"):
        assert a[k] == pytest.approx(b[k], rel=1e-12, abs=1e-12)


def test_cyclical_month_examples():
    s, c = fz.cyclical_month(12)
    assert abs(s) < 1e-12 and c == pytest.approx(1.0)
    s, c = fz.cyclical_month(3)
    assert s == pytest.approx(1.0) and abs(c) < 1e-12
    d = lambda a, b: math.dist(fz.cyclical_month(a), fz.cyclical_month(b))  # noqa: E731
    assert d(12, 1) == pytest.approx(d(1, 2), abs=1e-12)
    for bad in (0, 13, 2.5):
        with pytest.raises(DataError):
            fz.cyclical_month(bad)


@pytest.fixture(scope="module")
def participant_week():
    p = cg.generate_cohort(cg.PopulationSpec.desk(n_train=20, n_longitudinal=0, seed=1))[0]
    return p, sp.clean_week(cg.generate_sensor_week(p, 3, force_nonwear=False))


def test_feature_vector_layout_and_purity(participant_week):
    p, w = participant_week
    v = fz.build_feature_vector(p, w)
    assert len(v.values) == 68 and np.all(np.isfinite(v.values))
    assert np.array_equal(v.values, fz.build_feature_vector(p, w).values)
    names = fz.CANONICAL_LAYOUT.names
    assert v.values[names.index("age")] == p.age
    assert v.values[names.index("sex")] == (1.0 if p.sex == "M" else 0.0)
    assert v.values[names.index("month_sin")] == fz.cyclical_month(p.month)[0]
    idx, hr = w.channel("hr")
    assert v.values[names.index("hr_mean")] == pytest.approx(hr.mean())


def test_ineligible_week_is_excluded(participant_week):
    p, w = participant_week
    short = sp.CleanWeek(**{**w.__dict__, "wear": np.r_[np.ones(4000, bool), np.zeros(4640, bool)]})
    with pytest.raises(FeaturizationError):
        fz.build_feature_vector(p, short)


def test_features_and_layout_round_trip(tmp_path, participant_week):
    p, w = participant_week
    v = fz.build_feature_vector(p, w)
    fz.write_features_csv([v], tmp_path / "f.csv")
    fz.write_layout(fz.CANONICAL_LAYOUT, tmp_path / "layout.json")
    layout = fz.read_layout(tmp_path / "layout.json")
    assert layout == fz.CANONICAL_LAYOUT
    (back,) = fz.read_features_csv(tmp_path / "f.csv", layout)
    assert np.array_equal(back.values, v.values)
    assert back.label_current == v.label_current and back.label_future is None
    header = (tmp_path / "f.csv").read_text().splitlines()[0].split(",")
    assert header[:4] == ["id", "label_current", "label_future", "f000"] and header[-1] == "f067"


def test_layout_version_mismatch_is_rejected(participant_week):
    p, w = participant_week
    v = fz.build_feature_vector(p, w)
    v.layout_version = "other"
    with pytest.raises(LayoutMismatchError):
        fz.feature_matrix([v])
