"""Wear-time filtering and derived channels for one participant-week."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from vo2fit.cohortgen import ACCEL_TO_INTENSITY, HR_RANGE, J_PER_MET, MINUTES_PER_DAY, SensorWeek
from vo2fit.errors import DataError

log = logging.getLogger(__name__)

NONWEAR_MIN_RUN = 91  # strictly more than 90 minutes
MIN_WEAR_MINUTES = 72 * 60
SPIKE_BPM = 40.0
ENMO_SCALE = 0.0060321
ENMO_OFFSET = 0.057

SEDENTARY, LIGHT, MODERATE_VIGOROUS, VIGOROUS = 0, 1, 2, 3
CLASS_NAMES = ("sedentary", "light", "moderate_vigorous", "vigorous")


@dataclass(frozen=True)
class IntensityThresholds:
    """Cut-points for the four intensity classes.

    ``channel`` selects which per-minute series the cut-points apply to.  The
    default profile uses METs; ``SUPPLEMENT_PROFILE`` applies the alternate
    accelerometer cut-points (no light band).
    """

    channel: str = "met"
    sedentary_max: float = 1.5
    mvpa_min: float = 3.0
    vigorous_above: float = 6.0
    vigorous_inclusive: bool = False


MET_PROFILE = IntensityThresholds()
SUPPLEMENT_PROFILE = IntensityThresholds(channel="accel", sedentary_max=1.0, mvpa_min=1.0,
                                         vigorous_above=4.15, vigorous_inclusive=True)


def _runs(mask: np.ndarray):
    """(start, stop) of every maximal run of True."""
    padded = np.concatenate([[False], mask, [False]]).astype(np.int8)
    edges = np.flatnonzero(np.diff(padded))
    return list(zip(edges[::2], edges[1::2]))


def detect_nonwear(week: SensorWeek, min_run: int = NONWEAR_MIN_RUN) -> np.ndarray:
    """Wear mask: False over runs of > 90 min with no movement and implausible HR.

    A minute is a non-wear candidate when the accelerometer reads exactly zero
    and the heart rate is below 30 bpm or identical to an adjacent minute
    (a frozen reading).  Candidate runs of at least ``min_run`` minutes are
    masked out.
    """
    hr = np.asarray(week.hr, float)
    flat = np.zeros(len(hr), dtype=bool)
    if len(hr) > 1:
        same = hr[1:] == hr[:-1]
        flat[1:] |= same
        flat[:-1] |= same
    candidate = (np.asarray(week.accel) == 0) & ((hr < HR_RANGE[0]) | flat)
    wear = np.ones(len(hr), dtype=bool)
    for start, stop in _runs(candidate):
        if stop - start >= min_run:
            wear[start:stop] = False
    return wear


def accel_to_met(accel, slope: float = ACCEL_TO_INTENSITY):
    """METs from acceleration: intensity (J/min/kg) = slope * accel, 1 MET = 71 J/min/kg."""
    a = np.asarray(accel, float)
    if np.any(a < 0):
        raise DataError("acceleration must be non-negative")
    return intensity_to_met(slope * a)


def intensity_to_met(intensity):
    return np.asarray(intensity, float) / J_PER_MET


def classify_intensity(values, thresholds: IntensityThresholds = MET_PROFILE):
    v = np.asarray(values, float)
    if np.any(v < 0):
        raise DataError("intensity values must be non-negative")
    t = thresholds
    vig = v >= t.vigorous_above if t.vigorous_inclusive else v > t.vigorous_above
    out = np.full(v.shape, LIGHT, dtype=np.int8)
    out[(v <= t.sedentary_max) & (v < t.mvpa_min)] = SEDENTARY
    out[v >= t.mvpa_min] = MODERATE_VIGOROUS
    out[vig] = VIGOROUS
    return out


def derive_hrv(ibis: Sequence[float]) -> float:
    """Second-longest minus second-shortest inter-beat interval (ms); NaN if < 4 beats."""
    x = np.sort(np.asarray(ibis, float))
    if len(x) < 4:
        return float("nan")
    return float(x[-2] - x[1])


def derive_enmo(accel):
    a = np.asarray(accel, float)
    if np.any(a < 0):
        raise DataError("acceleration must be non-negative")
    return a / ENMO_SCALE + ENMO_OFFSET


def filter_hr(hr: np.ndarray, wear: np.ndarray) -> np.ndarray:
    """Clamp to the physiological range and drop isolated spikes (NaN)."""
    out = np.clip(np.asarray(hr, float), *HR_RANGE)
    out[~wear] = np.nan
    if len(out) >= 3:
        mid = out[1:-1]
        spike = (mid - out[:-2] > SPIKE_BPM) & (mid - out[2:] > SPIKE_BPM)
        out[1:-1][spike] = np.nan
    return out


@dataclass
class CleanWeek:
    participant_id: str
    start_month: int
    minute_index: np.ndarray
    wear: np.ndarray
    hr: np.ndarray  # NaN where filtered or non-wear
    accel: np.ndarray
    hrv: np.ndarray
    met: np.ndarray
    enmo: np.ndarray
    intensity_class: np.ndarray

    @property
    def wear_minutes(self) -> int:
        return int(self.wear.sum())

    def channel(self, name: str) -> np.ndarray:
        """Wear-masked values of a per-minute channel with their minute index."""
        v = getattr(self, name)
        keep = self.wear & np.isfinite(v)
        return self.minute_index[keep], v[keep]


def clean_week(week: SensorWeek, thresholds: IntensityThresholds = MET_PROFILE) -> CleanWeek:
    wear = detect_nonwear(week)
    accel = np.asarray(week.accel, float)
    met = accel_to_met(accel)
    hrv = np.asarray(week.hrv, float).copy()
    hrv[~wear] = np.nan
    cls_src = met if thresholds.channel == "met" else accel
    return CleanWeek(
        participant_id=week.participant_id, start_month=week.start_month,
        minute_index=np.asarray(week.minute_index), wear=wear, hr=filter_hr(week.hr, wear),
        accel=accel, hrv=hrv, met=met, enmo=derive_enmo(accel),
        intensity_class=classify_intensity(cls_src, thresholds),
    )


def eligible(week: CleanWeek) -> bool:
    return week.wear_minutes >= MIN_WEAR_MINUTES


def daily_class_counts(week: CleanWeek) -> dict[str, np.ndarray]:
    """Per-day wear-minute counts for sedentary, MVPA (incl. vigorous) and VPA.

    Days are consecutive 1440-minute blocks from the first sample; days with
    no wear minutes are left out.
    """
    day = (week.minute_index - week.minute_index[0]) // MINUTES_PER_DAY
    n_days = int(day[-1]) + 1 if len(day) else 0
    cls = week.intensity_class
    w = week.wear

    def count(mask):
        return np.bincount(day[w & mask], minlength=n_days).astype(float)

    worn = np.bincount(day[w], minlength=n_days) > 0
    counts = {
        "sedentary": count(cls == SEDENTARY),
        "mvpa": count((cls == MODERATE_VIGOROUS) | (cls == VIGOROUS)),
        "vpa": count(cls == VIGOROUS),
    }
    return {k: v[worn] for k, v in counts.items()}


def daily_intensity_minutes(week: CleanWeek) -> dict[str, float]:
    """Average over days of the per-day class counts."""
    return {k: float(v.mean()) if len(v) else 0.0 for k, v in daily_class_counts(week).items()}


def clean_week_to_frame(week: CleanWeek) -> pd.DataFrame:
    return pd.DataFrame({
        "minute_index": week.minute_index, "hr_bpm": week.hr, "accel_mg": week.accel,
        "hrv_ms": week.hrv, "wear": week.wear.astype(int), "met": week.met, "enmo": week.enmo,
        "intensity_class": [CLASS_NAMES[c] for c in week.intensity_class],
    })


def write_clean_csv(week: CleanWeek, path: Path) -> None:
    clean_week_to_frame(week).to_csv(path, index=False, lineterminator="\n")
