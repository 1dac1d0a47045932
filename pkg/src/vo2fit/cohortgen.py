"""Synthetic cohorts and minute-level sensor weeks with a known link to VO2max.

Every participant carries a latent activity level ``activity`` (standard
normal).  Fitness is produced by :func:`vo2max_expected` plus Gaussian noise;
the same latent drives the simulated movement, and the simulated heart rate
responds to movement with a slope that shrinks as fitness grows.  Models
trained downstream can therefore recover fitness from behaviour, which is the
property the evaluation tasks need.
"""
from __future__ import annotations

import csv
import dataclasses
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import pandas as pd

from vo2fit.errors import ConfigurationError, DataError

MINUTES_PER_DAY = 1440
WEEK_DAYS = 6
WEEK_MINUTES = WEEK_DAYS * MINUTES_PER_DAY

HR_RANGE = (30.0, 220.0)
VO2MAX_RANGE = (15.0, 70.0)

# accel (milli-g) -> movement intensity (J/min/kg); shared with sensorproc
ACCEL_TO_INTENSITY = 5.0
J_PER_MET = 71.0

SEXES = ("M", "F")
COHORTS = ("FI", "FII")

COHORT_HEADER = [
    "id", "cohort", "sex", "age", "height_m", "weight_kg", "bmi",
    "rhr_bpm", "month", "vo2max_current", "vo2max_future",
]
LATENT_HEADER = ["id", "cohort", "activity"]
SENSOR_HEADER = ["minute_index", "hr_bpm", "accel_mg", "hrv_ms"]


@dataclass(frozen=True)
class Moments:
    mean: float
    std: float


@dataclass(frozen=True)
class SexStats:
    age: Moments
    height: Moments
    weight: Moments
    bmi: Moments
    mvpa: Moments
    vpa: Moments
    rhr: Moments
    vo2max: Moments


REFERENCE_MALE = SexStats(
    age=Moments(47.70, 7.57),
    height=Moments(1.78, 0.07),
    weight=Moments(85.85, 13.83),
    bmi=Moments(27.16, 3.97),
    mvpa=Moments(35.87, 22.35),
    vpa=Moments(3.27, 8.57),
    rhr=Moments(61.48, 8.68),
    vo2max=Moments(41.95, 4.61),
)

REFERENCE_FEMALE = SexStats(
    age=Moments(47.66, 7.36),
    height=Moments(1.64, 0.06),
    weight=Moments(70.54, 13.92),
    bmi=Moments(26.17, 4.97),
    mvpa=Moments(34.40, 22.59),
    vpa=Moments(3.31, 15.67),
    rhr=Moments(64.46, 8.28),
    vo2max=Moments(37.44, 4.73),
)


@dataclass(frozen=True)
class PopulationSpec:
    """Per-sex marginal moments and cohort sizes.

    ``n_male``/``n_female`` count every baseline (FI) participant;
    ``n_longitudinal_*`` of them also receive a follow-up (FII) snapshot.
    """

    male: SexStats = REFERENCE_MALE
    female: SexStats = REFERENCE_FEMALE
    n_male: int = 5229
    n_female: int = 5830
    n_longitudinal_male: int = 1303
    n_longitudinal_female: int = 1372
    seed: int = 42

    def __post_init__(self):
        for sex, stats in (("male", self.male), ("female", self.female)):
            for f in dataclasses.fields(stats):
                m = getattr(stats, f.name)
                if not (m.std > 0 and math.isfinite(m.std) and math.isfinite(m.mean)):
                    raise ConfigurationError(f"{sex}.{f.name}: std must be positive and finite, got {m.std}")
        for name in ("n_male", "n_female"):
            if getattr(self, name) <= 0:
                raise ConfigurationError(f"{name} must be positive")
        for name, total in (("n_longitudinal_male", self.n_male), ("n_longitudinal_female", self.n_female)):
            n = getattr(self, name)
            if n < 0 or n > total:
                raise ConfigurationError(f"{name} must lie in [0, {total}], got {n}")

    def stats(self, sex: str) -> SexStats:
        return self.male if sex == "M" else self.female

    @classmethod
    def desk(cls, n_train: int = 3000, n_longitudinal: int = 600, seed: int = 42) -> "PopulationSpec":
        """Scaled-down profile keeping the reference sex ratios."""
        long_m = round(n_longitudinal * 1303 / 2675)
        train_m = round(n_train * (5229 - 1303) / (11059 - 2675))
        return cls(
            n_male=train_m + long_m,
            n_female=(n_train - train_m) + (n_longitudinal - long_m),
            n_longitudinal_male=long_m,
            n_longitudinal_female=n_longitudinal - long_m,
            seed=seed,
        )

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationSpec":
        d = dict(d)
        kwargs = {}
        for sex, default in (("male", REFERENCE_MALE), ("female", REFERENCE_FEMALE)):
            overrides = d.pop(sex, None) or {}
            fields = {}
            for f in dataclasses.fields(SexStats):
                base = getattr(default, f.name)
                o = overrides.get(f.name, {})
                fields[f.name] = Moments(float(o.get("mean", base.mean)), float(o.get("std", base.std)))
            kwargs[sex] = SexStats(**fields)
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ConfigurationError(f"unknown population keys: {sorted(unknown)}")
        kwargs.update({k: int(v) for k, v in d.items()})
        return cls(**kwargs)


@dataclass(frozen=True)
class GroundTruth:
    """Coefficients of the generative VO2max function (ml O2/min/kg).

    Covariates enter centred on the per-sex population means; ``activity`` is
    the latent standard-normal activity level and the interaction uses the
    RHR z-score.  The per-sex intercept equals the target mean and the noise
    standard deviation is calibrated so the marginal std matches the target.
    """

    version: str = "gt-1"
    age: float = -0.20
    bmi: float = -0.45
    rhr: float = -0.26
    activity: float = 1.8
    activity_x_rhr: float = -1.8
    min_noise_std: float = 0.5

    def deterministic_var(self, stats: SexStats) -> float:
        return (
            (self.age * stats.age.std) ** 2
            + (self.bmi * stats.bmi.std) ** 2
            + (self.rhr * stats.rhr.std) ** 2
            + self.activity ** 2
            + self.activity_x_rhr ** 2
        )

    def noise_std(self, stats: SexStats) -> float:
        resid = stats.vo2max.std ** 2 - self.deterministic_var(stats)
        return max(math.sqrt(max(resid, 0.0)), self.min_noise_std)


GROUND_TRUTH = GroundTruth()


def vo2max_expected(sex, age, bmi, rhr, activity, population: PopulationSpec | None = None,
                    gt: GroundTruth = GROUND_TRUTH):
    """Noise-free VO2max for the given covariates (vectorised over arrays)."""
    population = population or PopulationSpec()
    sex = np.asarray(sex)
    out = np.zeros(np.broadcast(sex, age, bmi, rhr, activity).shape)
    for s in SEXES:
        st = population.stats(s)
        rz = (np.asarray(rhr, float) - st.rhr.mean) / st.rhr.std
        val = (
            st.vo2max.mean
            + gt.age * (np.asarray(age, float) - st.age.mean)
            + gt.bmi * (np.asarray(bmi, float) - st.bmi.mean)
            + gt.rhr * (np.asarray(rhr, float) - st.rhr.mean)
            + gt.activity * np.asarray(activity, float)
            + gt.activity_x_rhr * np.asarray(activity, float) * rz
        )
        out = np.where(sex == s, val, out)
    return out if out.shape else float(out)


def activity_minutes(activity: float, stats: SexStats) -> tuple[float, float]:
    """Target daily (MVPA, VPA) minutes for a latent activity level.

    Both are log-normal in ``activity`` with the population mean and std.
    """
    out = []
    for m in (stats.mvpa, stats.vpa):
        sigma = math.sqrt(math.log1p((m.std / m.mean) ** 2))
        out.append(m.mean * math.exp(sigma * activity - sigma * sigma / 2))
    return out[0], out[1]


@dataclass(frozen=True)
class Participant:
    id: str
    sex: str
    age: float
    height: float
    weight: float
    bmi: float
    rhr: float
    vo2max_current: float
    vo2max_future: float | None = None
    month: int = 1
    cohort: str = "FI"
    # latent ground truth; never written to the cohort CSV
    activity: float = 0.0

    def __post_init__(self):
        if self.sex not in SEXES:
            raise DataError(f"{self.id}: sex must be one of {SEXES}")
        if self.cohort not in COHORTS:
            raise DataError(f"{self.id}: cohort must be one of {COHORTS}")
        if not 1 <= int(self.month) <= 12:
            raise DataError(f"{self.id}: month {self.month} outside 1-12")
        if not self.vo2max_current > 0 or (self.vo2max_future is not None and not self.vo2max_future > 0):
            raise DataError(f"{self.id}: VO2max must be positive")
        if self.height <= 0 or self.weight <= 0:
            raise DataError(f"{self.id}: height and weight must be positive")
        if abs(self.bmi - self.weight / self.height ** 2) > 1e-6 * self.bmi:
            raise DataError(f"{self.id}: bmi inconsistent with weight/height^2")

    @property
    def fitness(self) -> float:
        """VO2max in force at the time of this snapshot."""
        if self.cohort == "FII" and self.vo2max_future is not None:
            return self.vo2max_future
        return self.vo2max_current


def _truncated_normal(rng, mean, std, size, lo, hi):
    x = rng.normal(mean, std, size)
    bad = (x < lo) | (x > hi)
    while bad.any():
        x[bad] = rng.normal(mean, std, int(bad.sum()))
        bad = (x < lo) | (x > hi)
    return x


def _draw_sex(rng, stats: SexStats, n: int, population: PopulationSpec, gt: GroundTruth, sex: str) -> dict:
    def bounded(m: Moments, lo=-np.inf, hi=np.inf):
        return _truncated_normal(rng, m.mean, m.std, n, max(lo, m.mean - 4 * m.std), min(hi, m.mean + 4 * m.std))

    age = bounded(stats.age, lo=18.0)
    height = bounded(stats.height, lo=1.2)
    bmi = bounded(stats.bmi, lo=14.0)
    rhr = bounded(stats.rhr, *HR_RANGE)
    activity = _truncated_normal(rng, 0.0, 1.0, n, -4.0, 4.0)
    month = rng.integers(1, 13, n)
    det = vo2max_expected(np.full(n, sex), age, bmi, rhr, activity, population, gt)
    noise_sd = gt.noise_std(stats)
    vo2 = det + rng.normal(0.0, noise_sd, n)
    bad = (vo2 < VO2MAX_RANGE[0]) | (vo2 > VO2MAX_RANGE[1])
    while bad.any():
        vo2[bad] = det[bad] + rng.normal(0.0, noise_sd, int(bad.sum()))
        bad = (vo2 < VO2MAX_RANGE[0]) | (vo2 > VO2MAX_RANGE[1])
    return dict(age=age, height=height, bmi=bmi, weight=bmi * height ** 2, rhr=rhr,
                activity=activity, month=month, vo2=vo2)


def generate_cohort(spec: PopulationSpec, gt: GroundTruth = GROUND_TRUTH) -> list[Participant]:
    """Baseline (FI) participants, sorted by id.

    Ids are assigned through a seeded permutation so they carry no
    information about sex or draw order.
    """
    rows = []
    for code, sex, n in ((0, "M", spec.n_male), (1, "F", spec.n_female)):
        rng = np.random.default_rng(np.random.SeedSequence([spec.seed, 1, code]))
        d = _draw_sex(rng, spec.stats(sex), n, spec, gt, sex)
        for i in range(n):
            rows.append((sex, {k: v[i] for k, v in d.items()}))
    order = np.random.default_rng(np.random.SeedSequence([spec.seed, 2])).permutation(len(rows))
    width = max(5, len(str(len(rows))))
    out = []
    for new_idx, (sex, r) in sorted(zip(order, rows), key=lambda t: t[0]):
        out.append(Participant(
            id=f"P{new_idx + 1:0{width}d}", sex=sex, age=float(r["age"]), height=float(r["height"]),
            weight=float(r["weight"]), bmi=float(r["bmi"]), rhr=float(r["rhr"]),
            vo2max_current=float(r["vo2"]), month=int(r["month"]), cohort="FI",
            activity=float(r["activity"]),
        ))
    return out


@dataclass(frozen=True)
class DriftSpec:
    """How a participant changes between the baseline and follow-up visits.

    Activity reverts toward the population mean (``reversion``) plus noise;
    VO2max follows the activity change scaled by ``activity_effect`` plus a
    population ``trend`` and its own noise.  Delta (current - future) is
    therefore symmetric around ``-trend`` and partly predictable from the
    baseline activity level.
    """

    gap_years: float = 7.0
    trend: float = 0.0
    reversion: float = 0.8
    activity_noise: float = 0.25
    activity_effect: float = 4.0
    vo2max_noise: float = 1.0
    rhr_activity_effect: float = -2.0
    rhr_noise: float = 2.0
    weight_noise: float = 2.0
    sensor_fraction: float = 2042 / 2675

    def __post_init__(self):
        for name in ("activity_noise", "vo2max_noise", "rhr_noise", "weight_noise"):
            if getattr(self, name) < 0:
                raise ConfigurationError(f"drift {name} must be non-negative")
        if not 0.0 <= self.sensor_fraction <= 1.0:
            raise ConfigurationError("drift sensor_fraction must lie in [0, 1]")

    @classmethod
    def identity(cls, gap_years: float = 7.0) -> "DriftSpec":
        return cls(gap_years=gap_years, trend=0.0, reversion=0.0, activity_noise=0.0,
                   vo2max_noise=0.0, rhr_noise=0.0, weight_noise=0.0)


def _seed_for(seed: int, *parts) -> np.random.SeedSequence:
    words = [int(seed)]
    for p in parts:
        if isinstance(p, str):
            words.append(int.from_bytes(hashlib.sha256(p.encode()).digest()[:4], "little"))
        else:
            words.append(int(p))
    return np.random.SeedSequence(words)


def generate_future_snapshot(p: Participant, drift: DriftSpec, seed: int = 0) -> Participant:
    """FII copy of ``p`` aged by ``drift.gap_years`` with drifted behaviour and fitness."""
    if p.vo2max_current is None:
        raise DataError(f"{p.id}: baseline VO2max required")
    rng = np.random.default_rng(_seed_for(seed, "future", p.id))
    d_act = -drift.reversion * p.activity + rng.normal(0.0, 1.0) * drift.activity_noise
    base = p.vo2max_current + drift.trend + drift.activity_effect * d_act
    vo2 = base + drift.vo2max_noise * rng.normal()
    while not VO2MAX_RANGE[0] <= vo2 <= VO2MAX_RANGE[1]:
        if drift.vo2max_noise == 0:
            vo2 = float(np.clip(base, *VO2MAX_RANGE))
            break
        vo2 = base + drift.vo2max_noise * rng.normal()
    rhr = float(np.clip(p.rhr + drift.rhr_activity_effect * d_act + drift.rhr_noise * rng.normal(), *HR_RANGE))
    weight = max(p.weight + drift.weight_noise * rng.normal(), 30.0)
    month = int(rng.integers(1, 13))
    return dataclasses.replace(
        p, cohort="FII", age=p.age + drift.gap_years, weight=weight, bmi=weight / p.height ** 2,
        rhr=rhr, activity=p.activity + d_act, vo2max_future=float(vo2), month=month,
    )


@dataclass
class Study:
    """Baseline participants plus follow-up snapshots of the longitudinal subset."""

    fi: list[Participant]
    fii: list[Participant] = field(default_factory=list)
    # ids whose follow-up week has sensor data
    fii_with_sensors: set[str] = field(default_factory=set)

    @property
    def longitudinal_ids(self) -> list[str]:
        return [p.id for p in self.fi if p.vo2max_future is not None]


def generate_study(spec: PopulationSpec, drift: DriftSpec = DriftSpec(),
                   gt: GroundTruth = GROUND_TRUTH) -> Study:
    fi = generate_cohort(spec, gt)
    chosen: set[str] = set()
    for sex, n in (("M", spec.n_longitudinal_male), ("F", spec.n_longitudinal_female)):
        chosen.update([p.id for p in fi if p.sex == sex][:n])
    fii = [generate_future_snapshot(p, drift, spec.seed) for p in fi if p.id in chosen]
    future = {q.id: q.vo2max_future for q in fii}
    fi = [dataclasses.replace(p, vo2max_future=future[p.id]) if p.id in future else p for p in fi]
    rng = np.random.default_rng(_seed_for(spec.seed, "fii-sensors"))
    keep = rng.random(len(fii)) < drift.sensor_fraction
    return Study(fi=fi, fii=fii, fii_with_sensors={q.id for q, k in zip(fii, keep) if k})


@dataclass(frozen=True)
class SensorConfig:
    """Knobs of the minute-level week simulator."""

    days: int = WEEK_DAYS
    wake_minute: int = 420
    bed_minute: int = 1380
    wake_jitter: int = 45
    active_bout_minutes: float = 10.0
    daily_mvpa_logsd: float = 0.35
    max_active_fraction: float = 0.6
    light_fraction: float = 0.15
    hr_awake_offset: float = 10.0
    hr_sleep_offset: float = -3.0
    hr_slope_at_40: float = 10.0
    hr_noise: float = 3.0
    spike_prob: float = 0.001
    nonwear_prob: float = 0.10
    nonwear_minutes: tuple[int, int] = (91, 300)


def hr_response(met, rhr: float, vo2max: float, awake=True, cfg: SensorConfig = SensorConfig()):
    """Noise-free heart rate (bpm) for a MET trace.

    Above 1 MET the rise is ``hr_slope_at_40 * 40 / vo2max`` bpm per MET, so
    a fitter participant shows a smaller rise for the same movement.
    """
    met = np.asarray(met, float)
    slope = cfg.hr_slope_at_40 * 40.0 / vo2max
    base = np.where(awake, rhr + cfg.hr_awake_offset, rhr + cfg.hr_sleep_offset)
    return base + slope * np.maximum(met - 1.0, 0.0)


@dataclass
class SensorWeek:
    participant_id: str
    start_month: int
    hr: np.ndarray
    accel: np.ndarray
    hrv: np.ndarray
    minute_index: np.ndarray | None = None
    # (start, length) of simulated non-wear episodes; empty for real data
    nonwear_episodes: tuple = ()

    def __post_init__(self):
        n = len(self.hr)
        if self.minute_index is None:
            self.minute_index = np.arange(n, dtype=np.int64)
        if not (len(self.accel) == n == len(self.hrv) == len(self.minute_index)):
            raise DataError(f"{self.participant_id}: channel lengths differ")
        if n and np.any(np.diff(self.minute_index) != 1):
            raise DataError(f"{self.participant_id}: minutes must be strictly increasing at 60 s spacing")
        for name in ("hr", "accel", "hrv"):
            a = getattr(self, name)
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise DataError(f"{self.participant_id}: {name} must be finite and non-negative")

    def __len__(self):
        return len(self.hr)


def _day_states(rng, length: int, active_fraction: float, bout: float) -> np.ndarray:
    """Two-state rest/active minute sequence with geometric dwell times."""
    state = np.zeros(length, dtype=bool)
    if active_fraction <= 0 or length == 0:
        return state
    p_exit = 1.0 / bout
    p_enter = active_fraction * p_exit / (1.0 - active_fraction)
    pos, active = 0, rng.random() < active_fraction
    while pos < length:
        n_pairs = 64
        rest = rng.geometric(p_enter, n_pairs)
        act = rng.geometric(p_exit, n_pairs)
        durs = np.column_stack([act, rest] if active else [rest, act]).ravel()
        flags = np.tile([active, not active], n_pairs)
        for d, f in zip(durs, flags):
            if pos >= length:
                break
            state[pos:pos + d] = f
            pos += d
    return state


def generate_sensor_week(p: Participant, seed, population: PopulationSpec | None = None,
                         cfg: SensorConfig = SensorConfig(), force_nonwear: bool | None = None) -> SensorWeek:
    """Simulate ``cfg.days`` days of minute-level HR, acceleration and HRV."""
    population = population or PopulationSpec()
    rng = np.random.default_rng(seed)
    n = cfg.days * MINUTES_PER_DAY
    mvpa, vpa = activity_minutes(p.activity, population.stats(p.sex))
    vig_prob = min(vpa / mvpa, 1.0) if mvpa > 0 else 0.0

    met = np.empty(n)
    awake = np.zeros(n, dtype=bool)
    for d in range(cfg.days):
        lo = d * MINUTES_PER_DAY
        wake = cfg.wake_minute + int(rng.integers(-cfg.wake_jitter, cfg.wake_jitter + 1))
        bed = cfg.bed_minute + int(rng.integers(-cfg.wake_jitter, cfg.wake_jitter + 1))
        day_awake = np.zeros(MINUTES_PER_DAY, dtype=bool)
        day_awake[wake:bed] = True
        awake[lo:lo + MINUTES_PER_DAY] = day_awake
        length = bed - wake
        target = mvpa * math.exp(rng.normal(0.0, cfg.daily_mvpa_logsd) - cfg.daily_mvpa_logsd ** 2 / 2)
        frac = min(target / length, cfg.max_active_fraction)
        active = _day_states(rng, length, frac, cfg.active_bout_minutes)

        # bout-level vigorous flag: each contiguous active run shares one draw
        starts = np.flatnonzero(np.diff(np.concatenate([[False], active]).astype(int)) == 1)
        bout_id = np.cumsum(np.isin(np.arange(length), starts)) - 1
        vig = np.zeros(length, dtype=bool)
        if len(starts):
            vig_bouts = rng.random(len(starts)) < vig_prob
            vig = active & vig_bouts[np.clip(bout_id, 0, None)]

        rest_met = np.where(rng.random(length) < cfg.light_fraction,
                            rng.uniform(1.6, 2.9, length), rng.uniform(0.3, 1.4, length))
        mod_met = rng.uniform(3.1, 5.9, length)
        vig_met = rng.uniform(6.2, 9.0, length)
        day_met = np.abs(rng.normal(0.0, 0.03, MINUTES_PER_DAY)) + 0.03
        day_met[wake:bed] = np.where(vig, vig_met, np.where(active, mod_met, rest_met))
        met[lo:lo + MINUTES_PER_DAY] = day_met

    accel = np.round(met * J_PER_MET / ACCEL_TO_INTENSITY, 3)
    accel = np.maximum(accel, 0.001)
    met_eff = accel * ACCEL_TO_INTENSITY / J_PER_MET

    hr = hr_response(met_eff, p.rhr, p.fitness, awake, cfg) + rng.normal(0.0, cfg.hr_noise, n)
    spikes = rng.random(n) < cfg.spike_prob
    hr = hr + spikes * rng.uniform(45.0, 70.0, n)
    hr = np.round(np.clip(hr, *HR_RANGE), 1)
    hrv = np.round(60000.0 / hr * 0.12 * np.exp(rng.normal(0.0, 0.25, n)), 1)

    inject = (rng.random() < cfg.nonwear_prob) if force_nonwear is None else force_nonwear
    episodes = ()
    if inject:
        length = int(rng.integers(cfg.nonwear_minutes[0], cfg.nonwear_minutes[1] + 1))
        start = int(rng.integers(0, n - length))
        accel[start:start + length] = 0.0
        hrv[start:start + length] = 0.0
        # device off the chest: either no signal or a frozen reading
        hr[start:start + length] = 0.0 if rng.random() < 0.5 else hr[start]
        episodes = ((start, length),)

    return SensorWeek(participant_id=p.id, start_month=p.month, hr=hr, accel=accel, hrv=hrv,
                      nonwear_episodes=episodes)


def week_seed(seed: int, participant_id: str, cohort: str) -> np.random.SeedSequence:
    """Seed for one participant-week, independent of generation order."""
    return _seed_for(seed, "week", participant_id, cohort)


# ---------------------------------------------------------------------------
# file formats


def _fmt(x) -> str:
    if x is None or (isinstance(x, float) and math.isnan(x)):
        return ""
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    return repr(float(x))


def cohort_to_csv(participants: Iterable[Participant]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(COHORT_HEADER)
    for p in participants:
        w.writerow([p.id, p.cohort, p.sex, _fmt(p.age), _fmt(p.height), _fmt(p.weight), _fmt(p.bmi),
                    _fmt(p.rhr), _fmt(p.month), _fmt(p.vo2max_current), _fmt(p.vo2max_future)])
    return buf.getvalue()


def latent_to_csv(participants: Iterable[Participant]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(LATENT_HEADER)
    for p in participants:
        w.writerow([p.id, p.cohort, _fmt(p.activity)])
    return buf.getvalue()


def write_study(study: Study, out_dir: Path) -> dict[str, Path]:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    everyone = study.fi + study.fii
    paths = {"cohort": out_dir / "cohort.csv", "latent": out_dir / "latent.csv",
             "fii_sensors": out_dir / "fii_sensor_ids.txt"}
    paths["cohort"].write_text(cohort_to_csv(everyone))
    paths["latent"].write_text(latent_to_csv(everyone))
    paths["fii_sensors"].write_text("".join(f"{i}\n" for i in sorted(study.fii_with_sensors)))
    return paths


def read_cohort_csv(path: Path, latent_path: Path | None = None) -> list[Participant]:
    latent = {}
    if latent_path is not None and Path(latent_path).exists():
        with open(latent_path, newline="") as fh:
            for row in csv.DictReader(fh):
                latent[(row["id"], row["cohort"])] = float(row["activity"])
    out = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames != COHORT_HEADER:
            raise DataError(f"{path}: unexpected cohort header {reader.fieldnames}")
        for row in reader:
            fut = row["vo2max_future"]
            out.append(Participant(
                id=row["id"], cohort=row["cohort"], sex=row["sex"], age=float(row["age"]),
                height=float(row["height_m"]), weight=float(row["weight_kg"]), bmi=float(row["bmi"]),
                rhr=float(row["rhr_bpm"]), month=int(row["month"]),
                vo2max_current=float(row["vo2max_current"]),
                vo2max_future=float(fut) if fut else None,
                activity=latent.get((row["id"], row["cohort"]), 0.0),
            ))
    return out


def read_study(data_dir: Path) -> Study:
    data_dir = Path(data_dir)
    people = read_cohort_csv(data_dir / "cohort.csv", data_dir / "latent.csv")
    ids_path = data_dir / "fii_sensor_ids.txt"
    fii = [p for p in people if p.cohort == "FII"]
    with_sensors = set(ids_path.read_text().split()) if ids_path.exists() else {p.id for p in fii}
    return Study(fi=[p for p in people if p.cohort == "FI"], fii=fii, fii_with_sensors=with_sensors)


def sensor_week_to_frame(week: SensorWeek) -> pd.DataFrame:
    return pd.DataFrame({"minute_index": week.minute_index, "hr_bpm": week.hr,
                         "accel_mg": week.accel, "hrv_ms": week.hrv})


def write_sensor_csv(week: SensorWeek, path: Path) -> None:
    sensor_week_to_frame(week).to_csv(path, index=False, lineterminator="\n")


def read_sensor_csv(path: Path, participant_id: str | None = None, start_month: int = 1) -> SensorWeek:
    df = pd.read_csv(path, float_precision="round_trip")
    if list(df.columns[:4]) != SENSOR_HEADER:
        raise DataError(f"{path}: unexpected sensor header {list(df.columns)}")
    pid = participant_id or Path(path).stem.split("_")[0]
    return SensorWeek(participant_id=pid, start_month=start_month,
                      hr=df["hr_bpm"].to_numpy(float), accel=df["accel_mg"].to_numpy(float),
                      hrv=df["hrv_ms"].to_numpy(float), minute_index=df["minute_index"].to_numpy(np.int64))


def population_sample_means(participants: Sequence[Participant], sex: str) -> dict[str, float]:
    """Per-field sample means for one sex; used by distribution checks."""
    rows = [p for p in participants if p.sex == sex]
    fields = ("age", "height", "weight", "bmi", "rhr", "vo2max_current")
    return {f: float(np.mean([getattr(p, f) for p in rows])) for f in fields}
