"""Fixed-layout 68-feature vectors from a cleaned week and participant record."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd

from vo2fit.cohortgen import Participant
from vo2fit.errors import DataError, FeaturizationError, LayoutMismatchError
from vo2fit.sensorproc import CleanWeek, daily_class_counts, eligible

STATISTICS = ("mean", "min", "max", "std", "p25", "p50", "p75", "slope")
MINUTE_CHANNELS = ("accel", "hr", "hrv", "enmo", "met")
DAILY_CHANNELS = ("daily_sedentary", "daily_mvpa", "daily_vpa")
COVARIATES = ("age", "sex", "weight", "height", "bmi", "rhr")
CYCLICAL = ("month_sin", "month_cos")

# minima that are pinned near a floor on the synthetic and real data alike
DROPPED = frozenset({("hrv", "min"), ("daily_sedentary", "min"), ("daily_mvpa", "min"), ("daily_vpa", "min")})

LAYOUT_VERSION = "fl-68.1"


@dataclass(frozen=True)
class FeatureLayout:
    entries: tuple  # (name, source_channel, statistic); statistic None for scalars
    version: str = LAYOUT_VERSION

    def __post_init__(self):
        names = [e[0] for e in self.entries]
        if len(set(names)) != len(names):
            raise ValueError("feature names must be unique")
        for _, _, stat in self.entries:
            if stat is not None and stat not in STATISTICS:
                raise ValueError(f"unknown statistic {stat}")

    @property
    def names(self) -> list[str]:
        return [e[0] for e in self.entries]

    def __len__(self):
        return len(self.entries)

    def index(self, names: Sequence[str]) -> list[int]:
        lookup = {n: i for i, n in enumerate(self.names)}
        return [lookup[n] for n in names]

    def to_dict(self) -> dict:
        return {"layout_version": self.version,
                "features": [{"index": i, "name": n, "channel": c, "statistic": s}
                             for i, (n, c, s) in enumerate(self.entries)]}

    @classmethod
    def from_dict(cls, d: dict) -> "FeatureLayout":
        feats = sorted(d["features"], key=lambda f: f["index"])
        return cls(entries=tuple((f["name"], f["channel"], f["statistic"]) for f in feats),
                   version=d["layout_version"])


def canonical_layout() -> FeatureLayout:
    entries = []
    for ch in MINUTE_CHANNELS + DAILY_CHANNELS:
        for stat in STATISTICS:
            if (ch, stat) not in DROPPED:
                entries.append((f"{ch}_{stat}", ch, stat))
    entries += [(c, c, None) for c in COVARIATES]
    entries += [(c, "month", None) for c in CYCLICAL]
    return FeatureLayout(entries=tuple(entries))


CANONICAL_LAYOUT = canonical_layout()

# column subsets used by the covariate-set comparisons
COVARIATE_SETS = {
    "anthro": ("age", "sex", "weight", "bmi", "height"),
    "rhr": ("rhr",),
    "anthro+rhr": ("age", "sex", "weight", "bmi", "height", "rhr"),
    "sensors+rhr+anthro": tuple(CANONICAL_LAYOUT.names),
}


def percentile_linear(x: np.ndarray, q: float) -> float:
    """Percentile with linear interpolation between closest ranks."""
    return float(np.percentile(x, q, method="linear"))


def ols_slope(t: np.ndarray, y: np.ndarray) -> float:
    t = np.asarray(t, float)
    tc = t - t.mean()
    denom = float(tc @ tc)
    if denom == 0:
        return 0.0
    return float(tc @ (np.asarray(y, float) - y.mean()) / denom)


def summarize_channel(values, index=None) -> dict[str, float]:
    """Eight summary statistics of a wear-masked series.

    ``index`` gives each value's minute (or day) position for the slope; it
    defaults to 0..n-1.  Standard deviation is the population one.
    """
    v = np.asarray(values, float)
    index = np.arange(len(v)) if index is None else np.asarray(index, float)
    keep = np.isfinite(v)
    v, index = v[keep], index[keep]
    if len(v) < 2:
        raise FeaturizationError(f"need at least 2 valid samples, got {len(v)}")
    return {
        "mean": float(v.mean()),
        "min": float(v.min()),
        "max": float(v.max()),
        "std": float(v.std()),
        "p25": percentile_linear(v, 25),
        "p50": percentile_linear(v, 50),
        "p75": percentile_linear(v, 75),
        "slope": ols_slope(index, v),
    }


def cyclical_month(month: int) -> tuple[float, float]:
    if isinstance(month, bool) or int(month) != month or not 1 <= month <= 12:
        raise DataError(f"month must be an integer in 1-12, got {month}")
    angle = 2 * math.pi * month / 12
    return math.sin(angle), math.cos(angle)


@dataclass
class FeatureVector:
    participant_id: str
    values: np.ndarray
    label_current: float | None = None
    label_future: float | None = None
    layout_version: str = LAYOUT_VERSION
    cohort: str = "FI"

    def __post_init__(self):
        self.values = np.asarray(self.values, float)
        if not np.all(np.isfinite(self.values)):
            raise FeaturizationError(f"{self.participant_id}: non-finite feature values")


def channel_statistics(week: CleanWeek) -> dict[str, dict[str, float]]:
    stats = {}
    for ch in MINUTE_CHANNELS:
        idx, vals = week.channel(ch)
        try:
            stats[ch] = summarize_channel(vals, idx)
        except FeaturizationError as exc:
            raise FeaturizationError(f"{week.participant_id}: channel {ch}: {exc}") from None
    for ch, counts in daily_class_counts(week).items():
        try:
            stats[f"daily_{ch}"] = summarize_channel(counts, np.arange(len(counts)))
        except FeaturizationError as exc:
            raise FeaturizationError(f"{week.participant_id}: daily {ch}: {exc}") from None
    return stats


def build_feature_vector(p: Participant, week: CleanWeek,
                         layout: FeatureLayout = CANONICAL_LAYOUT) -> FeatureVector:
    if week.participant_id != p.id:
        raise FeaturizationError(f"week belongs to {week.participant_id}, not {p.id}")
    if not eligible(week):
        raise FeaturizationError(f"{p.id}: only {week.wear_minutes} wear minutes (< 72 h)")
    covs = {"age": p.age, "sex": 1.0 if p.sex == "M" else 0.0, "weight": p.weight,
            "height": p.height, "bmi": p.bmi, "rhr": p.rhr}
    missing = [k for k, v in covs.items() if v is None or not math.isfinite(v)]
    if missing:
        raise FeaturizationError(f"{p.id}: missing covariates {missing}")
    stats = channel_statistics(week)
    tf1, tf2 = cyclical_month(week.start_month)
    scalars = dict(covs, month_sin=tf1, month_cos=tf2)
    values = [stats[ch][stat] if stat is not None else scalars[name]
              for name, ch, stat in layout.entries]
    return FeatureVector(participant_id=p.id, values=np.array(values), label_current=p.vo2max_current,
                         label_future=p.vo2max_future, layout_version=layout.version, cohort=p.cohort)


def feature_matrix(vectors: Sequence[FeatureVector], layout: FeatureLayout = CANONICAL_LAYOUT) -> np.ndarray:
    for v in vectors:
        if v.layout_version != layout.version:
            raise LayoutMismatchError(f"{v.participant_id}: layout {v.layout_version} != {layout.version}")
    return np.vstack([v.values for v in vectors]) if vectors else np.zeros((0, len(layout)))


# ---------------------------------------------------------------------------
# file formats


def _opt(x):
    return np.nan if x is None else x


def write_features_csv(vectors: Sequence[FeatureVector], path: Path,
                       layout: FeatureLayout = CANONICAL_LAYOUT) -> None:
    cols = [f"f{i:03d}" for i in range(len(layout))]
    df = pd.DataFrame(feature_matrix(vectors, layout), columns=cols)
    df.insert(0, "label_future", [_opt(v.label_future) for v in vectors])
    df.insert(0, "label_current", [_opt(v.label_current) for v in vectors])
    df.insert(0, "id", [v.participant_id for v in vectors])
    df.to_csv(path, index=False, lineterminator="\n")


def write_layout(layout: FeatureLayout, path: Path) -> None:
    Path(path).write_text(json.dumps(layout.to_dict(), indent=1) + "\n")


def read_layout(path: Path) -> FeatureLayout:
    return FeatureLayout.from_dict(json.loads(Path(path).read_text()))


def read_features_csv(path: Path, layout: FeatureLayout = CANONICAL_LAYOUT,
                      cohort: str = "FI") -> list[FeatureVector]:
    df = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    cols = [f"f{i:03d}" for i in range(len(layout))]
    if list(df.columns) != ["id", "label_current", "label_future"] + cols:
        raise LayoutMismatchError(f"{path}: columns do not match layout {layout.version}")
    X = df[cols].to_numpy(float)
    out = []
    for i, pid in enumerate(df["id"]):
        lc, lf = df["label_current"].iat[i], df["label_future"].iat[i]
        out.append(FeatureVector(participant_id=pid, values=X[i],
                                 label_current=None if pd.isna(lc) else float(lc),
                                 label_future=None if pd.isna(lf) else float(lf),
                                 layout_version=layout.version, cohort=cohort))
    return out
