"""Regression/classification metrics, bootstrap intervals and agreement statistics."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.stats import rankdata

from vo2fit.errors import MetricError

log = logging.getLogger(__name__)

P_THRESHOLD = 0.005


def _pair(y_true, y_pred):
    y = np.asarray(y_true, float)
    p = np.asarray(y_pred, float)
    if y.shape != p.shape or y.ndim != 1:
        raise MetricError(f"shape mismatch: {y.shape} vs {p.shape}")
    if len(y) < 2:
        raise MetricError("need at least 2 samples")
    return y, p


def rmse(y_true, y_pred) -> float:
    y, p = _pair(y_true, y_pred)
    return math.sqrt(np.mean((y - p) ** 2))


def r2(y_true, y_pred) -> float:
    y, p = _pair(y_true, y_pred)
    ss_tot = np.sum((y - y.mean()) ** 2)
    if ss_tot == 0:
        raise MetricError("R2 undefined for constant y_true")
    return float(1.0 - np.sum((y - p) ** 2) / ss_tot)


def pearson(y_true, y_pred) -> float:
    y, p = _pair(y_true, y_pred)
    yc, pc = y - y.mean(), p - p.mean()
    denom = math.sqrt(float(yc @ yc) * float(pc @ pc))
    if denom == 0:
        raise MetricError("correlation undefined for a constant series")
    return float(yc @ pc / denom)


def mape(y_true, y_pred) -> float:
    """Mean absolute percentage error as a fraction (0.05 = 5%)."""
    y, p = _pair(y_true, y_pred)
    if np.any(y == 0):
        raise MetricError("MAPE undefined when y_true contains 0")
    return float(np.mean(np.abs(y - p) / np.abs(y)))


def regression_metrics(y_true, y_pred, with_mape=True) -> dict[str, float]:
    y, p = _pair(y_true, y_pred)
    err = y - p
    ae = np.abs(err)
    out = {
        "rmse": rmse(y, p),
        "r2": r2(y, p),
        "pearson": pearson(y, p),
        "mse": float(np.mean(err ** 2)),
        "mae": float(ae.mean()),
        "std_mae": float(ae.std()),
    }
    if with_mape:
        out["mape"] = mape(y, p)
    return out


def auroc(labels, scores) -> float:
    """P(random positive scores above random negative), ties counted one half."""
    lab = np.asarray(labels)
    s = np.asarray(scores, float)
    if lab.shape != s.shape:
        raise MetricError("labels and scores differ in shape")
    pos = lab == 1
    n_pos, n_neg = int(pos.sum()), int((~pos).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError("AUROC needs both classes")
    ranks = rankdata(s)
    u = ranks[pos].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def roc_curve(labels, scores):
    """(fpr, tpr, threshold) arrays, thresholds descending, starting at (0, 0)."""
    lab = np.asarray(labels) == 1
    s = np.asarray(scores, float)
    order = np.argsort(-s, kind="mergesort")
    s, lab = s[order], lab[order]
    distinct = np.r_[np.flatnonzero(np.diff(s)), len(s) - 1]
    tps = np.cumsum(lab)[distinct]
    fps = (distinct + 1) - tps
    tpr = np.r_[0.0, tps / max(lab.sum(), 1)]
    fpr = np.r_[0.0, fps / max((~lab).sum(), 1)]
    thr = np.r_[np.inf, s[distinct]]
    return fpr, tpr, thr


METRICS: dict[str, Callable] = {
    "rmse": rmse, "r2": r2, "pearson": pearson, "mape": mape,
    "mse": lambda y, p: regression_metrics(y, p, False)["mse"],
    "mae": lambda y, p: regression_metrics(y, p, False)["mae"],
    "std_mae": lambda y, p: regression_metrics(y, p, False)["std_mae"],
    "auroc": auroc,
}


def bootstrap_ci(metric: Callable | str, y_true, y_pred, n_resamples: int = 500, level: float = 0.95,
                 seed: int = 0, max_redraws: int = 10000) -> tuple[float, float]:
    """Percentile interval over paired resamples drawn with replacement.

    Resamples on which the metric is undefined are redrawn.
    """
    fn = METRICS[metric] if isinstance(metric, str) else metric
    y = np.asarray(y_true)
    p = np.asarray(y_pred)
    try:
        fn(y, p)
    except MetricError as exc:
        raise MetricError(f"metric undefined on the full sample: {exc}") from None
    rng = np.random.default_rng(seed)
    n = len(y)
    values = []
    redraws = 0
    while len(values) < n_resamples:
        idx = rng.integers(0, n, n)
        try:
            values.append(fn(y[idx], p[idx]))
        except MetricError:
            redraws += 1
            if redraws > max_redraws:
                raise MetricError("too many undefined bootstrap resamples") from None
    if redraws:
        log.info("bootstrap redrew %d undefined resamples", redraws)
    alpha = (1.0 - level) / 2.0
    lo, hi = np.percentile(values, [100 * alpha, 100 * (1 - alpha)])
    return float(lo), float(hi)


def bland_altman(y_true, y_pred) -> dict:
    """Mean difference (true - pred) and 95% limits of agreement."""
    y, p = _pair(y_true, y_pred)
    diff = y - p
    md = float(diff.mean())
    sd = float(diff.std())
    return {
        "mean_diff": md,
        "lower_loa": md - 1.96 * sd,
        "upper_loa": md + 1.96 * sd,
        "points": np.column_stack([(y + p) / 2.0, diff]),
    }


def permutation_pvalue(x, y, n_permutations: int = 1000, seed: int = 0) -> float:
    """Two-sided permutation p-value for Pearson correlation."""
    r = abs(pearson(x, y))
    rng = np.random.default_rng(seed)
    x = np.asarray(x, float)
    y = np.asarray(y, float)
    hits = sum(abs(pearson(x, rng.permutation(y))) >= r for _ in range(n_permutations))
    return (hits + 1) / (n_permutations + 1)


@dataclass
class Estimate:
    point: float
    lower: float
    upper: float

    def to_dict(self):
        return {"point": self.point, "lower": self.lower, "upper": self.upper}


@dataclass
class EvalReport:
    metrics: dict[str, Estimate]
    n_train: int
    n_test: int
    seed: int
    subgroups: dict[str, "EvalReport | None"] = field(default_factory=dict)
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n_test <= 0 or self.n_train < 0:
            raise MetricError("report sizes must be positive")

    def to_dict(self) -> dict:
        return {
            "metrics": {k: v.to_dict() for k, v in self.metrics.items()},
            "n_train": self.n_train,
            "n_test": self.n_test,
            "seed": self.seed,
            "subgroups": {k: (v.to_dict() if v is not None else None) for k, v in self.subgroups.items()},
            "extra": self.extra,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(
            metrics={k: Estimate(**v) for k, v in d["metrics"].items()},
            n_train=d["n_train"], n_test=d["n_test"], seed=d["seed"],
            subgroups={k: (cls.from_dict(v) if v is not None else None) for k, v in d["subgroups"].items()},
            extra=d.get("extra", {}),
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)


def estimate(metric: str, y_true, y_pred, n_resamples=500, seed=0) -> Estimate:
    point = METRICS[metric](np.asarray(y_true), np.asarray(y_pred))
    lo, hi = bootstrap_ci(metric, y_true, y_pred, n_resamples=n_resamples, seed=seed)
    # percentile intervals need not bracket the point estimate; widen so they do
    return Estimate(point, min(lo, point), max(hi, point))


def evaluate(y_true, y_pred, metrics: Sequence[str] = ("r2", "pearson", "rmse"), n_train: int = 0,
             n_resamples: int = 500, seed: int = 0) -> EvalReport:
    y_true = np.asarray(y_true, float)
    y_pred = np.asarray(y_pred, float)
    return EvalReport(
        metrics={m: estimate(m, y_true, y_pred, n_resamples, seed) for m in metrics},
        n_train=n_train, n_test=len(y_true), seed=seed,
    )


SUBGROUP_METRICS = ("r2", "pearson", "rmse", "mse", "mae", "std_mae", "mape")


def median_split(values) -> tuple[np.ndarray, float]:
    """Boolean mask of the first (<= median) group and the median itself."""
    v = np.asarray(values, float)
    med = float(np.median(v))
    return v <= med, med


def subgroup_report(covariates: Mapping[str, np.ndarray], y_true, y_pred, grouping: str,
                    n_train: int = 0, n_resamples: int = 500, seed: int = 0) -> dict[str, EvalReport | None]:
    """Per-group reports for ``sex`` or a median split of age/weight/bmi/height.

    Groups with fewer than two rows are reported as None.
    """
    y_true = np.asarray(y_true, float)
    y_pred = np.asarray(y_pred, float)
    if grouping == "sex":
        sex = np.asarray(covariates["sex"])
        masks = {"male": sex == 1, "female": sex == 0}
    elif grouping in ("age", "weight", "bmi", "height"):
        first, med = median_split(covariates[grouping])
        masks = {f"{grouping}<=median": first, f"{grouping}>median": ~first}
    else:
        raise MetricError(f"unknown grouping {grouping}")
    out: dict[str, EvalReport | None] = {}
    for name, mask in masks.items():
        if mask.sum() < 2:
            log.warning("subgroup %s has %d rows; reported as absent", name, int(mask.sum()))
            out[name] = None
            continue
        try:
            out[name] = evaluate(y_true[mask], y_pred[mask], SUBGROUP_METRICS, n_train, n_resamples, seed)
        except MetricError as exc:
            log.warning("subgroup %s: %s; reported as absent", name, exc)
            out[name] = None
    return out


SCHEMES = {"50/50": 0.5, "80/20": 0.2, "90/10": 0.1}


@dataclass(frozen=True)
class DeltaBins:
    """Quantile thresholds fitted on training deltas (current - future)."""

    scheme: str
    low: float
    high: float

    def apply(self, deltas) -> tuple[np.ndarray, np.ndarray]:
        """(keep mask, 0/1 labels for the kept rows); 1 marks the upper tail."""
        d = np.asarray(deltas, float)
        if self.scheme == "50/50":
            keep = np.ones(len(d), dtype=bool)
            labels = (d > self.high).astype(int)
        else:
            keep = (d <= self.low) | (d >= self.high)
            labels = (d[keep] >= self.high).astype(int)
        return keep, labels


def fit_delta_bins(train_deltas, scheme: str, min_per_class: int = 2) -> DeltaBins:
    if scheme not in SCHEMES:
        raise MetricError(f"unknown scheme {scheme}")
    d = np.asarray(train_deltas, float)
    if len(d) == 0 or np.ptp(d) == 0:
        raise MetricError("degenerate delta distribution")
    tail = SCHEMES[scheme]
    low, high = np.percentile(d, [100 * tail, 100 * (1 - tail)])
    bins = DeltaBins(scheme, float(low), float(high))
    _, labels = bins.apply(d)
    counts = np.bincount(labels, minlength=2)
    if counts.min() < min_per_class:
        raise MetricError(f"scheme {scheme} leaves {counts.tolist()} rows per class")
    return bins


def delta_bins(deltas, scheme: str, train_deltas=None):
    """Labels and retained subset; thresholds come from ``train_deltas`` when given."""
    bins = fit_delta_bins(deltas if train_deltas is None else train_deltas, scheme)
    keep, labels = bins.apply(deltas)
    if np.bincount(labels, minlength=2).min() < 2:
        raise MetricError(f"scheme {scheme}: fewer than 2 retained rows in a class")
    return labels, keep, bins
