"""End-to-end orchestration: data generation, features, the three tasks, reports.

Every artifact lands under one output directory::

    data/       cohort.csv, latent.csv, fii_sensor_ids.txt
    features/   layout.json, features_fi.csv, features_fii.csv, wear_summary.csv, excluded.csv
    task1/      bundles/*.json, predictions.csv, report.json
    task2/      bundles/*.json, predictions_*.csv, thresholds.json, report.json
    task3/      predictions.csv, report.json
    latent/     embedding_latent.csv, embedding_original.csv, case_study.csv
    report/     table1.csv, table2.csv, table3.csv, subgroups.csv, plot data
    manifest.json

The manifest is a JSON object with keys ``format``, ``config`` (the resolved
configuration), ``config_digest``, ``seed``, ``layout_version``, ``stages``
(per-stage inputs and seeds) and ``artifacts`` (relative path -> sha256).  It
holds no timestamps, so identical runs give identical manifests.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import pandas as pd
import yaml

from vo2fit import cohortgen as cg
from vo2fit import evalmetrics as em
from vo2fit import featurize as fz
from vo2fit import latentspace as ls
from vo2fit import sensorproc as sp
from vo2fit import transform as tf
from vo2fit.errors import ConfigurationError, DataError, FeaturizationError, MetricError
from vo2fit.models import bundle as mb
from vo2fit.models.dense import CLASSIFIER, REGRESSOR, NetworkConfig, TrainConfig
from vo2fit.models.equation import equation_estimate

log = logging.getLogger(__name__)

FULL_SET = "sensors+rhr+anthro"
MODELS = ("linear", "dense", "equation")
TASKS = ("current", "future", "delta_regression", "delta_class_5050", "delta_class_8020",
         "delta_class_9010", "adaptive_inference")
DEFAULT_TASK1_ROWS = (
    ("anthro", "linear"),
    ("rhr", "linear"),
    ("anthro+rhr", "linear"),
    (FULL_SET, "linear"),
    (FULL_SET, "dense"),
    ("anthro+rhr", "equation"),
)
SCHEME_TASKS = {"50/50": "delta_class_5050", "80/20": "delta_class_8020", "90/10": "delta_class_9010"}
REPORT_METRICS = ("r2", "pearson", "rmse")
SUBGROUPINGS = ("sex", "age", "weight", "bmi", "height")


# ---------------------------------------------------------------------------
# configuration


def _build(cls, d: dict | None, section: str):
    d = dict(d or {})
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigurationError(f"{section}: unknown keys {sorted(unknown)}")
    for k, v in d.items():
        if isinstance(v, list):
            d[k] = tuple(v)
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigurationError(f"{section}: {exc}") from None


@dataclass(frozen=True)
class TaskSpec:
    task: str
    covariates: str
    model: str

    def __post_init__(self):
        if self.task not in TASKS:
            raise ConfigurationError(f"unknown task {self.task}")
        if self.covariates not in fz.COVARIATE_SETS:
            raise ConfigurationError(f"unknown covariate set {self.covariates!r}")
        if self.model not in MODELS:
            raise ConfigurationError(f"unknown model {self.model}")
        if self.model == "equation" and self.task != "current":
            raise ConfigurationError("the equation baseline only estimates current VO2max")

    @property
    def name(self) -> str:
        return f"{self.covariates}:{self.model}"

    @property
    def slug(self) -> str:
        return f"{self.task}__{self.covariates.replace('+', '_')}__{self.model}"


@dataclass(frozen=True)
class Config:
    population: cg.PopulationSpec = cg.PopulationSpec.desk()
    drift: cg.DriftSpec = cg.DriftSpec()
    sensor: cg.SensorConfig = cg.SensorConfig()
    train: TrainConfig = TrainConfig()
    regressor: NetworkConfig = REGRESSOR
    classifier: NetworkConfig = CLASSIFIER
    seed: int = 42
    n_resamples: int = 500
    n_permutations: int = 1000
    task1_rows: tuple = DEFAULT_TASK1_ROWS
    task2_test_fraction: float = 0.2
    knn_k: int = 5
    n_queries: int = 3

    def __post_init__(self):
        if self.n_resamples < 1 or self.n_permutations < 1:
            raise ConfigurationError("n_resamples and n_permutations must be positive")
        if not 0.0 < self.task2_test_fraction < 1.0:
            raise ConfigurationError("task2_test_fraction must lie in (0, 1)")
        if not self.task1_rows:
            raise ConfigurationError("task1_rows is empty")
        for row in self.task1_rows:
            TaskSpec("current", *row)
        if self.regressor.output != "linear" or self.classifier.output != "sigmoid":
            raise ConfigurationError("regressor needs a linear output and classifier a sigmoid output")

    def with_seed(self, seed: int | None) -> "Config":
        if seed is None:
            return self
        return dataclasses.replace(self, seed=int(seed),
                                   population=dataclasses.replace(self.population, seed=int(seed)))

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d))

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict | None) -> "Config":
        d = dict(d or {})
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown config keys {sorted(unknown)}")
        seed = int(d.get("seed", 42))
        pop = dict(d.get("population") or {})
        profile = pop.pop("profile", None)
        if profile == "desk":
            base = cg.PopulationSpec.desk(int(pop.pop("n_train", 3000)), int(pop.pop("n_longitudinal", 600)),
                                          seed=seed)
            population = dataclasses.replace(base, **{k: int(v) for k, v in pop.items()}) if pop else base
        elif profile in (None, "full"):
            population = cg.PopulationSpec.from_dict({**pop, "seed": pop.get("seed", seed)})
        else:
            raise ConfigurationError(f"unknown population profile {profile!r}")
        kwargs = dict(
            population=population,
            drift=_build(cg.DriftSpec, d.get("drift"), "drift"),
            sensor=_build(cg.SensorConfig, d.get("sensor"), "sensor"),
            train=_build(TrainConfig, d.get("train"), "train"),
            regressor=_build(NetworkConfig, {**REGRESSOR.to_dict(), **(d.get("regressor") or {})}, "regressor"),
            classifier=_build(NetworkConfig, {**CLASSIFIER.to_dict(), **(d.get("classifier") or {})},
                              "classifier"),
            seed=seed,
        )
        for k in ("n_resamples", "n_permutations", "knn_k", "n_queries"):
            if k in d:
                kwargs[k] = int(d[k])
        if "task2_test_fraction" in d:
            kwargs["task2_test_fraction"] = float(d["task2_test_fraction"])
        if "task1_rows" in d:
            kwargs["task1_rows"] = tuple(tuple(r) for r in d["task1_rows"])
        return cls(**kwargs)


def load_config(path: Path) -> Config:
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} does not exist")
    try:
        doc = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise ConfigurationError(f"{path}: {exc}") from None
    if doc is not None and not isinstance(doc, dict):
        raise ConfigurationError(f"{path}: top level must be a mapping")
    return Config.from_dict(doc)


def derive_seed(seed: int, *parts) -> int:
    """Stable 32-bit seed for a named sub-stream of the run."""
    h = hashlib.sha256(":".join(str(p) for p in (seed,) + parts).encode()).digest()
    return int.from_bytes(h[:4], "little")


# ---------------------------------------------------------------------------
# data and features


@dataclass
class FeatureSet:
    """Feature vectors keyed by participant id, per cohort, plus who was excluded and why."""

    fi: dict[str, fz.FeatureVector]
    fii: dict[str, fz.FeatureVector]
    excluded: list = field(default_factory=list)  # (id, cohort, reason)
    wear: list = field(default_factory=list)  # (id, cohort, wear_minutes, nonwear_episodes)


def featurize_participant(p: cg.Participant, cfg: Config) -> tuple[fz.FeatureVector, int, int]:
    week = cg.generate_sensor_week(p, cg.week_seed(cfg.seed, p.id, p.cohort), cfg.population, cfg.sensor)
    clean = sp.clean_week(week)
    return fz.build_feature_vector(p, clean), clean.wear_minutes, len(week.nonwear_episodes)


def build_features(study: cg.Study, cfg: Config) -> FeatureSet:
    fs = FeatureSet(fi={}, fii={})
    todo = [(p, fs.fi) for p in study.fi] + [(p, fs.fii) for p in study.fii if p.id in study.fii_with_sensors]
    for p, target in todo:
        try:
            vec, wear, episodes = featurize_participant(p, cfg)
        except FeaturizationError as exc:
            log.info("excluded %s/%s: %s", p.id, p.cohort, exc)
            fs.excluded.append((p.id, p.cohort, str(exc)))
            continue
        target[p.id] = vec
        fs.wear.append((p.id, p.cohort, wear, episodes))
    missing = sorted(set(q.id for q in study.fii) - study.fii_with_sensors)
    for pid in missing:
        fs.excluded.append((pid, "FII", "no follow-up sensor week"))
    return fs


def write_features(fs: FeatureSet, out: Path) -> None:
    out.mkdir(parents=True, exist_ok=True)
    fz.write_layout(fz.CANONICAL_LAYOUT, out / "layout.json")
    fz.write_features_csv(list(fs.fi.values()), out / "features_fi.csv")
    fz.write_features_csv(list(fs.fii.values()), out / "features_fii.csv")
    pd.DataFrame(fs.wear, columns=["id", "cohort", "wear_minutes", "nonwear_episodes"]).to_csv(
        out / "wear_summary.csv", index=False, lineterminator="\n")
    pd.DataFrame(fs.excluded, columns=["id", "cohort", "reason"]).to_csv(
        out / "excluded.csv", index=False, lineterminator="\n")


def read_features(out: Path) -> FeatureSet:
    layout = fz.read_layout(out / "layout.json")
    if layout.version != fz.LAYOUT_VERSION:
        raise DataError(f"features written with layout {layout.version}, expected {fz.LAYOUT_VERSION}")
    fi = fz.read_features_csv(out / "features_fi.csv", layout, cohort="FI")
    fii = fz.read_features_csv(out / "features_fii.csv", layout, cohort="FII")
    excluded = pd.read_csv(out / "excluded.csv", dtype=str).itertuples(index=False, name=None)
    return FeatureSet(fi={v.participant_id: v for v in fi}, fii={v.participant_id: v for v in fii},
                      excluded=list(excluded))


# ---------------------------------------------------------------------------
# manifest


def sha256_file(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def read_manifest(out: Path) -> dict:
    path = Path(out) / "manifest.json"
    return json.loads(path.read_text()) if path.exists() else {}


def write_manifest(out: Path, cfg: Config, stage: str, info: dict) -> dict:
    out = Path(out)
    m = read_manifest(out)
    if m.get("config_digest") != cfg.digest():
        m = {}
    m.update(format="vo2fit.manifest", format_version=1, config=cfg.to_dict(), config_digest=cfg.digest(),
             seed=cfg.seed, layout_version=fz.LAYOUT_VERSION)
    stages = m.setdefault("stages", {})
    stages[stage] = info
    m["stages"] = dict(sorted(stages.items()))
    m["artifacts"] = {str(p.relative_to(out)): sha256_file(p)
                      for p in sorted(out.rglob("*")) if p.is_file() and p.name != "manifest.json"}
    (out / "manifest.json").write_text(json.dumps(m, indent=1, sort_keys=True) + "\n")
    return m


def _current(out: Path, cfg: Config, stage: str) -> bool:
    m = read_manifest(out)
    return m.get("config_digest") == cfg.digest() and stage in m.get("stages", {})


def ensure_study(cfg: Config, out: Path) -> cg.Study:
    data = Path(out) / "data"
    if _current(out, cfg, "generate"):
        return cg.read_study(data)
    study = cg.generate_study(cfg.population, cfg.drift)
    cg.write_study(study, data)
    write_manifest(out, cfg, "generate", {"population_seed": cfg.population.seed, "ground_truth": cg.GROUND_TRUTH.version,
                                          "n_fi": len(study.fi), "n_fii": len(study.fii),
                                          "n_fii_with_sensors": len(study.fii_with_sensors)})
    return study


def ensure_features(cfg: Config, out: Path) -> tuple[cg.Study, FeatureSet]:
    study = ensure_study(cfg, out)
    fdir = Path(out) / "features"
    if _current(out, cfg, "featurize"):
        return study, read_features(fdir)
    fs = build_features(study, cfg)
    write_features(fs, fdir)
    # reload so in-memory values are exactly what downstream readers will see
    fs_disk = read_features(fdir)
    fs_disk.wear = fs.wear
    write_manifest(out, cfg, "featurize", {"sensor_seed": cfg.seed, "n_fi": len(fs.fi), "n_fii": len(fs.fii),
                                           "n_excluded": len(fs.excluded)})
    return study, fs_disk


# ---------------------------------------------------------------------------
# splits


@dataclass(frozen=True)
class SplitPlan:
    """Baseline-only participants train, longitudinal participants test."""

    train_ids: tuple
    test_ids: tuple
    validation_fraction: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if set(self.train_ids) & set(self.test_ids):
            raise DataError("train and test ids overlap")
        if not self.train_ids or not self.test_ids:
            raise DataError("empty train or test split")


def make_split(fs: FeatureSet, cfg: Config) -> SplitPlan:
    train, test = [], []
    for pid, v in sorted(fs.fi.items()):
        (test if v.label_future is not None else train).append(pid)
    return SplitPlan(tuple(train), tuple(test), cfg.train.validation_fraction, cfg.seed)


def _matrix(fs: FeatureSet, ids: Sequence[str], cohort: str = "FI") -> np.ndarray:
    vecs = fs.fi if cohort == "FI" else fs.fii
    return fz.feature_matrix([vecs[i] for i in ids])


def _labels(fs: FeatureSet, ids: Sequence[str], target: str) -> np.ndarray:
    cur = np.array([fs.fi[i].label_current for i in ids], float)
    if target == "current":
        return cur
    fut = np.array([fs.fi[i].label_future for i in ids], float)
    if target == "future":
        return fut
    if target == "delta":
        return cur - fut
    raise ConfigurationError(f"unknown target {target}")


def _covariate_columns(covariates: str) -> tuple[tuple, list[int]]:
    cols = fz.COVARIATE_SETS[covariates]
    if not cols:
        raise ConfigurationError(f"covariate set {covariates} is empty")
    return cols, fz.CANONICAL_LAYOUT.index(cols)


# ---------------------------------------------------------------------------
# model fitting (sees training rows only)


def fit_model(spec: TaskSpec, X_train: np.ndarray, y_train: np.ndarray, cfg: Config,
              transform: tf.FittedTransform | None = None, kind: str = "regressor",
              metadata: dict | None = None) -> mb.ModelBundle | None:
    """Fit one (covariate set, model) pair; ``X_train`` is full-layout rows.

    Returns None for the equation baseline, which has nothing to fit.
    """
    if spec.model == "equation":
        return None
    cols, idx = _covariate_columns(spec.covariates)
    Xs = X_train[:, idx]
    if transform is None:
        transform = tf.fit(Xs, fz.LAYOUT_VERSION, cols)
    Xp = tf.apply(transform, Xs)
    meta = {"task": spec.task, "covariates": spec.covariates, "model": spec.model, "seed": cfg.seed,
            **(metadata or {})}
    if spec.model == "linear":
        return mb.train_linear(Xp, y_train, transform, cols, idx, meta)
    net = cfg.regressor if kind == "regressor" else cfg.classifier
    tcfg = dataclasses.replace(cfg.train, seed=derive_seed(cfg.seed, cfg.train.seed, spec.slug))
    return mb.train_dense(Xp, y_train, tcfg, kind, transform, cols, idx, network=net, metadata=meta)


def predict_rows(spec: TaskSpec, bundle: mb.ModelBundle | None, X: np.ndarray) -> np.ndarray:
    if spec.model == "equation":
        names = fz.CANONICAL_LAYOUT.names
        return equation_estimate(X[:, names.index("age")], X[:, names.index("rhr")])
    return mb.predict(bundle, X)


def _eval(y, pred, cfg: Config, n_train: int, tag: str, metrics=REPORT_METRICS) -> em.EvalReport:
    return em.evaluate(y, pred, metrics, n_train=n_train, n_resamples=cfg.n_resamples,
                       seed=derive_seed(cfg.seed, "bootstrap", tag))


def covariate_columns_of(X: np.ndarray) -> dict[str, np.ndarray]:
    names = fz.CANONICAL_LAYOUT.names
    return {c: X[:, names.index(c)] for c in ("sex", "age", "weight", "bmi", "height")}


# ---------------------------------------------------------------------------
# task 1


@dataclass
class Task1Result:
    bundles: dict  # row name -> ModelBundle | None
    predictions: pd.DataFrame
    reports: dict  # row name -> EvalReport
    subgroups: dict
    agreement: dict


def task1_fit(fs: FeatureSet, plan: SplitPlan, cfg: Config) -> dict:
    X = _matrix(fs, plan.train_ids)
    y = _labels(fs, plan.train_ids, "current")
    bundles = {}
    for cov, model in cfg.task1_rows:
        spec = TaskSpec("current", cov, model)
        log.info("task1: fitting %s on %d rows", spec.name, len(y))
        bundles[spec.name] = fit_model(spec, X, y, cfg)
    return bundles


def task1_evaluate(bundles: dict, fs: FeatureSet, plan: SplitPlan, cfg: Config) -> Task1Result:
    X = _matrix(fs, plan.test_ids)
    y = _labels(fs, plan.test_ids, "current")
    preds = {"id": list(plan.test_ids), "y_true": y}
    reports, subgroups, agreement = {}, {}, {}
    for cov, model in cfg.task1_rows:
        spec = TaskSpec("current", cov, model)
        p = predict_rows(spec, bundles[spec.name], X)
        preds[spec.name] = p
        reports[spec.name] = _eval(y, p, cfg, len(plan.train_ids), f"task1:{spec.name}")
        if cov == FULL_SET:
            ba = em.bland_altman(y, p)
            agreement[spec.name] = {k: v for k, v in ba.items() if k != "points"}
        if spec.name == f"{FULL_SET}:dense":
            covs = covariate_columns_of(X)
            for g in SUBGROUPINGS:
                subgroups[g] = em.subgroup_report(covs, y, p, g, len(plan.train_ids), cfg.n_resamples,
                                                  derive_seed(cfg.seed, "subgroup", g))
    return Task1Result(bundles, pd.DataFrame(preds), reports, subgroups, agreement)


def _save_bundles(bundles: dict, tasks: dict, bdir: Path) -> dict[str, str]:
    bdir.mkdir(parents=True, exist_ok=True)
    hashes = {}
    for name, b in bundles.items():
        if b is None:
            continue
        hashes[name] = mb.save_bundle(b, bdir / f"{tasks[name].slug}.json")
    return hashes


def _write_csv(df: pd.DataFrame, path: Path) -> None:
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def run_task1(cfg: Config, out: Path) -> Task1Result:
    out = Path(out)
    _, fs = ensure_features(cfg, out)
    plan = make_split(fs, cfg)
    bundles = task1_fit(fs, plan, cfg)
    res = task1_evaluate(bundles, fs, plan, cfg)
    tdir = out / "task1"
    specs = {TaskSpec("current", c, m).name: TaskSpec("current", c, m) for c, m in cfg.task1_rows}
    hashes = _save_bundles(bundles, specs, tdir / "bundles")
    _write_csv(res.predictions, tdir / "predictions.csv")
    doc = {
        "n_train": len(plan.train_ids), "n_test": len(plan.test_ids),
        "rows": {k: v.to_dict() for k, v in res.reports.items()},
        "row_order": list(res.reports),
        "bland_altman": res.agreement,
        "subgroups": {g: {k: (r.to_dict() if r else None) for k, r in d.items()} for g, d in res.subgroups.items()},
        "bundles": {k: f"bundles/{specs[k].slug}.json" for k in hashes},
        "bundle_sha256": hashes,
        "excluded": len(fs.excluded),
    }
    (tdir / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    write_manifest(out, cfg, "task1", {"split_seed": plan.seed, "train_seeds": {
        k: b.metadata["train_config"]["seed"] for k, b in bundles.items() if b is not None and b.kind != "linear"},
        "bootstrap_resamples": cfg.n_resamples})
    return res


def task1_bundle_path(out: Path, cfg: Config) -> Path:
    return Path(out) / "task1" / "bundles" / f"{TaskSpec('current', FULL_SET, 'dense').slug}.json"


def load_task1_bundle(out: Path, cfg: Config) -> mb.ModelBundle:
    path = task1_bundle_path(out, cfg)
    if not path.exists():
        raise DataError(f"{path} missing; run task1 first")
    return mb.load_bundle(path)


# ---------------------------------------------------------------------------
# task 2


def split_longitudinal(ids: Sequence[str], cfg: Config) -> tuple[tuple, tuple]:
    """Seeded train/test partition of the longitudinal ids (default 80/20)."""
    ids = sorted(ids)
    rng = np.random.default_rng(derive_seed(cfg.seed, "task2-split"))
    perm = rng.permutation(len(ids))
    n_test = int(round(len(ids) * cfg.task2_test_fraction))
    if n_test < 2 or len(ids) - n_test < 2:
        raise DataError(f"longitudinal set of {len(ids)} is too small to split")
    test = sorted(ids[i] for i in perm[:n_test])
    train = sorted(ids[i] for i in perm[n_test:])
    return tuple(train), tuple(test)


@dataclass
class Task2Result:
    bundles: dict
    thresholds: dict  # scheme -> DeltaBins
    reports: dict
    predictions: dict  # name -> DataFrame
    retained: dict


def task2_fit(fs: FeatureSet, train_ids: Sequence[str], transform: tf.FittedTransform,
              cfg: Config) -> tuple[dict, dict]:
    X = _matrix(fs, train_ids)
    bundles, thresholds = {}, {}
    for target, task in (("current", "current"), ("future", "future"), ("delta", "delta_regression")):
        spec = TaskSpec(task, FULL_SET, "dense")
        bundles[task] = fit_model(spec, X, _labels(fs, train_ids, target), cfg, transform=transform)
    deltas = _labels(fs, train_ids, "delta")
    for scheme, task in SCHEME_TASKS.items():
        bins = em.fit_delta_bins(deltas, scheme)
        keep, lab = bins.apply(deltas)
        thresholds[scheme] = bins
        spec = TaskSpec(task, FULL_SET, "dense")
        bundles[task] = fit_model(spec, X[keep], lab.astype(float), cfg, transform=transform, kind="classifier",
                                  metadata={"scheme": scheme, "low": bins.low, "high": bins.high})
    return bundles, thresholds


def task2_evaluate(bundles: dict, thresholds: dict, fs: FeatureSet, train_ids, test_ids,
                   cfg: Config) -> Task2Result:
    X = _matrix(fs, test_ids)
    reports, preds, retained = {}, {}, {}
    for target, task in (("current", "current"), ("future", "future"), ("delta", "delta_regression")):
        y = _labels(fs, test_ids, target)
        p = mb.predict(bundles[task], X)
        reports[task] = _eval(y, p, cfg, len(train_ids), f"task2:{task}")
        preds[task] = pd.DataFrame({"id": list(test_ids), "y_true": y, "y_pred": p})
    deltas = _labels(fs, test_ids, "delta")
    for scheme, task in SCHEME_TASKS.items():
        keep, lab = thresholds[scheme].apply(deltas)
        if np.bincount(lab, minlength=2).min() < 2:
            raise MetricError(f"scheme {scheme}: fewer than 2 test rows per class")
        scores = mb.predict(bundles[task], X[keep])
        reports[task] = _eval(lab, scores, cfg, len(train_ids), f"task2:{task}", metrics=("auroc",))
        retained[task] = {"n_retained": int(keep.sum()), "n_total": len(test_ids),
                          "n_positive": int(lab.sum())}
        preds[task] = pd.DataFrame({"id": [i for i, k in zip(test_ids, keep) if k], "label": lab, "score": scores})
    return Task2Result(bundles, thresholds, reports, preds, retained)


def run_task2(cfg: Config, out: Path) -> Task2Result:
    out = Path(out)
    _, fs = ensure_features(cfg, out)
    plan = make_split(fs, cfg)
    transform = load_task1_bundle(out, cfg).transform
    train_ids, test_ids = split_longitudinal(plan.test_ids, cfg)
    bundles, thresholds = task2_fit(fs, train_ids, transform, cfg)
    res = task2_evaluate(bundles, thresholds, fs, train_ids, test_ids, cfg)
    tdir = out / "task2"
    specs = {t: TaskSpec(t, FULL_SET, "dense") for t in bundles}
    hashes = _save_bundles(bundles, specs, tdir / "bundles")
    for name, df in res.predictions.items():
        _write_csv(df, tdir / f"predictions_{name}.csv")
    (tdir / "thresholds.json").write_text(json.dumps(
        {s: {"low": b.low, "high": b.high} for s, b in thresholds.items()}, indent=1, sort_keys=True) + "\n")
    doc = {"n_train": len(train_ids), "n_test": len(test_ids), "transform_digest": transform.digest(),
           "rows": {k: v.to_dict() for k, v in res.reports.items()}, "retained": res.retained,
           "bundle_sha256": hashes}
    (tdir / "report.json").write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    write_manifest(out, cfg, "task2", {"split_seed": derive_seed(cfg.seed, "task2-split"),
                                       "test_fraction": cfg.task2_test_fraction})
    return res


# ---------------------------------------------------------------------------
# task 3


@dataclass
class Task3Result:
    report: dict
    predictions: pd.DataFrame


def task3_evaluate(bundle: mb.ModelBundle, fs: FeatureSet, test_ids: Sequence[str], cfg: Config) -> Task3Result:
    ids = [i for i in test_ids if i in fs.fii]
    dropped = len(test_ids) - len(ids)
    if dropped:
        log.info("task3: %d longitudinal participants lack a follow-up week and are excluded", dropped)
    if len(ids) < 3:
        raise DataError("fewer than 3 participants with follow-up sensor weeks")
    pred_fi = mb.predict(bundle, _matrix(fs, ids, "FI"))
    pred_fii = mb.predict(bundle, _matrix(fs, ids, "FII"))
    true_fi = _labels(fs, ids, "current")
    true_fii = _labels(fs, ids, "future")
    d_pred = pred_fi - pred_fii
    d_true = true_fi - true_fii
    pseed = derive_seed(cfg.seed, "permutation")
    report = {
        "n": len(ids),
        "n_excluded": dropped,
        "corr_pred_fii_vs_true_fii": em.pearson(true_fii, pred_fii),
        "corr_pred_fii_vs_true_fi": em.pearson(true_fi, pred_fii),
        "corr_pred_fi_vs_true_fi": em.pearson(true_fi, pred_fi),
        "corr_delta": em.pearson(d_true, d_pred),
        "corr_delta_pvalue": em.permutation_pvalue(d_true, d_pred, cfg.n_permutations, pseed),
        "p_threshold": em.P_THRESHOLD,
        "fii": _eval(true_fii, pred_fii, cfg, int(bundle.metadata.get("n_train", 0)), "task3:fii").to_dict(),
    }
    df = pd.DataFrame({"id": ids, "true_fi": true_fi, "true_fii": true_fii, "pred_fi": pred_fi,
                       "pred_fii": pred_fii, "delta_true": d_true, "delta_pred": d_pred})
    return Task3Result(report, df)


def run_task3(cfg: Config, out: Path) -> Task3Result:
    out = Path(out)
    _, fs = ensure_features(cfg, out)
    plan = make_split(fs, cfg)
    path = task1_bundle_path(out, cfg)
    before = sha256_file(path) if path.exists() else None
    bundle = load_task1_bundle(out, cfg)
    res = task3_evaluate(bundle, fs, plan.test_ids, cfg)

    # the frozen bundle must reproduce the task-1 test predictions exactly
    t1 = pd.read_csv(out / "task1" / "predictions.csv", dtype={"id": str}, float_precision="round_trip")
    name = f"{FULL_SET}:dense"
    again = mb.predict(bundle, _matrix(fs, list(t1["id"])))
    res.report["task1_reproduced"] = bool(np.array_equal(again, t1[name].to_numpy(float)))
    after = sha256_file(path)
    if after != before:
        raise DataError("task-1 bundle changed during task 3")
    res.report["bundle_sha256"] = after

    tdir = out / "task3"
    tdir.mkdir(parents=True, exist_ok=True)
    _write_csv(res.predictions, tdir / "predictions.csv")
    (tdir / "report.json").write_text(json.dumps(res.report, indent=1, sort_keys=True) + "\n")
    write_manifest(out, cfg, "task3", {"bundle_sha256": after, "permutation_seed": derive_seed(cfg.seed, "permutation"),
                                       "n_permutations": cfg.n_permutations})
    return res


# ---------------------------------------------------------------------------
# latent space


def run_latent(cfg: Config, out: Path, bundle_path: Path | None = None) -> pd.DataFrame:
    out = Path(out)
    study, fs = ensure_features(cfg, out)
    plan = make_split(fs, cfg)
    bundle = mb.load_bundle(bundle_path) if bundle_path else load_task1_bundle(out, cfg)
    ids = list(plan.test_ids)
    X = _matrix(fs, ids)
    latent = ls.extract_latent(bundle, ids, X)
    original = ls.original_embedding(bundle, ids, X)
    rng = np.random.default_rng(derive_seed(cfg.seed, "knn-queries"))
    queries = sorted(rng.choice(ids, size=min(cfg.n_queries, len(ids)), replace=False).tolist())
    people = {p.id: p for p in study.fi}
    covs = {i: {"age": people[i].age, "sex": people[i].sex, "bmi": people[i].bmi, "rhr": people[i].rhr,
                "vo2max": people[i].vo2max_current} for i in ids}
    table = ls.subtype_case_study(original, latent, queries, cfg.knn_k, covs)
    ldir = out / "latent"
    ldir.mkdir(parents=True, exist_ok=True)
    ls.write_embedding_csv(latent, ldir / "embedding_latent.csv")
    ls.write_embedding_csv(original, ldir / "embedding_original.csv")
    _write_csv(table, ldir / "case_study.csv")
    write_manifest(out, cfg, "latent", {"query_seed": derive_seed(cfg.seed, "knn-queries"), "queries": queries,
                                        "k": cfg.knn_k})
    return table


# ---------------------------------------------------------------------------
# single-model train / evaluate


def run_train(cfg: Config, out: Path, covariates: str, model: str, target: str = "current") -> Path:
    if model == "equation":
        raise ConfigurationError("the equation baseline has no parameters to train")
    out = Path(out)
    _, fs = ensure_features(cfg, out)
    plan = make_split(fs, cfg)
    task = {"current": "current", "future": "future", "delta": "delta_regression"}[target]
    spec = TaskSpec(task, covariates, model)
    ids = plan.train_ids if target == "current" else split_longitudinal(plan.test_ids, cfg)[0]
    b = fit_model(spec, _matrix(fs, ids), _labels(fs, ids, target), cfg, metadata={"target": target})
    mdir = out / "models"
    mdir.mkdir(parents=True, exist_ok=True)
    path = mdir / f"{spec.slug}.json"
    digest = mb.save_bundle(b, path)
    write_manifest(out, cfg, f"train:{spec.slug}", {"bundle_sha256": digest})
    return path


def run_evaluate(cfg: Config, out: Path, bundle_path: Path) -> em.EvalReport:
    out = Path(out)
    _, fs = ensure_features(cfg, out)
    plan = make_split(fs, cfg)
    b = mb.load_bundle(bundle_path)
    target = b.metadata.get("target", "current")
    if b.kind == "dense_classifier":
        raise ConfigurationError("classifier bundles are evaluated by task2")
    ids = plan.test_ids if target == "current" else split_longitudinal(plan.test_ids, cfg)[1]
    y = _labels(fs, ids, target)
    p = mb.predict(b, _matrix(fs, ids))
    rep = _eval(y, p, cfg, int(b.metadata.get("n_train", 0)), f"evaluate:{Path(bundle_path).stem}",
                metrics=("r2", "pearson", "rmse", "mae", "std_mae", "mape"))
    edir = out / "eval"
    edir.mkdir(parents=True, exist_ok=True)
    (edir / f"{Path(bundle_path).stem}.json").write_text(rep.dumps() + "\n")
    write_manifest(out, cfg, f"evaluate:{Path(bundle_path).stem}", {"bundle_sha256": sha256_file(bundle_path)})
    return rep


# ---------------------------------------------------------------------------
# report tables and plot data


def _fmt_ci(e: dict) -> str:
    return f"{e['point']:.3f} [{e['lower']:.3f}, {e['upper']:.3f}]"


def run_report(cfg: Config, out: Path) -> dict[str, Path]:
    out = Path(out)
    rdir = out / "report"
    rdir.mkdir(parents=True, exist_ok=True)
    written = {}
    t1_path = out / "task1" / "report.json"
    if not t1_path.exists():
        raise DataError("no task1 results to report")
    t1 = json.loads(t1_path.read_text())
    rows = []
    for name in t1["row_order"]:
        rep = t1["rows"][name]
        cov, model = name.split(":")
        rows.append({"covariates": cov, "model": model, **{m: _fmt_ci(rep["metrics"][m]) for m in REPORT_METRICS}})
    written["table1"] = rdir / "table1.csv"
    pd.DataFrame(rows).to_csv(written["table1"], index=False, lineterminator="\n")

    sg = []
    for g, groups in t1["subgroups"].items():
        for gname, rep in groups.items():
            if rep is None:
                sg.append({"grouping": g, "group": gname, "n": 0})
                continue
            sg.append({"grouping": g, "group": gname, "n": rep["n_test"],
                       **{m: _fmt_ci(rep["metrics"][m]) for m in em.SUBGROUP_METRICS}})
    written["subgroups"] = rdir / "subgroups.csv"
    pd.DataFrame(sg).to_csv(written["subgroups"], index=False, lineterminator="\n")

    preds = pd.read_csv(out / "task1" / "predictions.csv", dtype={"id": str}, float_precision="round_trip")
    for name in preds.columns[2:]:
        cov, model = name.split(":")
        slug = f"{cov.replace('+', '_')}__{model}"
        _write_csv(pd.DataFrame({"id": preds["id"], "y_true": preds["y_true"], "y_pred": preds[name]}),
                   rdir / f"scatter_{slug}.csv")
        if cov == FULL_SET:
            ba = em.bland_altman(preds["y_true"].to_numpy(), preds[name].to_numpy())
            pts = pd.DataFrame(ba["points"], columns=["mean", "diff"])
            pts.insert(0, "id", preds["id"])
            _write_csv(pts, rdir / f"bland_altman_{slug}.csv")

    t2_path = out / "task2" / "report.json"
    if t2_path.exists():
        t2 = json.loads(t2_path.read_text())
        rows = []
        for task, rep in t2["rows"].items():
            row = {"task": task, **{m: _fmt_ci(rep["metrics"][m]) for m in rep["metrics"]}}
            row["n"] = t2["retained"].get(task, {}).get("n_retained", t2["n_test"])
            rows.append(row)
            if task in SCHEME_TASKS.values():
                p = pd.read_csv(out / "task2" / f"predictions_{task}.csv", dtype={"id": str},
                                float_precision="round_trip")
                fpr, tpr, thr = em.roc_curve(p["label"].to_numpy(), p["score"].to_numpy())
                _write_csv(pd.DataFrame({"fpr": fpr, "tpr": tpr, "threshold": thr}), rdir / f"roc_{task}.csv")
        written["table2"] = rdir / "table2.csv"
        pd.DataFrame(rows).to_csv(written["table2"], index=False, lineterminator="\n")

    t3_path = out / "task3" / "report.json"
    if t3_path.exists():
        t3 = json.loads(t3_path.read_text())
        keys = ["n", "n_excluded", "corr_pred_fii_vs_true_fii", "corr_pred_fii_vs_true_fi",
                "corr_pred_fi_vs_true_fi", "corr_delta", "corr_delta_pvalue", "task1_reproduced"]
        written["table3"] = rdir / "table3.csv"
        pd.DataFrame([{"quantity": k, "value": t3[k]} for k in keys]).to_csv(
            written["table3"], index=False, lineterminator="\n")
    write_manifest(out, cfg, "report", {"tables": sorted(written)})
    return written
