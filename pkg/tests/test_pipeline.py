from __future__ import annotations

import dataclasses
import json
from pathlib import Path

import numpy as np
import pandas as pd
import pytest
import yaml

from vo2fit import cli
from vo2fit import pipeline as pl
from vo2fit.errors import ConfigurationError, DataError

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

TINY = {
    "seed": 3,
    "population": {"profile": "desk", "n_train": 160, "n_longitudinal": 300},
    "train": {"max_epochs": 4, "patience": 2, "lr_patience": 1},
    "n_resamples": 30,
    "n_permutations": 30,
}


@pytest.fixture(scope="module")
def tiny_yaml(tmp_path_factory):
    path = tmp_path_factory.mktemp("cfg") / "tiny.yaml"
    path.write_text(yaml.safe_dump(TINY))
    return path


@pytest.fixture(scope="module")
def tiny_run(tiny_yaml, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    for cmd in ("generate", "featurize", "task1", "task2", "task3", "latent", "report"):
        assert cli.main([cmd, "--config", str(tiny_yaml), "--out", str(out)]) == 0, cmd
    return out


# ---------------------------------------------------------------- configuration


def test_desk_yaml_equals_defaults():
    assert pl.load_config(CONFIGS / "desk.yaml") == pl.Config()


def test_full_yaml_loads_published_sizes():
    cfg = pl.load_config(CONFIGS / "full.yaml")
    pop = cfg.population
    assert (pop.n_male, pop.n_female, pop.n_longitudinal_male, pop.n_longitudinal_female) == (5229, 5830, 1303, 1372)


@pytest.mark.parametrize("doc", [
    {"bogus": 1},
    {"train": {"lr": 0.1}},
    {"population": {"profile": "huge"}},
    {"task1_rows": [["anthro", "forest"]]},
    {"task1_rows": [["nothing", "linear"]]},
    {"n_resamples": 0},
])
def test_invalid_configs_raise(doc):
    with pytest.raises(ConfigurationError):
        pl.Config.from_dict(doc)


def test_load_config_errors(tmp_path):
    with pytest.raises(ConfigurationError):
        pl.load_config(tmp_path / "missing.yaml")
    (tmp_path / "list.yaml").write_text("- 1\n- 2\n")
    with pytest.raises(ConfigurationError):
        pl.load_config(tmp_path / "list.yaml")


def test_seed_override_and_digest():
    cfg = pl.Config()
    seeded = cfg.with_seed(7)
    assert seeded.seed == 7 and seeded.population.seed == 7
    assert seeded.digest() != cfg.digest() and cfg.with_seed(None) is cfg
    assert pl.Config.from_dict(cfg.to_dict() | {"population": {"profile": "desk"}}).digest() == cfg.digest()


def test_derive_seed_is_stable_and_separates_streams():
    assert pl.derive_seed(1, "a") == pl.derive_seed(1, "a")
    assert len({pl.derive_seed(1, "a"), pl.derive_seed(1, "b"), pl.derive_seed(2, "a")}) == 3


def test_task_spec_validation():
    assert pl.TaskSpec("current", "anthro+rhr", "linear").slug == "current__anthro_rhr__linear"
    with pytest.raises(ConfigurationError):
        pl.TaskSpec("future", "anthro+rhr", "equation")
    with pytest.raises(ConfigurationError):
        pl.TaskSpec("tomorrow", "anthro", "linear")


# ---------------------------------------------------------------- splits


def test_split_plan_invariants(small_features, small_config):
    study, fs = small_features
    plan = pl.make_split(fs, small_config)
    assert not set(plan.train_ids) & set(plan.test_ids)
    assert set(plan.train_ids) | set(plan.test_ids) == set(fs.fi)
    assert all(fs.fi[i].label_future is not None for i in plan.test_ids)
    with pytest.raises(DataError):
        pl.SplitPlan(("a", "b"), ("b",))
    with pytest.raises(DataError):
        pl.SplitPlan((), ("b",))


def test_longitudinal_split_is_seeded_and_disjoint(small_config):
    ids = [f"L{i:03d}" for i in range(50)]
    tr, te = pl.split_longitudinal(ids, small_config)
    assert len(te) == 10 and not set(tr) & set(te) and set(tr) | set(te) == set(ids)
    assert pl.split_longitudinal(list(reversed(ids)), small_config) == (tr, te)


def test_features_round_trip(tmp_path, small_features):
    _, fs = small_features
    pl.write_features(fs, tmp_path)
    back = pl.read_features(tmp_path)
    assert set(back.fi) == set(fs.fi) and set(back.fii) == set(fs.fii)
    pid = next(iter(fs.fi))
    assert np.array_equal(back.fi[pid].values, fs.fi[pid].values)


# ---------------------------------------------------------------- CLI


def test_missing_config_flag_exits_2(capsys):
    with pytest.raises(SystemExit) as exc:
        cli.main(["task1"])
    assert exc.value.code == 2
    assert "--config" in capsys.readouterr().err


def test_bad_config_exits_1(tmp_path, capsys):
    bad = tmp_path / "bad.yaml"
    bad.write_text("nonsense: 1\n")
    assert cli.main(["generate", "--config", str(bad), "--out", str(tmp_path / "o")]) == 1
    assert "error" in capsys.readouterr().err


def test_run_directory_layout(tiny_run):
    for rel in ("manifest.json", "features/layout.json", "features/features_fi.csv",
                "task1/predictions.csv", "task1/report.json", "task2/thresholds.json", "task2/report.json",
                "task3/report.json", "latent/embedding_latent.csv", "latent/case_study.csv",
                "report/table1.csv", "report/table2.csv", "report/table3.csv", "report/subgroups.csv"):
        assert (tiny_run / rel).exists(), rel
    manifest = json.loads((tiny_run / "manifest.json").read_text())
    assert {"format", "config", "config_digest", "seed", "layout_version", "stages", "artifacts"} <= set(manifest)
    for rel, digest in manifest["artifacts"].items():
        assert pl.sha256_file(tiny_run / rel) == digest


def test_table1_follows_configured_rows(tiny_run):
    t1 = pd.read_csv(tiny_run / "report" / "table1.csv")
    want = [f"{c}:{m}" for c, m in pl.DEFAULT_TASK1_ROWS]
    assert [f"{c}:{m}" for c, m in zip(t1["covariates"], t1["model"])] == want
    assert set(t1.columns) >= set(pl.REPORT_METRICS)


def test_task3_reproduces_task1(tiny_run):
    rep = json.loads((tiny_run / "task3" / "report.json").read_text())
    assert rep["task1_reproduced"] is True
    assert 0 <= rep["corr_delta_pvalue"] <= 1


def test_train_and_evaluate_subcommands(tiny_yaml, tiny_run):
    args = ["--config", str(tiny_yaml), "--out", str(tiny_run)]
    assert cli.main(["train", "--covariates", "anthro+rhr", "--model", "linear", *args]) == 0
    bundle = tiny_run / "models" / "current__anthro_rhr__linear.json"
    assert bundle.exists()
    assert cli.main(["evaluate", "--bundle", str(bundle), *args]) == 0
    rep = json.loads((tiny_run / "eval" / "current__anthro_rhr__linear.json").read_text())
    assert {"r2", "rmse", "mape"} <= set(rep["metrics"])


def test_preprocess_writes_sensor_csvs(tiny_yaml, tmp_path):
    out = tmp_path / "pp"
    assert cli.main(["preprocess", "--limit", "2", "--config", str(tiny_yaml), "--out", str(out)]) == 0
    assert len(list((out / "sensors").glob("*_raw.csv"))) == 2
    assert len(list((out / "sensors").glob("*_clean.csv"))) == 2


def test_identical_runs_give_identical_manifests(tiny_yaml, tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for out in (a, b):
        assert cli.main(["task1", "--seed", "7", "--config", str(tiny_yaml), "--out", str(out)]) == 0
    ma, mb_ = (json.loads((d / "manifest.json").read_text()) for d in (a, b))
    assert ma == mb_ and ma["seed"] == 7


def test_different_seed_changes_results(tiny_yaml, tiny_run, tmp_path):
    out = tmp_path / "s"
    assert cli.main(["task1", "--seed", "8", "--config", str(tiny_yaml), "--out", str(out)]) == 0
    a = (tiny_run / "task1" / "predictions.csv").read_text()
    assert (out / "task1" / "predictions.csv").read_text() != a


def test_report_without_results_fails(tiny_yaml, tmp_path):
    assert cli.main(["report", "--config", str(tiny_yaml), "--out", str(tmp_path / "empty")]) == 1


def test_config_change_invalidates_cached_stages(tiny_yaml, tmp_path):
    out = tmp_path / "c"
    assert cli.main(["generate", "--config", str(tiny_yaml), "--out", str(out)]) == 0
    first = json.loads((out / "manifest.json").read_text())["config_digest"]
    assert cli.main(["generate", "--seed", "99", "--config", str(tiny_yaml), "--out", str(out)]) == 0
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["config_digest"] != first and manifest["seed"] == 99
