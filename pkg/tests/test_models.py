from __future__ import annotations

import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from fd_oracle import max_relative_error, random_case
from vo2fit import transform as tf
from vo2fit.errors import ConfigurationError, DataError, LayoutMismatchError, TrainingError
from vo2fit.evalmetrics import auroc
from vo2fit.models import bundle as mb
from vo2fit.models import dense
from vo2fit.models.dense import CLASSIFIER, REGRESSOR, NetworkConfig, TrainConfig
from vo2fit.models.equation import equation_baseline, equation_estimate, tanaka_hrmax
from vo2fit.models.linear import RankDeficientWarning, fit_linear


# ---------------------------------------------------------------- linear


def test_linear_exact_fit():
    x = np.linspace(-3, 3, 50)
    lp = fit_linear(x, 2 * x + 1)
    assert lp.coef[0] == pytest.approx(2.0, abs=1e-9)
    assert lp.intercept == pytest.approx(1.0, abs=1e-9)


def test_linear_on_noise_has_near_zero_r2():
    rng = np.random.default_rng(0)
    X, y = rng.normal(size=(10000, 3)), rng.normal(size=10000)
    pred = fit_linear(X, y).predict(X)
    r2 = 1 - np.sum((y - pred) ** 2) / np.sum((y - y.mean()) ** 2)
    assert abs(r2) < 0.05


def test_linear_duplicate_columns_warns_and_stays_finite():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(40, 1))
    with pytest.warns(RankDeficientWarning):
        lp = fit_linear(np.hstack([x, x]), 3 * x[:, 0])
    assert np.all(np.isfinite(lp.coef))
    assert np.allclose(lp.predict(np.hstack([x, x])), 3 * x[:, 0])


# ---------------------------------------------------------------- equation


def test_equation_examples():
    assert equation_estimate(40, 60) == 45.0
    assert tanaka_hrmax(0) == 208.0
    assert equation_estimate(30, tanaka_hrmax(30)) == 15.0
    with pytest.raises(DataError):
        equation_estimate(40, 0)


@given(st.floats(18, 90), st.floats(30, 120), st.floats(0.1, 20))
def test_equation_strictly_decreasing(age, rhr, step):
    assert equation_estimate(age, rhr + step) < equation_estimate(age, rhr)
    assert equation_estimate(age + step, rhr) < equation_estimate(age, rhr)


def test_equation_baseline_on_participant():
    class P:
        id, age, rhr = "x", 40.0, 60.0

    assert equation_baseline(P) == 45.0


# ---------------------------------------------------------------- dense network


@pytest.mark.parametrize("net", [REGRESSOR, CLASSIFIER], ids=["regressor", "classifier"])
@pytest.mark.parametrize("seed", [0, 1])
def test_gradients_match_finite_differences(net, seed):
    params, X, y, masks = random_case(net, seed)
    _, grads = dense.loss_and_gradients(params, net, X, y, masks)
    assert set(grads) == set(params)
    assert max_relative_error(params, grads, net, X, y, masks) < 1e-4


def test_output_bias_gradient_hand_derivation():
    net = NetworkConfig(hidden=(3,), dropout=0.0)
    params, _ = dense.init_params(2, net, np.random.default_rng(0))
    params["W_out"][:] = 0.0
    params["b_out"][:] = 0.5
    X = np.array([[1.0, 2.0], [3.0, -1.0]])
    y = np.array([1.0, 4.0])
    _, g = dense.loss_and_gradients(params, net, X, y)
    assert g["b_out"][0] == pytest.approx(np.mean(2 * (0.5 - y)))


def test_classifier_at_half_probability_gives_ln2():
    params, _ = dense.init_params(4, CLASSIFIER, np.random.default_rng(0))
    params["W_out"][:] = 0.0
    loss, _ = dense.loss_and_gradients(params, CLASSIFIER, np.ones((4, 4)), np.array([0, 1, 0, 1.0]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def toy_regression(n=400, d=5, seed=0):
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(n, d))
    return X, X @ rng.normal(size=d) + 3.0


def test_dense_converges_on_learnable_task():
    X, y = toy_regression()
    net = NetworkConfig(hidden=(16, 16), dropout=0.0)
    res = dense.fit_network(X, y, net, TrainConfig(learning_rate=1e-2, max_epochs=300, seed=0))
    va = res.validation_ids
    pred = dense.predict_network(res.params, res.state, net, X[va])
    assert math.sqrt(np.mean((pred - y[va]) ** 2)) < 0.1 * y.std()


def test_training_is_deterministic_and_restores_best_epoch():
    X, y = toy_regression(200)
    net = NetworkConfig(hidden=(8, 8))
    cfg = TrainConfig(max_epochs=40, patience=5, seed=3)
    a, b = dense.fit_network(X, y, net, cfg), dense.fit_network(X, y, net, cfg)
    assert a.history == b.history
    assert all(np.array_equal(a.params[k], b.params[k]) for k in a.params)
    vals = [h["val_loss"] for h in a.history]
    assert vals[a.best_epoch - 1] == min(vals)
    _, cache = dense.forward(a.params, a.state, net, X[a.validation_ids])
    assert dense.loss_value(net, cache["logits"], y[a.validation_ids]) == min(vals)


def test_learning_rate_decays_on_plateau():
    X, y = toy_regression(100)
    res = dense.fit_network(X, y, NetworkConfig(hidden=(4,)),
                            TrainConfig(learning_rate=0.5, max_epochs=60, patience=60, seed=0))
    lrs = sorted({h["lr"] for h in res.history}, reverse=True)
    assert lrs[0] == 0.5 and len(lrs) > 1
    assert all(math.isclose(b / a, 0.1) for a, b in zip(lrs, lrs[1:]))


def test_classifier_on_separable_data_reaches_auc_one():
    rng = np.random.default_rng(4)
    X = rng.normal(size=(400, 3))
    y = (X[:, 0] + X[:, 1] > 0).astype(float)
    res = dense.fit_network(X[:300], y[:300], CLASSIFIER, TrainConfig(max_epochs=60, seed=1))
    p = dense.predict_network(res.params, res.state, CLASSIFIER, X[300:])
    assert np.all((p > 0) & (p < 1))
    assert auroc(y[300:], p) == 1.0


def test_training_errors():
    X, y = toy_regression(20)
    with pytest.raises(ConfigurationError):
        dense.fit_network(X[:3], y[:3], REGRESSOR, TrainConfig(validation_fraction=0.1))
    with pytest.raises(TrainingError):
        dense.fit_network(X, y, CLASSIFIER, TrainConfig(max_epochs=2))
    with pytest.raises(TrainingError), np.errstate(all="ignore"):
        dense.fit_network(X, y * 1e300, NetworkConfig(hidden=(4,), batch_norm=False),
                          TrainConfig(max_epochs=5, learning_rate=10.0))
    with pytest.raises(ConfigurationError):
        TrainConfig(batch_size=0)


def test_dropout_expectation_on_linear_network():
    net = NetworkConfig(hidden=(6, 5), activation="linear", batch_norm=False, dropout=0.3)
    rng = np.random.default_rng(0)
    params, state = dense.init_params(4, net, rng)
    X = rng.normal(size=(3, 4))
    infer, _ = dense.forward(params, state, net, X, training=False)
    # exact expectation: enumerate masks is infeasible, so average many draws
    draws = np.mean([dense.forward(params, state, net, X, training=True,
                                   masks=dense.dropout_masks(net, 3, rng))[0] for _ in range(40000)], axis=0)
    assert np.allclose(draws, infer, atol=0.02 * np.abs(infer).max() + 0.01)


def test_inference_ignores_dropout_and_is_row_independent():
    X, y = toy_regression(120)
    res = dense.fit_network(X, y, REGRESSOR, TrainConfig(max_epochs=5, seed=0))
    a = dense.predict_network(res.params, res.state, REGRESSOR, X)
    assert np.array_equal(a, dense.predict_network(res.params, res.state, REGRESSOR, X))
    perm = np.random.default_rng(0).permutation(len(X))
    assert np.allclose(dense.predict_network(res.params, res.state, REGRESSOR, X[perm]), a[perm], rtol=0, atol=1e-12)


def test_batchnorm_running_statistics_track_training_activations():
    X, y = toy_regression(2000)
    net = NetworkConfig(hidden=(16,), dropout=0.0)
    res = dense.fit_network(X, y, net, TrainConfig(max_epochs=30, patience=30, learning_rate=1e-3, seed=0))
    act = dense.hidden_activations(res.params, res.state, net, X, layer=0)
    spread = act.std(axis=0)
    assert np.all(np.abs(act.mean(axis=0) - res.state["mean0"]) < 0.25 * spread + 0.05)


# ---------------------------------------------------------------- bundles


@pytest.fixture(scope="module")
def fitted():
    rng = np.random.default_rng(7)
    raw = rng.normal(size=(300, 12))
    y = raw[:, 0] * 2 + raw[:, 1] + 40
    t = tf.fit(raw[:, :10], "fl-test", [f"c{i}" for i in range(10)])
    proj = tf.apply(t, raw[:, :10])
    cols, idx = [f"c{i}" for i in range(10)], list(range(10))
    reg = mb.train_dense(proj, y, TrainConfig(max_epochs=5, seed=1), "regressor", t, cols, idx)
    clf = mb.train_dense(proj, (y > 40).astype(float), TrainConfig(max_epochs=5, seed=1), "classifier",
                         t, cols, idx)
    lin = mb.train_linear(proj, y, t, cols, idx)
    return raw, {"regressor": reg, "classifier": clf, "linear": lin}


@pytest.mark.parametrize("kind", ["regressor", "classifier", "linear"])
def test_bundle_round_trip_is_bit_identical(tmp_path, fitted, kind):
    raw, bundles = fitted
    b = bundles[kind]
    digest = mb.save_bundle(b, tmp_path / "b.json")
    back = mb.load_bundle(tmp_path / "b.json")
    assert np.array_equal(mb.predict(back, raw), mb.predict(b, raw))
    assert mb.save_bundle(back, tmp_path / "c.json") == digest


def test_bundle_document_fields(fitted):
    doc = fitted[1]["regressor"].to_dict()
    assert set(doc) == {"format", "format_version", "kind", "layout_version", "feature_columns",
                        "feature_indices", "transform", "network", "parameters", "state", "metadata"}
    assert doc["metadata"]["history"] and "best_epoch" in doc["metadata"]


def test_bundle_layout_mismatch(fitted):
    raw, bundles = fitted
    with pytest.raises(LayoutMismatchError):
        mb.predict(bundles["linear"], raw, layout_version="fl-other")
    with pytest.raises(LayoutMismatchError):
        mb.predict(bundles["linear"], raw[:, :5])


def test_classifier_outputs_strictly_inside_unit_interval(fitted):
    raw, bundles = fitted
    p = mb.predict(bundles["classifier"], raw * 1e4)
    assert np.all((p > 0) & (p < 1))


def test_unknown_kind_rejected():
    with pytest.raises(ConfigurationError):
        mb.train_dense(np.zeros((10, 2)), np.zeros(10), TrainConfig(), "ranker", None, [], [])
    with pytest.raises(ConfigurationError):
        dataclasses.replace(REGRESSOR, output="softmax")
