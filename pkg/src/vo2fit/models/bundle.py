"""Trained model + its feature transform, with a JSON file format.

Bundle document (all keys always present)::

    format            "vo2fit.model_bundle"
    format_version    1
    kind              "linear" | "dense_regressor" | "dense_classifier"
    layout_version    feature layout the bundle expects
    feature_columns   names of the layout columns fed to the transform
    feature_indices   their positions in the layout
    transform         FittedTransform fields (mean, scale, components, ...)
    network           NetworkConfig fields, or null for linear models
    parameters        {name: {"shape": [...], "data": [...]}}
    state             batch-norm running statistics, same encoding
    metadata          task, target, seed, train config, history, best_epoch

Floats are written with ``repr`` precision so a reload predicts bit-identically.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from vo2fit import transform as tf
from vo2fit.errors import ConfigurationError, LayoutMismatchError
from vo2fit.models import dense
from vo2fit.models.dense import NetworkConfig, TrainConfig
from vo2fit.models.linear import LinearParams, fit_linear

FORMAT = "vo2fit.model_bundle"
FORMAT_VERSION = 1
KINDS = ("linear", "dense_regressor", "dense_classifier")


@dataclass
class ModelBundle:
    kind: str
    layout_version: str
    feature_columns: tuple
    feature_indices: tuple
    transform: tf.FittedTransform
    params: dict
    state: dict = field(default_factory=dict)
    network: NetworkConfig | None = None
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown model kind {self.kind}")

    def select(self, raw, layout_version: str | None = None) -> np.ndarray:
        if layout_version is not None and layout_version != self.layout_version:
            raise LayoutMismatchError(f"features use layout {layout_version}, bundle expects {self.layout_version}")
        raw = np.asarray(raw, float)
        if raw.ndim == 1:
            raw = raw[None, :]
        if raw.shape[1] <= max(self.feature_indices):
            raise LayoutMismatchError(f"feature rows have {raw.shape[1]} columns")
        return raw[:, list(self.feature_indices)]

    def project(self, raw, layout_version: str | None = None) -> np.ndarray:
        return tf.apply(self.transform, self.select(raw, layout_version))

    def to_dict(self) -> dict:
        def enc(d):
            return {k: {"shape": list(v.shape), "data": np.asarray(v, float).ravel().tolist()}
                    for k, v in sorted(d.items())}

        return {
            "format": FORMAT,
            "format_version": FORMAT_VERSION,
            "kind": self.kind,
            "layout_version": self.layout_version,
            "feature_columns": list(self.feature_columns),
            "feature_indices": list(self.feature_indices),
            "transform": self.transform.to_dict(),
            "network": self.network.to_dict() if self.network else None,
            "parameters": enc(self.params),
            "state": enc(self.state),
            "metadata": self.metadata,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ModelBundle":
        if d.get("format") != FORMAT or d.get("format_version") != FORMAT_VERSION:
            raise ConfigurationError("not a model bundle document")

        def dec(e):
            return {k: np.array(v["data"], float).reshape(v["shape"]) for k, v in e.items()}

        return cls(
            kind=d["kind"], layout_version=d["layout_version"],
            feature_columns=tuple(d["feature_columns"]), feature_indices=tuple(d["feature_indices"]),
            transform=tf.FittedTransform.from_dict(d["transform"]),
            params=dec(d["parameters"]), state=dec(d["state"]),
            network=NetworkConfig.from_dict(d["network"]) if d["network"] else None,
            metadata=d["metadata"],
        )

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(self.dumps().encode()).hexdigest()


def save_bundle(bundle: ModelBundle, path: Path) -> str:
    """Write the bundle; returns the sha256 of the file contents."""
    text = bundle.dumps()
    Path(path).write_text(text)
    return hashlib.sha256(text.encode()).hexdigest()


def load_bundle(path: Path) -> ModelBundle:
    return ModelBundle.from_dict(json.loads(Path(path).read_text()))


def train_linear(X_proj, y, transform: tf.FittedTransform, columns: Sequence[str],
                 indices: Sequence[int], metadata: dict | None = None) -> ModelBundle:
    lp = fit_linear(X_proj, y)
    return ModelBundle(
        kind="linear", layout_version=transform.layout_version, feature_columns=tuple(columns),
        feature_indices=tuple(int(i) for i in indices), transform=transform,
        params={"coef": lp.coef, "intercept": np.array([lp.intercept])}, metadata=dict(metadata or {}),
    )


def train_dense(X_proj, y, cfg: TrainConfig, kind: str, transform: tf.FittedTransform,
                columns: Sequence[str], indices: Sequence[int], network: NetworkConfig | None = None,
                metadata: dict | None = None) -> ModelBundle:
    """Train a dense regressor or classifier on already-projected features."""
    if kind not in ("regressor", "classifier"):
        raise ConfigurationError(f"kind must be regressor or classifier, got {kind}")
    net = network or (dense.REGRESSOR if kind == "regressor" else dense.CLASSIFIER)
    res = dense.fit_network(X_proj, y, net, cfg)
    meta = dict(metadata or {})
    meta.update(train_config=cfg.to_dict(), history=res.history, best_epoch=res.best_epoch,
                n_train=int(len(y)))
    return ModelBundle(
        kind=f"dense_{kind}", layout_version=transform.layout_version, feature_columns=tuple(columns),
        feature_indices=tuple(int(i) for i in indices), transform=transform,
        params=res.params, state=res.state, network=net, metadata=meta,
    )


def predict_projected(bundle: ModelBundle, X_proj) -> np.ndarray:
    if bundle.kind == "linear":
        return LinearParams(bundle.params["coef"], float(bundle.params["intercept"][0])).predict(X_proj)
    return dense.predict_network(bundle.params, bundle.state, bundle.network, X_proj)


def predict(bundle: ModelBundle, raw_features, layout_version: str | None = None) -> np.ndarray:
    """Transform raw layout-ordered feature rows and run the model in inference mode."""
    return predict_projected(bundle, bundle.project(raw_features, layout_version))
