"""Train-only standardisation followed by PCA truncated at 99.99% variance."""
from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field

import numpy as np

from vo2fit.errors import FitError, LayoutMismatchError

log = logging.getLogger(__name__)

VARIANCE_KEPT = 0.9999


@dataclass(frozen=True)
class FittedTransform:
    """Scaler statistics plus a PCA basis.

    ``components`` is (k, d) with orthonormal rows; ``explained_variance`` are
    the matching eigenvalues of the population covariance of the scaled
    training data, so projecting the training set reproduces them exactly.
    """

    mean: np.ndarray
    scale: np.ndarray
    components: np.ndarray
    explained_variance: np.ndarray
    explained_variance_ratio: np.ndarray
    layout_version: str
    feature_names: tuple = ()
    constant_features: tuple = ()

    @property
    def k(self) -> int:
        return self.components.shape[0]

    @property
    def n_features(self) -> int:
        return self.components.shape[1]

    def to_dict(self) -> dict:
        return {
            "layout_version": self.layout_version,
            "feature_names": list(self.feature_names),
            "constant_features": list(self.constant_features),
            "mean": self.mean.tolist(),
            "scale": self.scale.tolist(),
            "components": self.components.tolist(),
            "explained_variance": self.explained_variance.tolist(),
            "explained_variance_ratio": self.explained_variance_ratio.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "FittedTransform":
        return cls(
            mean=np.array(d["mean"], float),
            scale=np.array(d["scale"], float),
            components=np.array(d["components"], float).reshape(-1, len(d["mean"])),
            explained_variance=np.array(d["explained_variance"], float),
            explained_variance_ratio=np.array(d["explained_variance_ratio"], float),
            layout_version=d["layout_version"],
            feature_names=tuple(d.get("feature_names", ())),
            constant_features=tuple(d.get("constant_features", ())),
        )

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()


def fit(X, layout_version: str, feature_names=(), variance_kept: float = VARIANCE_KEPT) -> FittedTransform:
    X = np.asarray(X, float)
    if X.ndim != 2 or X.shape[0] < 2:
        raise FitError(f"need at least 2 training rows, got shape {X.shape}")
    if not np.all(np.isfinite(X)):
        raise FitError("training data contains non-finite values")
    mean = X.mean(axis=0)
    scale = X.std(axis=0)
    constant = np.flatnonzero(scale == 0)
    if len(constant):
        names = [feature_names[i] if len(feature_names) else str(i) for i in constant]
        log.warning("constant features given unit scale: %s", ", ".join(names))
        scale = np.where(scale == 0, 1.0, scale)
    Z = (X - mean) / scale
    cov = Z.T @ Z / Z.shape[0]
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    # sign convention: largest-magnitude loading of each component is positive
    pivot = np.argmax(np.abs(evecs), axis=0)
    evecs = evecs * np.sign(evecs[pivot, np.arange(evecs.shape[1])])
    total = evals.sum()
    if total <= 0:
        raise FitError("training data has zero variance")
    ratio = evals / total
    k = int(np.searchsorted(np.cumsum(ratio), variance_kept - 1e-12) + 1)
    k = min(k, len(evals))
    return FittedTransform(
        mean=mean, scale=scale, components=evecs[:, :k].T.copy(),
        explained_variance=evals[:k], explained_variance_ratio=ratio[:k],
        layout_version=layout_version, feature_names=tuple(feature_names),
        constant_features=tuple(int(i) for i in constant),
    )


def apply(t: FittedTransform, X, layout_version: str | None = None) -> np.ndarray:
    """Project rows of ``X`` onto the fitted basis."""
    if layout_version is not None and layout_version != t.layout_version:
        raise LayoutMismatchError(f"data layout {layout_version} != transform layout {t.layout_version}")
    X = np.asarray(X, float)
    if X.ndim == 1:
        X = X[None, :]
    if X.shape[1] != t.n_features:
        raise LayoutMismatchError(f"expected {t.n_features} features, got {X.shape[1]}")
    return ((X - t.mean) / t.scale) @ t.components.T


def inverse(t: FittedTransform, Y) -> np.ndarray:
    """Map projected rows back to the original feature space."""
    return (np.asarray(Y, float) @ t.components) * t.scale + t.mean
