"""Penultimate-layer embeddings and nearest-neighbour subtyping.

Distances in the latent space use the raw (unnormalised) activations; the
original space is the transform-projected feature matrix.  Neighbour ties are
broken by ascending participant id.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import pandas as pd

from vo2fit.errors import DataError, UnsupportedModelError
from vo2fit.models.bundle import ModelBundle
from vo2fit.models.dense import hidden_activations

log = logging.getLogger(__name__)

SPACES = ("original", "latent")


@dataclass(frozen=True)
class Embedding:
    ids: tuple
    matrix: np.ndarray
    space: str

    def __post_init__(self):
        m = np.asarray(self.matrix, float)
        object.__setattr__(self, "matrix", m)
        object.__setattr__(self, "ids", tuple(self.ids))
        if self.space not in SPACES:
            raise DataError(f"space must be one of {SPACES}")
        if m.ndim != 2 or m.shape[0] != len(self.ids):
            raise DataError(f"{m.shape[0] if m.ndim else 0} rows for {len(self.ids)} ids")
        if len(set(self.ids)) != len(self.ids):
            raise DataError("embedding ids must be unique")
        if not np.all(np.isfinite(m)):
            raise DataError("embedding contains non-finite values")

    def row(self, pid: str) -> np.ndarray:
        try:
            return self.matrix[self.ids.index(pid)]
        except ValueError:
            raise DataError(f"unknown participant id {pid}") from None


def extract_latent(bundle: ModelBundle, ids: Sequence[str], features, layout_version: str | None = None,
                   allow_classifier: bool = False) -> Embedding:
    """Inference-mode activations of the last hidden layer.

    Classifier bundles have a single 128-wide hidden layer; they are refused
    unless ``allow_classifier`` is set.
    """
    if bundle.kind == "linear":
        raise UnsupportedModelError("linear bundles have no hidden layers")
    if bundle.kind == "dense_classifier" and not allow_classifier:
        raise UnsupportedModelError("latent extraction expects a regressor bundle")
    F = np.atleast_2d(np.asarray(features, float))
    # row by row keeps each embedding bit-identical whatever the batch composition
    act = np.vstack([hidden_activations(bundle.params, bundle.state, bundle.network,
                                        bundle.project(f[None, :], layout_version))
                     for f in F]) if len(F) else np.zeros((0, bundle.network.hidden[-1]))
    return Embedding(ids=tuple(ids), matrix=act, space="latent")


def original_embedding(bundle: ModelBundle, ids: Sequence[str], features,
                       layout_version: str | None = None) -> Embedding:
    return Embedding(ids=tuple(ids), matrix=bundle.project(features, layout_version), space="original")


@dataclass(frozen=True)
class Neighbours:
    query: str
    ids: tuple
    distances: tuple
    total: float


def knn_query(e: Embedding, query_id: str, k: int = 5) -> Neighbours:
    n = len(e.ids)
    if not 1 <= k < n:
        raise DataError(f"k must be in [1, {n - 1}], got {k}")
    q = e.row(query_id)
    d = np.sqrt(np.sum((e.matrix - q) ** 2, axis=1))
    qi = e.ids.index(query_id)
    order = sorted((float(d[i]), e.ids[i]) for i in range(n) if i != qi)[:k]
    return Neighbours(query=query_id, ids=tuple(i for _, i in order),
                      distances=tuple(x for x, _ in order), total=float(sum(x for x, _ in order)))


CASE_COLUMNS = ("query", "space", "rank", "neighbour", "distance", "total_distance",
                "age", "sex", "bmi", "rhr", "vo2max")


def subtype_case_study(original: Embedding, latent: Embedding, query_ids: Sequence[str], k: int = 5,
                       covariates: Mapping[str, Mapping[str, float]] | None = None) -> pd.DataFrame:
    """Neighbour table in both spaces; rank 0 rows describe the query itself."""
    if set(original.ids) != set(latent.ids):
        raise DataError("original and latent embeddings cover different participants")
    covariates = covariates or {}
    rows = []
    for q in query_ids:
        for emb in (original, latent):
            nb = knn_query(emb, q, k)
            members = [(q, 0.0)] + list(zip(nb.ids, nb.distances))
            for rank, (pid, dist) in enumerate(members):
                cov = covariates.get(pid, {})
                rows.append({"query": q, "space": emb.space, "rank": rank, "neighbour": pid,
                             "distance": dist, "total_distance": nb.total,
                             **{c: cov.get(c, np.nan) for c in CASE_COLUMNS[6:]}})
    return pd.DataFrame(rows, columns=list(CASE_COLUMNS))


def write_embedding_csv(e: Embedding, path: Path) -> None:
    cols = [f"a{i:03d}" for i in range(e.matrix.shape[1])]
    df = pd.DataFrame(e.matrix, columns=cols)
    df.insert(0, "id", list(e.ids))
    df.to_csv(path, index=False, lineterminator="\n", float_format="%.17g")


def read_embedding_csv(path: Path, space: str = "latent") -> Embedding:
    df = pd.read_csv(path, dtype={"id": str}, float_precision="round_trip")
    return Embedding(ids=tuple(df["id"]), matrix=df.drop(columns="id").to_numpy(float), space=space)
