"""Per-cluster model specialization with an exact runtime fallback.

Rows are clustered (Lloyd's k-means over standardized numeric inputs,
seeded k-means++ init).  For each cluster we detect input columns that are
*exactly* constant across its sample members and compile a specialized
pipeline under those constants.  At inference time a row is served by its
nearest cluster's model only if it matches all of that cluster's constants,
otherwise by the original model — so dispatch output equals the original
model's output on every row by construction.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .analysis import Constant
from .errors import ExecutionError, PipelineFormatError
from .ir import ColType
from .models import ColumnView, ModelPipeline
from .pipeline_json import load_pipeline, serialize_pipeline
from .rules import fold_constant_inputs


@dataclass(frozen=True)
class ClusterSpec:
    constants: tuple[tuple[str, object], ...]  # column -> python value
    pipeline: ModelPipeline


@dataclass(frozen=True)
class ClusterDispatch:
    numeric_features: tuple[str, ...]
    means: np.ndarray  # (d,) standardization of the numeric features
    stds: np.ndarray
    centroids: np.ndarray  # (k, d), standardized space
    clusters: tuple[ClusterSpec, ...]
    fallback: ModelPipeline

    def input_columns(self):
        return self.fallback.input_columns()

    def output_arity(self) -> int:
        return self.fallback.output_arity()

    def used_features(self) -> set[str]:
        # Routing needs every numeric feature and every constant column, all
        # of which are fallback inputs; never narrow below them.
        return {name for name, _ in self.fallback.input_columns()}

    def feature_counts(self) -> list[int]:
        return [len(c.pipeline.model_features()) for c in self.clusters]


# ---------------------------------------------------------------------------
# k-means (Lloyd's algorithm, k-means++ init)
# ---------------------------------------------------------------------------


def kmeans(X: np.ndarray, k: int, seed: int, max_iter: int = 100,
           tol: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Returns (centroids (k, d), assignment (n,)). Deterministic for a seed.

    Empty clusters are reseeded to the point farthest from its current
    centroid (lowest index on ties).  Iteration stops after `max_iter`
    rounds or when the largest relative centroid shift drops below `tol`.
    """
    n = X.shape[0]
    if k > n:
        raise ExecutionError(f"k={k} exceeds the {n} available sample rows")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, X.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = X[first]
    d2 = ((X - centroids[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # All remaining points coincide with a centroid; any distinct
            # pick is as good as another — walk the data deterministically.
            idx = int(np.argmax(d2))
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = X[idx]
        d2 = np.minimum(d2, ((X - centroids[j]) ** 2).sum(axis=1))

    assignment = np.zeros(n, dtype=np.int64)
    for _ in range(max_iter):
        dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
        assignment = np.argmin(dists, axis=1)
        new_centroids = centroids.copy()
        for j in range(k):
            members = assignment == j
            if members.any():
                new_centroids[j] = X[members].mean(axis=0)
            else:
                # Reseed deterministically: the point farthest from its centroid.
                far = int(np.argmax(dists[np.arange(n), assignment]))
                new_centroids[j] = X[far]
        shift = np.linalg.norm(new_centroids - centroids, axis=1)
        scale = np.linalg.norm(centroids, axis=1) + 1e-12
        centroids = new_centroids
        if (shift / scale).max() < tol:
            break
    dists = ((X[:, None, :] - centroids[None, :, :]) ** 2).sum(axis=2)
    assignment = np.argmin(dists, axis=1)
    return centroids, assignment


# ---------------------------------------------------------------------------
# Compilation
# ---------------------------------------------------------------------------


def _sample_views(table, names: list[str]) -> dict[str, ColumnView]:
    return {name: table.column_view(name) for name in names}


def cluster_compile(sample, pipeline: ModelPipeline, k: int, seed: int) -> ClusterDispatch:
    """Compile a ClusterDispatch from a sample table.

    `sample` is an executor Table containing every pipeline input column.
    Rows with NULL in any input column are ignored while clustering.
    """
    inputs = pipeline.input_columns()
    missing = [n for n, _ in inputs if n not in sample.columns]
    if missing:
        raise ExecutionError(f"sample table lacks input column(s): {missing}")
    numeric = [n for n, t in inputs if t != ColType.CATEGORICAL]
    if not numeric:
        raise ExecutionError("clustering requires at least one numeric input")

    views = _sample_views(sample, [n for n, _ in inputs])
    valid = np.ones(sample.row_count, bool)
    for v in views.values():
        if v.validity is not None:
            valid &= v.validity
    if not valid.any():
        raise ExecutionError("sample has no complete rows to cluster")

    X = np.column_stack([views[n].values[valid] for n in numeric])
    if len(np.unique(X, axis=0)) < k:
        raise ExecutionError(
            f"k={k} exceeds the {len(np.unique(X, axis=0))} distinct sample rows"
        )
    means = X.mean(axis=0)
    stds = X.std(axis=0)
    stds[stds == 0.0] = 1.0
    Xs = (X - means) / stds
    centroids, assignment = kmeans(Xs, k, seed)

    clusters = []
    for j in range(k):
        members = assignment == j
        constants: list[tuple[str, object]] = []
        for name, ctype in inputs:
            view = views[name]
            if ctype == ColType.CATEGORICAL:
                codes = view.codes[valid][members]
                if len(codes) and (codes == codes[0]).all() and codes[0] >= 0:
                    constants.append((name, view.categories[int(codes[0])]))
            else:
                vals = view.values[valid][members]
                if len(vals) and (vals == vals[0]).all():
                    constants.append((name, float(vals[0])))
        domains = {name: Constant(value) for name, value in constants}
        specialized = fold_constant_inputs(pipeline, domains) if domains else pipeline
        clusters.append(ClusterSpec(tuple(constants), specialized))

    return ClusterDispatch(tuple(numeric), means, stds, centroids,
                           tuple(clusters), pipeline)


def route_rows(dispatch: ClusterDispatch, views: dict[str, ColumnView]) -> np.ndarray:
    """Cluster index per row, or -1 for the fallback path.

    A row is served by its nearest centroid's model iff it matches every
    constant recorded for that cluster.
    """
    n = len(next(iter(views.values())))
    X = np.column_stack([views[name].values for name in dispatch.numeric_features])
    Xs = (X - dispatch.means) / dispatch.stds
    dists = ((Xs[:, None, :] - dispatch.centroids[None, :, :]) ** 2).sum(axis=2)
    nearest = np.argmin(dists, axis=1).astype(np.int64)
    out = np.full(n, -1, dtype=np.int64)
    for j, cluster in enumerate(dispatch.clusters):
        mask = nearest == j
        if not mask.any():
            continue
        ok = mask.copy()
        for name, value in cluster.constants:
            view = views[name]
            if view.codes is not None:
                cats = view.categories or []
                code = cats.index(value) if value in cats else -2
                ok &= view.codes == code
            else:
                ok &= view.values == float(value)
            if view.validity is not None:
                ok &= view.validity
        out[ok] = j
    return out


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def serialize_cluster_dispatch(d: ClusterDispatch) -> dict:
    return {
        "format_version": 1,
        "kind": "cluster_dispatch",
        "numeric_features": list(d.numeric_features),
        "means": d.means.tolist(),
        "stds": d.stds.tolist(),
        "centroids": d.centroids.tolist(),
        "clusters": [
            {
                "constants": {name: value for name, value in c.constants},
                "pipeline": serialize_pipeline(c.pipeline),
            }
            for c in d.clusters
        ],
        "fallback": serialize_pipeline(d.fallback),
    }


def load_cluster_dispatch(doc: dict) -> ClusterDispatch:
    try:
        clusters = tuple(
            ClusterSpec(
                tuple((name, value) for name, value in c["constants"].items()),
                load_pipeline(c["pipeline"]),
            )
            for c in doc["clusters"]
        )
        return ClusterDispatch(
            tuple(doc["numeric_features"]),
            np.asarray(doc["means"], dtype=np.float64),
            np.asarray(doc["stds"], dtype=np.float64),
            np.asarray(doc["centroids"], dtype=np.float64),
            clusters,
            load_pipeline(doc["fallback"]),
        )
    except KeyError as exc:
        raise PipelineFormatError(f"cluster_dispatch: missing key {exc}") from exc


def compile_report(dispatch: ClusterDispatch, elapsed_s: float) -> dict:
    original = len(dispatch.fallback.model_features())
    return {
        "k": len(dispatch.clusters),
        "compile_time_s": round(elapsed_s, 6),
        "original_features": original,
        "clusters": [
            {
                "constants": {name: value for name, value in c.constants},
                "features": len(c.pipeline.model_features()),
            }
            for c in dispatch.clusters
        ],
    }


def timed_cluster_compile(sample, pipeline: ModelPipeline, k: int,
                          seed: int) -> tuple[ClusterDispatch, dict]:
    t0 = time.perf_counter()
    dispatch = cluster_compile(sample, pipeline, k, seed)
    return dispatch, compile_report(dispatch, time.perf_counter() - t0)
