"""Model payloads, featurizers, pipelines and their direct evaluation.

Direct evaluation is the reference path: trees route rows through a packed
node table, linear models use an explicit deterministic dot product.  All
kernels are batch-invariant — evaluating N rows at once produces bit-identical
values to N single-row calls — which the executor relies on for its
determinism guarantee.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Union

import numpy as np

from .errors import ExecutionError, PipelineFormatError
from .ir import ColType


# ---------------------------------------------------------------------------
# Trees and models
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Leaf:
    values: tuple[float, ...]


@dataclass(frozen=True)
class Split:
    """Internal node; a row goes LEFT iff feature value <= threshold."""

    feature: str
    threshold: float
    left: "TreeNode"
    right: "TreeNode"


TreeNode = Union[Leaf, Split]


def tree_node_count(node: TreeNode) -> int:
    if isinstance(node, Leaf):
        return 1
    return 1 + tree_node_count(node.left) + tree_node_count(node.right)


def tree_features(node: TreeNode, out: list[str] | None = None) -> list[str]:
    """Distinct split features in pre-order of first occurrence."""
    if out is None:
        out = []
    if isinstance(node, Split):
        if node.feature not in out:
            out.append(node.feature)
        tree_features(node.left, out)
        tree_features(node.right, out)
    return out


def tree_leaf_arity(node: TreeNode) -> int:
    while isinstance(node, Split):
        node = node.left
    return len(node.values)


def check_tree(node: TreeNode, arity: int | None = None) -> int:
    """Verify all leaves share one value-vector length; returns it."""
    if isinstance(node, Leaf):
        if arity is not None and len(node.values) != arity:
            raise PipelineFormatError(
                f"leaf arity mismatch: {len(node.values)} vs {arity}"
            )
        return len(node.values)
    arity = check_tree(node.left, arity)
    return check_tree(node.right, arity)


@dataclass(frozen=True)
class DecisionTree:
    root: TreeNode

    @property
    def node_count(self) -> int:
        return tree_node_count(self.root)

    @property
    def leaf_arity(self) -> int:
        return tree_leaf_arity(self.root)

    def features(self) -> list[str]:
        return tree_features(self.root)

    def validate(self):
        check_tree(self.root)


@dataclass(frozen=True)
class TreeEnsemble:
    trees: tuple[DecisionTree, ...]
    aggregation: str = "sum"  # sum | mean

    @property
    def node_count(self) -> int:
        return sum(t.node_count for t in self.trees)

    @property
    def leaf_arity(self) -> int:
        return self.trees[0].leaf_arity

    def features(self) -> list[str]:
        out: list[str] = []
        for t in self.trees:
            tree_features(t.root, out)
        return out

    def validate(self):
        if not self.trees:
            raise PipelineFormatError("ensemble has no trees")
        if self.aggregation not in ("sum", "mean"):
            raise PipelineFormatError(f"unknown aggregation: {self.aggregation!r}")
        arity = None
        for t in self.trees:
            arity = check_tree(t.root, arity)


@dataclass(frozen=True)
class Linear:
    """weights maps feature name -> coefficient; link in {identity, sigmoid}."""

    weights: tuple[tuple[str, float], ...]
    intercept: float
    link: str = "identity"

    @property
    def leaf_arity(self) -> int:
        return 1

    def features(self) -> list[str]:
        return [f for f, _ in self.weights]

    def nonzero_features(self) -> list[str]:
        return [f for f, w in self.weights if w != 0.0]

    def weight_map(self) -> dict[str, float]:
        return dict(self.weights)

    def validate(self):
        names = [f for f, _ in self.weights]
        if len(set(names)) != len(names):
            raise PipelineFormatError("linear weights reference duplicate features")
        if self.link not in ("identity", "sigmoid"):
            raise PipelineFormatError(f"unknown link: {self.link!r}")
        for f, w in self.weights:
            if not math.isfinite(w):
                raise PipelineFormatError(f"non-finite weight for {f!r}")
        if not math.isfinite(self.intercept):
            raise PipelineFormatError("non-finite intercept")


Model = Union[DecisionTree, TreeEnsemble, Linear]


# ---------------------------------------------------------------------------
# Featurizers and pipelines
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OneHot:
    """Emits one 0/1 feature per category, named `column=value`."""

    column: str
    categories: tuple[str, ...]
    unknown: str = "zeros"  # zeros | error

    def output_names(self) -> list[str]:
        return [f"{self.column}={c}" for c in self.categories]

    def validate(self):
        if not self.categories:
            raise PipelineFormatError(f"one_hot on {self.column!r} has no categories")
        if len(set(self.categories)) != len(self.categories):
            raise PipelineFormatError(f"one_hot on {self.column!r} repeats a category")
        if self.unknown not in ("zeros", "error"):
            raise PipelineFormatError(f"unknown policy: {self.unknown!r}")


@dataclass(frozen=True)
class StandardScale:
    """Replaces a numeric column feature with (x - mean) / std."""

    column: str
    mean: float
    std: float

    def output_names(self) -> list[str]:
        return [self.column]

    def validate(self):
        if not (math.isfinite(self.mean) and math.isfinite(self.std)):
            raise PipelineFormatError(f"non-finite scale parameters on {self.column!r}")
        if self.std <= 0:
            raise PipelineFormatError(f"standard_scale std must be positive on {self.column!r}")


Featurizer = Union[OneHot, StandardScale]


@dataclass(frozen=True)
class ModelPipeline:
    featurizers: tuple[Featurizer, ...]
    model: Model
    output: str = "scores"  # scores | label

    # -- structure ---------------------------------------------------------

    def feature_producers(self) -> dict[str, Featurizer]:
        out: dict[str, Featurizer] = {}
        for f in self.featurizers:
            for name in f.output_names():
                if name in out:
                    raise PipelineFormatError(f"feature {name!r} produced twice")
                out[name] = f
        return out

    def model_features(self) -> list[str]:
        return self.model.features()

    def input_columns(self) -> tuple[tuple[str, ColType], ...]:
        """Expected input columns, in deterministic order.

        Featurizer source columns come first (declaration order), then
        passthrough model features in model order.  One-hot inputs are
        categorical, everything else numeric.
        """
        produced = self.feature_producers()
        cols: list[tuple[str, ColType]] = []
        seen: set[str] = set()
        for f in self.featurizers:
            if f.column not in seen:
                seen.add(f.column)
                t = ColType.CATEGORICAL if isinstance(f, OneHot) else ColType.NUMERIC
                cols.append((f.column, t))
        for feat in self.model_features():
            if feat in produced:
                continue
            if feat not in seen:
                seen.add(feat)
                cols.append((feat, ColType.NUMERIC))
        return tuple(cols)

    def output_arity(self) -> int:
        if self.output == "label":
            return 1
        return self.model.leaf_arity

    def used_features(self) -> set[str]:
        """Input columns reachable backward from any model-consumed feature.

        Zero-weight linear features contribute nothing; the intercept
        contributes nothing.  One-hot features trace back to their source
        column.
        """
        produced = self.feature_producers()
        if isinstance(self.model, Linear):
            feats = self.model.nonzero_features()
        else:
            feats = self.model.features()
        out: set[str] = set()
        for feat in feats:
            if feat in produced:
                out.add(produced[feat].column)
            else:
                out.add(feat)
        return out

    def validate(self):
        for f in self.featurizers:
            f.validate()
        self.model.validate()
        self.feature_producers()  # uniqueness
        if self.output not in ("scores", "label"):
            raise PipelineFormatError(f"unknown output mode: {self.output!r}")
        produced = self.feature_producers()
        col_types = dict(self.input_columns())
        for feat in self.model_features():
            if feat in produced:
                continue
            if "=" in feat:
                col = feat.split("=", 1)[0]
                raise PipelineFormatError(
                    f"feature {feat!r} looks one-hot encoded but no encoder on "
                    f"{col!r} produces it"
                )
            if col_types.get(feat) == ColType.CATEGORICAL:
                raise PipelineFormatError(
                    f"model consumes categorical column {feat!r} directly; trees and "
                    "linear models require one-hot encoding first"
                )


# ---------------------------------------------------------------------------
# Column views (executor-facing input representation)
# ---------------------------------------------------------------------------


@dataclass
class ColumnView:
    """A typed column slice handed to model evaluation.

    Numeric/boolean columns carry float64 `values`; categorical columns carry
    int64 `codes` plus their `categories` dictionary.  `validity` is None for
    columns with no NULLs.
    """

    values: np.ndarray | None = None
    codes: np.ndarray | None = None
    categories: list[str] | None = None
    validity: np.ndarray | None = None

    @property
    def is_categorical(self) -> bool:
        return self.codes is not None

    def __len__(self):
        arr = self.values if self.values is not None else self.codes
        return len(arr)


# ---------------------------------------------------------------------------
# Packed trees (vectorized routing)
# ---------------------------------------------------------------------------


class PackedTrees:
    """All trees of a model flattened into contiguous node arrays."""

    def __init__(self, trees: tuple[DecisionTree, ...], feature_index: dict[str, int],
                 aggregation: str, arity: int):
        feat: list[int] = []
        thr: list[float] = []
        left: list[int] = []
        right: list[int] = []
        values: list[tuple[float, ...]] = []
        roots: list[int] = []
        max_depth = 0

        def add(node: TreeNode, depth: int) -> int:
            nonlocal max_depth
            max_depth = max(max_depth, depth)
            idx = len(feat)
            if isinstance(node, Leaf):
                feat.append(-1)
                thr.append(0.0)
                left.append(idx)  # leaves self-loop so routing needs no mask
                right.append(idx)
                values.append(node.values)
                return idx
            feat.append(feature_index[node.feature])
            thr.append(node.threshold)
            left.append(-1)
            right.append(-1)
            values.append((0.0,) * arity)
            li = add(node.left, depth + 1)
            ri = add(node.right, depth + 1)
            left[idx] = li
            right[idx] = ri
            return idx

        for t in trees:
            roots.append(add(t.root, 0))

        self.feat = np.asarray(feat, dtype=np.int64)
        self.thr = np.asarray(thr, dtype=np.float64)
        self.left = np.asarray(left, dtype=np.int64)
        self.right = np.asarray(right, dtype=np.int64)
        self.values = np.asarray(values, dtype=np.float64)
        self.roots = np.asarray(roots, dtype=np.int64)
        self.aggregation = aggregation
        self.n_trees = len(roots)
        self.max_depth = max_depth

    def predict(self, X: np.ndarray) -> tuple[np.ndarray, int]:
        """Route a (n, F) matrix; returns (n, arity) scores and node visits."""
        n = X.shape[0]
        idx = np.broadcast_to(self.roots, (n, self.n_trees)).copy()
        rows = np.broadcast_to(np.arange(n)[:, None], idx.shape)
        visits = n * self.n_trees  # every row touches one leaf per tree
        for _ in range(self.max_depth):
            f = self.feat[idx]
            internal = f >= 0
            live = int(internal.sum())
            if live == 0:
                break
            visits += live
            vals = X[rows, np.maximum(f, 0)]
            go_left = vals <= self.thr[idx]
            idx = np.where(go_left, self.left[idx], self.right[idx])
        scores = self.values[idx]  # (n, T, arity)
        agg = scores.sum(axis=1)
        if self.aggregation == "mean":
            agg = agg / self.n_trees
        return agg, visits


# ---------------------------------------------------------------------------
# Compiled pipelines
# ---------------------------------------------------------------------------


def _dot(X: np.ndarray, w: np.ndarray) -> np.ndarray:
    # einsum keeps the accumulation order independent of the batch size,
    # which matmul (BLAS kernel selection) does not guarantee.
    return np.einsum("nf,f->n", X, w)


def sigmoid(z: np.ndarray) -> np.ndarray:
    # Overflow in exp saturates to the correct 0/1 limit; silence the warning.
    with np.errstate(over="ignore"):
        return 1.0 / (1.0 + np.exp(-z))


class CompiledPipeline:
    """Pipeline prepared for repeated evaluation over column batches."""

    def __init__(self, pipeline: ModelPipeline):
        pipeline.validate()
        self.pipeline = pipeline
        self.inputs = pipeline.input_columns()
        self.input_names = [n for n, _ in self.inputs]
        self.features = pipeline.model_features()
        self.producers = pipeline.feature_producers()
        self.used_inputs = pipeline.used_features()
        model = pipeline.model
        self._packed: PackedTrees | None = None
        self._weights: np.ndarray | None = None
        if isinstance(model, (DecisionTree, TreeEnsemble)):
            findex = {f: i for i, f in enumerate(self.features)}
            trees = model.trees if isinstance(model, TreeEnsemble) else (model,)
            agg = model.aggregation if isinstance(model, TreeEnsemble) else "sum"
            self._packed = PackedTrees(trees, findex, agg, model.leaf_arity)
        else:
            self._weights = np.asarray([w for _, w in model.weights], dtype=np.float64)

    # -- null accounting ----------------------------------------------------

    def required_validity(self, cols: dict[str, ColumnView]) -> np.ndarray | None:
        """Conjunction of validity over inputs the model actually uses."""
        mask = None
        for name in self.input_names:
            if name not in self.used_inputs:
                continue
            v = cols[name].validity
            if v is None:
                continue
            mask = v.copy() if mask is None else (mask & v)
        return mask

    # -- evaluation ---------------------------------------------------------

    def feature_matrix(self, cols: dict[str, ColumnView], n: int | None = None) -> np.ndarray:
        if n is None:
            n = len(next(iter(cols.values()))) if cols else 0
        X = np.empty((n, len(self.features)), dtype=np.float64)
        onehot_cache: dict[int, np.ndarray] = {}
        for j, feat in enumerate(self.features):
            producer = self.producers.get(feat)
            if producer is None:
                X[:, j] = cols[feat].values
            elif isinstance(producer, StandardScale):
                X[:, j] = (cols[producer.column].values - producer.mean) / producer.std
            else:
                block = onehot_cache.get(id(producer))
                if block is None:
                    block = self._encode_onehot(producer, cols[producer.column])
                    onehot_cache[id(producer)] = block
                X[:, j] = block[:, producer.categories.index(feat.split("=", 1)[1])]
        return X

    def _encode_onehot(self, enc: OneHot, col: ColumnView) -> np.ndarray:
        if not col.is_categorical:
            raise ExecutionError(f"one_hot input {enc.column!r} is not categorical")
        codes = col.codes
        code_of = {c: i for i, c in enumerate(col.categories or [])}
        out = np.zeros((len(codes), len(enc.categories)), dtype=np.float64)
        member = np.zeros(len(codes), dtype=bool)
        for k, cat in enumerate(enc.categories):
            tc = code_of.get(cat)
            if tc is None:
                continue
            hit = codes == tc
            out[:, k] = hit
            member |= hit
        if enc.unknown == "error":
            valid = col.validity if col.validity is not None else np.ones(len(codes), bool)
            bad = valid & ~member
            if bad.any():
                row = int(np.nonzero(bad)[0][0])
                raise ExecutionError(
                    f"one_hot on {enc.column!r}: unknown category at row {row}"
                )
        return out

    def predict(self, cols: dict[str, ColumnView],
                n: int | None = None) -> tuple[np.ndarray, int]:
        """Evaluate; returns (scores (n, arity) or labels (n, 1), node visits).

        Callers are responsible for null policy: rows must already be
        restricted to valid ones.  `n` is required when the pipeline has no
        inputs (constant model).
        """
        X = self.feature_matrix(cols, n)
        if self._packed is not None:
            scores, visits = self._packed.predict(X)
        else:
            model = self.pipeline.model
            z = _dot(X, self._weights) + model.intercept
            if model.link == "sigmoid":
                z = sigmoid(z)
            scores = z[:, None]
            visits = 0
        if self.pipeline.output == "label":
            return np.argmax(scores, axis=1).astype(np.float64)[:, None], visits
        return scores, visits


_COMPILED_CACHE: dict[int, CompiledPipeline] = {}


def compile_pipeline(pipeline: ModelPipeline) -> CompiledPipeline:
    got = _COMPILED_CACHE.get(id(pipeline))
    if got is None or got.pipeline is not pipeline:
        got = CompiledPipeline(pipeline)
        _COMPILED_CACHE[id(pipeline)] = got
    return got


# ---------------------------------------------------------------------------
# Scalar reference oracle (deliberately unvectorized)
# ---------------------------------------------------------------------------


def route_row(node: TreeNode, values: dict[str, float]) -> tuple[float, ...]:
    while isinstance(node, Split):
        node = node.left if values[node.feature] <= node.threshold else node.right
    return node.values


def predict_row(pipeline: ModelPipeline, row: dict) -> list[float]:
    """Single-row pipeline evaluation in plain Python, used as a test oracle."""
    feats: dict[str, float] = {}
    for f in pipeline.featurizers:
        if isinstance(f, StandardScale):
            feats[f.column] = (float(row[f.column]) - f.mean) / f.std
        else:
            value = row[f.column]
            if value not in f.categories and f.unknown == "error":
                raise ExecutionError(f"one_hot on {f.column!r}: unknown category {value!r}")
            for c in f.categories:
                feats[f"{f.column}={c}"] = 1.0 if value == c else 0.0
    model = pipeline.model
    if isinstance(model, Linear):
        z = model.intercept
        for name, w in model.weights:
            z += w * feats.get(name, float(row.get(name, 0.0)))
        if model.link == "sigmoid":
            z = 1.0 / (1.0 + math.exp(-z))
        scores = [z]
    else:
        trees = model.trees if isinstance(model, TreeEnsemble) else (model,)
        acc = None
        for t in trees:
            vals = route_row(t.root, {**{k: float(v) for k, v in row.items()
                                         if not isinstance(v, str)}, **feats})
            acc = list(vals) if acc is None else [a + b for a, b in zip(acc, vals)]
        if isinstance(model, TreeEnsemble) and model.aggregation == "mean":
            acc = [a / len(trees) for a in acc]
        scores = acc
    if pipeline.output == "label":
        return [float(max(range(len(scores)), key=lambda i: (scores[i], -i)))]
    return scores
