"""Minimal tensor operator graphs: shape-checked build, batch eval, folding.

Graphs are DAGs of immutable nodes over dense float64/int64 tensors.  Every
tensor is rank-2 `(rows, cols)` where `rows` is either a concrete count
(constants) or the symbolic batch dimension N (`None`).  Shapes are inferred
and validated at construction, so a graph that builds successfully never
raises a shape error during evaluation.  Elementwise ops broadcast a 1-sized
dimension against N, which is what lets folded constants keep their place in
a live graph.

MatMul is evaluated with a fixed accumulation order (einsum), so results are
bit-identical regardless of batch size.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import ExecutionError, PipelineFormatError, ShapeError
from .ir import ColType
from .models import (
    DecisionTree,
    Leaf,
    Linear,
    ModelPipeline,
    OneHot,
    Split,
    StandardScale,
    TreeEnsemble,
    sigmoid,
)

Rows = Union[int, None]  # None = symbolic batch dimension N


def _broadcast_rows(a: Rows, b: Rows, where: str) -> Rows:
    if a == b:
        return a
    if a == 1:
        return b
    if b == 1:
        return a
    raise ShapeError(f"{where}: row counts {a} and {b} are not broadcastable")


def _broadcast_cols(a: int, b: int, where: str) -> int:
    if a == b:
        return a
    if a == 1:
        return b
    if b == 1:
        return a
    raise ShapeError(f"{where}: widths {a} and {b} are not broadcastable")


class TNode:
    """Base tensor node; subclasses set .shape = (rows, cols) and .dtype."""

    shape: tuple[Rows, int]
    dtype: str  # "f" | "i"

    @property
    def inputs(self) -> tuple["TNode", ...]:
        return ()


@dataclass(frozen=True, eq=False)
class Input(TNode):
    name: str
    width: int = 1
    dtype: str = "f"

    @property
    def shape(self):
        return (None, self.width)


@dataclass(frozen=True, eq=False)
class Constant(TNode):
    value: np.ndarray  # always 2-D

    def __post_init__(self):
        v = np.asarray(self.value)
        if v.ndim == 0:
            v = v.reshape(1, 1)
        elif v.ndim == 1:
            v = v.reshape(1, -1)
        elif v.ndim != 2:
            raise ShapeError(f"Constant: rank-{v.ndim} tensors are not supported")
        dt = np.int64 if v.dtype.kind in "iub" else np.float64
        object.__setattr__(self, "value", np.ascontiguousarray(v, dtype=dt))

    @property
    def shape(self):
        return self.value.shape

    @property
    def dtype(self):
        return "i" if self.value.dtype.kind == "i" else "f"


class _Elementwise(TNode):
    OP = "?"
    OUT_DTYPE: str | None = None  # None: inherit from left operand

    def __init__(self, left: TNode, right: TNode):
        rows = _broadcast_rows(left.shape[0], right.shape[0], self.OP)
        cols = _broadcast_cols(left.shape[1], right.shape[1], self.OP)
        self.left = left
        self.right = right
        self.shape = (rows, cols)
        self.dtype = self.OUT_DTYPE or left.dtype

    @property
    def inputs(self):
        return (self.left, self.right)


class Add(_Elementwise):
    OP = "Add"


class Sub(_Elementwise):
    OP = "Sub"


class Mul(_Elementwise):
    OP = "Mul"


class Div(_Elementwise):
    OP = "Div"
    OUT_DTYPE = "f"


class LessEqual(_Elementwise):
    OP = "LessEqual"
    OUT_DTYPE = "f"  # 0/1 indicator


class Equal(_Elementwise):
    OP = "Equal"
    OUT_DTYPE = "f"  # 0/1 indicator


class MatMul(TNode):
    def __init__(self, left: TNode, right: TNode):
        if left.shape[1] != right.shape[0] or right.shape[0] is None:
            raise ShapeError(
                f"MatMul: inner dimensions {left.shape} x {right.shape} do not match"
            )
        self.left = left
        self.right = right
        self.shape = (left.shape[0], right.shape[1])
        self.dtype = "f"

    @property
    def inputs(self):
        return (self.left, self.right)


class Cast(TNode):
    def __init__(self, item: TNode, dtype: str):
        if dtype not in ("f", "i"):
            raise ShapeError(f"Cast: unknown dtype {dtype!r}")
        self.item = item
        self.to = dtype
        self.shape = item.shape
        self.dtype = dtype

    @property
    def inputs(self):
        return (self.item,)


class Sigmoid(TNode):
    def __init__(self, item: TNode):
        self.item = item
        self.shape = item.shape
        self.dtype = "f"

    @property
    def inputs(self):
        return (self.item,)


class ArgMax(TNode):
    def __init__(self, item: TNode, axis: int = 1):
        if axis != 1:
            raise ShapeError("ArgMax: only axis=1 is supported")
        self.item = item
        self.axis = axis
        self.shape = (item.shape[0], 1)
        self.dtype = "i"

    @property
    def inputs(self):
        return (self.item,)


class Concat(TNode):
    def __init__(self, items: tuple[TNode, ...], axis: int = 1):
        if axis != 1:
            raise ShapeError("Concat: only axis=1 is supported")
        if not items:
            raise ShapeError("Concat: needs at least one input")
        rows: Rows = 1
        for it in items:
            rows = _broadcast_rows(rows, it.shape[0], "Concat")
        self.items = tuple(items)
        self.axis = axis
        self.shape = (rows, sum(it.shape[1] for it in items))
        self.dtype = items[0].dtype

    @property
    def inputs(self):
        return self.items


class Gather(TNode):
    def __init__(self, data: TNode, indices: tuple[int, ...], axis: int = 1):
        if axis != 1:
            raise ShapeError("Gather: only axis=1 is supported")
        for i in indices:
            if not 0 <= i < data.shape[1]:
                raise ShapeError(f"Gather: index {i} out of range for width {data.shape[1]}")
        self.data = data
        self.indices = tuple(indices)
        self.axis = axis
        self.shape = (data.shape[0], len(indices))
        self.dtype = data.dtype

    @property
    def inputs(self):
        return (self.data,)


# ---------------------------------------------------------------------------
# Graph
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TensorGraph:
    outputs: tuple[tuple[str, TNode], ...]

    def nodes(self) -> list[TNode]:
        """Reachable nodes in deterministic post-order."""
        seen: set[int] = set()
        order: list[TNode] = []

        def rec(node: TNode):
            if id(node) in seen:
                return
            seen.add(id(node))
            for i in node.inputs:
                rec(i)
            order.append(node)

        for _, node in self.outputs:
            rec(node)
        return order

    def node_count(self) -> int:
        return len(self.nodes())

    def input_nodes(self) -> list[Input]:
        return [n for n in self.nodes() if isinstance(n, Input)]

    def output_arity(self) -> int:
        return sum(node.shape[1] for _, node in self.outputs)


def _kernel(node: TNode, args: list[np.ndarray]) -> np.ndarray:
    if isinstance(node, Add):
        return args[0] + args[1]
    if isinstance(node, Sub):
        return args[0] - args[1]
    if isinstance(node, Mul):
        return args[0] * args[1]
    if isinstance(node, Div):
        return args[0] / args[1]
    if isinstance(node, LessEqual):
        return (args[0] <= args[1]).astype(np.float64)
    if isinstance(node, Equal):
        return (args[0] == args[1]).astype(np.float64)
    if isinstance(node, MatMul):
        return np.einsum("rk,kc->rc", args[0].astype(np.float64),
                         args[1].astype(np.float64))
    if isinstance(node, Cast):
        return args[0].astype(np.float64 if node.to == "f" else np.int64)
    if isinstance(node, Sigmoid):
        return sigmoid(args[0].astype(np.float64))
    if isinstance(node, ArgMax):
        return np.argmax(args[0], axis=1).astype(np.int64).reshape(-1, 1)
    if isinstance(node, Concat):
        rows = max((a.shape[0] for a in args), default=1)
        parts = [np.broadcast_to(a, (rows, a.shape[1])) for a in args]
        return np.concatenate(parts, axis=1)
    if isinstance(node, Gather):
        return args[0][:, list(node.indices)]
    raise ExecutionError(f"no kernel for node {type(node).__name__}")


def eval_graph(graph: TensorGraph, batch: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
    """Deterministic topological evaluation of all named outputs.

    Every Input must be bound by `batch` with a consistent leading dimension.
    """
    n: int | None = None
    bound: dict[str, np.ndarray] = {}
    for name, arr in batch.items():
        a = np.asarray(arr)
        if a.ndim == 1:
            a = a.reshape(-1, 1)
        bound[name] = a
    for inp in graph.input_nodes():
        if inp.name not in bound:
            raise ExecutionError(f"unbound graph input: {inp.name!r}")
        a = bound[inp.name]
        if a.shape[1] != inp.width:
            raise ExecutionError(
                f"input {inp.name!r}: expected width {inp.width}, got {a.shape[1]}"
            )
        if n is None:
            n = a.shape[0]
        elif a.shape[0] != n:
            raise ExecutionError(
                f"input {inp.name!r}: batch size {a.shape[0]} != {n}"
            )

    memo: dict[int, np.ndarray] = {}

    def ev(node: TNode) -> np.ndarray:
        got = memo.get(id(node))
        if got is not None:
            return got
        if isinstance(node, Input):
            a = bound[node.name]
            out = a.astype(np.int64 if node.dtype == "i" else np.float64, copy=False)
        elif isinstance(node, Constant):
            out = node.value
        else:
            out = _kernel(node, [ev(i) for i in node.inputs])
        memo[id(node)] = out
        return out

    return {name: ev(node) for name, node in graph.outputs}


def const_fold(graph: TensorGraph, bindings: dict[str, object] | None = None) -> TensorGraph:
    """Replace bound inputs with constants and precompute constant subgraphs.

    Node count never increases; evaluating the folded graph on the remaining
    inputs matches the original with the bindings applied.
    """
    bindings = bindings or {}
    rebuilt: dict[int, TNode] = {}

    def fold(node: TNode) -> TNode:
        got = rebuilt.get(id(node))
        if got is not None:
            return got
        if isinstance(node, Input):
            if node.name in bindings:
                v = np.asarray(bindings[node.name])
                if v.ndim == 0:
                    v = np.full((1, node.width), float(v))
                if v.ndim == 1:
                    v = v.reshape(1, -1)
                if v.shape[1] != node.width:
                    raise ShapeError(
                        f"binding for {node.name!r}: width {v.shape[1]} != {node.width}"
                    )
                out: TNode = Constant(v.astype(np.int64 if node.dtype == "i" else np.float64))
            else:
                out = node
        elif isinstance(node, Constant):
            out = node
        else:
            new_inputs = [fold(i) for i in node.inputs]
            if all(isinstance(i, Constant) for i in new_inputs):
                out = Constant(_kernel(node, [i.value for i in new_inputs]))
            elif all(a is b for a, b in zip(new_inputs, node.inputs)):
                out = node
            else:
                out = _rebuild(node, new_inputs)
        rebuilt[id(node)] = out
        return out

    return TensorGraph(tuple((name, fold(node)) for name, node in graph.outputs))


def _rebuild(node: TNode, inputs: list[TNode]) -> TNode:
    if isinstance(node, (Add, Sub, Mul, Div, LessEqual, Equal)):
        return type(node)(inputs[0], inputs[1])
    if isinstance(node, MatMul):
        return MatMul(inputs[0], inputs[1])
    if isinstance(node, Cast):
        return Cast(inputs[0], node.to)
    if isinstance(node, Sigmoid):
        return Sigmoid(inputs[0])
    if isinstance(node, ArgMax):
        return ArgMax(inputs[0], node.axis)
    if isinstance(node, Concat):
        return Concat(tuple(inputs), node.axis)
    if isinstance(node, Gather):
        return Gather(inputs[0], node.indices, node.axis)
    raise ExecutionError(f"cannot rebuild node {type(node).__name__}")


# ---------------------------------------------------------------------------
# Pipeline translation (the LA lowering)
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GraphBinding:
    """How one graph input is fed from a plan column."""

    input: str
    column: str
    kind: str = "float"  # float | category
    categories: tuple[str, ...] = ()

    def with_column(self, column: str) -> "GraphBinding":
        return GraphBinding(self.input, column, self.kind, self.categories)


@dataclass(frozen=True)
class TensorModel:
    """A compiled tensor graph registered as a catalog model."""

    graph: TensorGraph
    bindings: tuple[GraphBinding, ...]
    output: str = "scores"

    def input_columns(self) -> tuple[tuple[str, ColType], ...]:
        return tuple(
            (b.input, ColType.CATEGORICAL if b.kind == "category" else ColType.NUMERIC)
            for b in self.bindings
        )

    def output_arity(self) -> int:
        return self.graph.output_arity()

    def used_features(self) -> set[str]:
        live = {n.name for n in self.graph.input_nodes()}
        return {b.input for b in self.bindings if b.input in live}


@dataclass
class _TreeMatrices:
    A: np.ndarray  # (F, S) split feature selectors
    B: np.ndarray  # (1, S) thresholds
    C: np.ndarray  # (S, L) +1 left-of / -1 right-of ancestor
    D: np.ndarray  # (1, L) left-edge counts per leaf
    E: np.ndarray  # (L, K) leaf values


def tree_matrices(root, feature_index: dict[str, int], arity: int) -> _TreeMatrices | None:
    """GEMM-form tree scoring matrices; None for a single-leaf tree."""
    splits: list[Split] = []
    leaves: list[tuple[Leaf, list[tuple[int, bool]]]] = []  # (leaf, [(split_idx, went_left)])

    def rec(node, path):
        if isinstance(node, Leaf):
            leaves.append((node, path))
            return
        idx = len(splits)
        splits.append(node)
        rec(node.left, path + [(idx, True)])
        rec(node.right, path + [(idx, False)])

    rec(root, [])
    if not splits:
        return None
    S, L, F = len(splits), len(leaves), len(feature_index)
    A = np.zeros((F, S))
    B = np.zeros((1, S))
    for j, s in enumerate(splits):
        A[feature_index[s.feature], j] = 1.0
        B[0, j] = s.threshold
    C = np.zeros((S, L))
    D = np.zeros((1, L))
    E = np.zeros((L, arity))
    for l, (leaf, path) in enumerate(leaves):
        for split_idx, went_left in path:
            C[split_idx, l] = 1.0 if went_left else -1.0
        D[0, l] = sum(1 for _, went_left in path if went_left)
        E[l, :] = leaf.values
    return _TreeMatrices(A, B, C, D, E)


def translate_pipeline(pipeline: ModelPipeline) -> TensorModel:
    """Lower a pipeline to a tensor graph computing identical scores.

    Featurizers become arithmetic/equality subgraphs, trees become the
    three-stage GEMM form (split decisions, leaf indicators, leaf values),
    linear models become MatMul+Add(+Sigmoid).
    """
    pipeline.validate()
    producers = pipeline.feature_producers()
    inputs: dict[str, Input] = {}
    bindings: list[GraphBinding] = []
    for name, ctype in pipeline.input_columns():
        if ctype == ColType.CATEGORICAL:
            enc = next(f for f in pipeline.featurizers
                       if isinstance(f, OneHot) and f.column == name)
            inputs[name] = Input(name, 1, "i")
            bindings.append(GraphBinding(name, name, "category", enc.categories))
        else:
            inputs[name] = Input(name, 1, "f")
            bindings.append(GraphBinding(name, name, "float"))

    scaled_cache: dict[str, TNode] = {}

    def feature_node(feat: str) -> TNode:
        producer = producers.get(feat)
        if producer is None:
            return inputs[feat]
        if isinstance(producer, StandardScale):
            got = scaled_cache.get(producer.column)
            if got is None:
                got = Div(Sub(inputs[producer.column], Constant(np.array([[producer.mean]]))),
                          Constant(np.array([[producer.std]])))
                scaled_cache[producer.column] = got
            return got
        # One-hot: codes arrive in the encoder's own category index space.
        k = producer.categories.index(feat.split("=", 1)[1])
        return Equal(inputs[producer.column], Constant(np.array([[k]], dtype=np.int64)))

    features = pipeline.model_features()
    findex = {f: i for i, f in enumerate(features)}
    model = pipeline.model

    if features:
        blocks = [feature_node(f) for f in features]
        X: TNode = blocks[0] if len(blocks) == 1 else Concat(tuple(blocks))
    else:
        X = None

    if isinstance(model, Linear):
        if features:
            W = Constant(np.array([[w] for _, w in model.weights]))
            scores: TNode = Add(MatMul(X, W), Constant(np.array([[model.intercept]])))
        else:
            scores = Constant(np.array([[model.intercept]]))
        if model.link == "sigmoid":
            scores = Sigmoid(scores)
    else:
        trees = model.trees if isinstance(model, TreeEnsemble) else (model,)
        arity = model.leaf_arity
        per_tree: list[TNode] = []
        for t in trees:
            m = tree_matrices(t.root, findex, arity)
            if m is None:
                leaf: Leaf = t.root  # type: ignore[assignment]
                per_tree.append(Constant(np.array([list(leaf.values)])))
                continue
            dec = LessEqual(MatMul(X, Constant(m.A)), Constant(m.B))
            ind = Equal(MatMul(dec, Constant(m.C)), Constant(m.D))
            per_tree.append(MatMul(ind, Constant(m.E)))
        scores = per_tree[0]
        for t_out in per_tree[1:]:
            scores = Add(scores, t_out)
        if isinstance(model, TreeEnsemble) and model.aggregation == "mean":
            scores = Div(scores, Constant(np.array([[float(len(trees))]])))

    if pipeline.output == "label":
        scores = Cast(ArgMax(scores), "f")

    graph = TensorGraph((("out", scores),))
    return TensorModel(graph, tuple(bindings), pipeline.output)


# ---------------------------------------------------------------------------
# JSON serialization (explain dumps, persisted derived models)
# ---------------------------------------------------------------------------


def serialize_graph(graph: TensorGraph) -> dict:
    order = graph.nodes()
    ids = {id(n): i for i, n in enumerate(order)}
    nodes = []
    for n in order:
        entry: dict = {"id": ids[id(n)], "op": type(n).__name__,
                       "inputs": [ids[id(i)] for i in n.inputs]}
        if isinstance(n, Input):
            entry.update(name=n.name, width=n.width, dtype=n.dtype)
        elif isinstance(n, Constant):
            entry.update(dtype=n.dtype, value=n.value.tolist())
        elif isinstance(n, Cast):
            entry.update(dtype=n.to)
        elif isinstance(n, (ArgMax, Concat, Gather)):
            entry.update(axis=getattr(n, "axis", 1))
            if isinstance(n, Gather):
                entry.update(indices=list(n.indices))
        nodes.append(entry)
    return {
        "nodes": nodes,
        "outputs": {name: ids[id(node)] for name, node in graph.outputs},
    }


_ELEMENTWISE = {"Add": Add, "Sub": Sub, "Mul": Mul, "Div": Div,
                "LessEqual": LessEqual, "Equal": Equal}


def parse_graph(doc: dict) -> TensorGraph:
    built: dict[int, TNode] = {}
    for entry in doc["nodes"]:
        op = entry["op"]
        args = [built[i] for i in entry["inputs"]]
        if op == "Input":
            node: TNode = Input(entry["name"], entry["width"], entry["dtype"])
        elif op == "Constant":
            dt = np.int64 if entry["dtype"] == "i" else np.float64
            node = Constant(np.asarray(entry["value"], dtype=dt))
        elif op in _ELEMENTWISE:
            node = _ELEMENTWISE[op](args[0], args[1])
        elif op == "MatMul":
            node = MatMul(args[0], args[1])
        elif op == "Cast":
            node = Cast(args[0], entry["dtype"])
        elif op == "Sigmoid":
            node = Sigmoid(args[0])
        elif op == "ArgMax":
            node = ArgMax(args[0], entry["axis"])
        elif op == "Concat":
            node = Concat(tuple(args), entry["axis"])
        elif op == "Gather":
            node = Gather(args[0], tuple(entry["indices"]), entry["axis"])
        else:
            raise PipelineFormatError(f"unknown tensor op: {op!r}")
        built[entry["id"]] = node
    return TensorGraph(tuple((name, built[i]) for name, i in doc["outputs"].items()))


def serialize_tensor_model(tm: TensorModel) -> dict:
    return {
        "format_version": 1,
        "kind": "tensor_model",
        "graph": serialize_graph(tm.graph),
        "bindings": [
            {"input": b.input, "kind": b.kind, "categories": list(b.categories)}
            for b in tm.bindings
        ],
        "output": tm.output,
    }


def load_tensor_model(doc: dict) -> TensorModel:
    bindings = tuple(
        GraphBinding(b["input"], b["input"], b["kind"], tuple(b.get("categories", ())))
        for b in doc["bindings"]
    )
    return TensorModel(parse_graph(doc["graph"]), bindings, doc.get("output", "scores"))
