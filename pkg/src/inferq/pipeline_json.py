"""Versioned JSON format for model pipelines.

This is the single on-disk model format.  Documents are strict: unknown keys
are rejected, all numbers must be finite, and tree nodes form an id-addressed
proper binary tree.  `serialize_pipeline(load_pipeline(doc))` is the canonical
form of `doc` and loading is lossless.

Top-level documents carry `"format_version": 1` and an optional `"kind"`:
`"pipeline"` (default), `"cluster_dispatch"` or `"tensor_model"` — the latter
two are produced by the optimizer/cluster compiler and parsed by their own
modules.
"""

from __future__ import annotations

import json
import math
from typing import Any

from .errors import PipelineFormatError
from .models import (
    DecisionTree,
    Leaf,
    Linear,
    Model,
    ModelPipeline,
    OneHot,
    Split,
    StandardScale,
    TreeEnsemble,
    TreeNode,
)

FORMAT_VERSION = 1


def _check_keys(obj: dict, allowed: set[str], required: set[str], where: str):
    unknown = set(obj) - allowed
    if unknown:
        raise PipelineFormatError(f"{where}: unknown key(s) {sorted(unknown)}")
    missing = required - set(obj)
    if missing:
        raise PipelineFormatError(f"{where}: missing key(s) {sorted(missing)}")


def _finite(value, where: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise PipelineFormatError(f"{where}: expected a number, got {value!r}")
    v = float(value)
    if not math.isfinite(v):
        raise PipelineFormatError(f"{where}: non-finite number {value!r}")
    return v


# ---------------------------------------------------------------------------
# Loading
# ---------------------------------------------------------------------------


def _load_tree_nodes(doc: dict, where: str) -> TreeNode:
    _check_keys(doc, {"root", "nodes"}, {"root", "nodes"}, where)
    by_id: dict[Any, dict] = {}
    for i, node in enumerate(doc["nodes"]):
        if not isinstance(node, dict) or "id" not in node:
            raise PipelineFormatError(f"{where}.nodes[{i}]: missing id")
        if node["id"] in by_id:
            raise PipelineFormatError(f"{where}: duplicate node id {node['id']!r}")
        by_id[node["id"]] = node

    building: set[Any] = set()

    def build(node_id, path: str) -> TreeNode:
        if node_id not in by_id:
            raise PipelineFormatError(f"{where}{path}: dangling node id {node_id!r}")
        if node_id in building:
            raise PipelineFormatError(f"{where}{path}: node id {node_id!r} forms a cycle")
        building.add(node_id)
        node = by_id[node_id]
        kind = node.get("kind")
        if kind == "leaf":
            _check_keys(node, {"id", "kind", "values"}, {"id", "kind", "values"},
                        f"{where}{path}")
            values = tuple(_finite(v, f"{where}{path}.values") for v in node["values"])
            if not values:
                raise PipelineFormatError(f"{where}{path}: leaf has no values")
            built: TreeNode = Leaf(values)
        elif kind == "split":
            _check_keys(node, {"id", "kind", "feature", "threshold", "left", "right"},
                        {"id", "kind", "feature", "threshold", "left", "right"},
                        f"{where}{path}")
            built = Split(
                feature=str(node["feature"]),
                threshold=_finite(node["threshold"], f"{where}{path}.threshold"),
                left=build(node["left"], f"{path}.left"),
                right=build(node["right"], f"{path}.right"),
            )
        else:
            raise PipelineFormatError(f"{where}{path}: node kind must be split or leaf")
        building.discard(node_id)
        return built

    return build(doc["root"], "")


def _load_model(doc: dict) -> Model:
    if not isinstance(doc, dict) or "type" not in doc:
        raise PipelineFormatError("model: missing type")
    mtype = doc["type"]
    if mtype == "decision_tree":
        _check_keys(doc, {"type", "root", "nodes"}, {"type", "root", "nodes"}, "model")
        return DecisionTree(_load_tree_nodes({"root": doc["root"], "nodes": doc["nodes"]},
                                             "model"))
    if mtype == "tree_ensemble":
        _check_keys(doc, {"type", "aggregation", "trees"},
                    {"type", "aggregation", "trees"}, "model")
        trees = tuple(
            DecisionTree(_load_tree_nodes(t, f"model.trees[{i}]"))
            for i, t in enumerate(doc["trees"])
        )
        return TreeEnsemble(trees, str(doc["aggregation"]))
    if mtype == "linear":
        _check_keys(doc, {"type", "weights", "intercept", "link"},
                    {"type", "weights", "intercept"}, "model")
        if not isinstance(doc["weights"], dict):
            raise PipelineFormatError("model.weights: expected an object")
        weights = tuple(
            (str(k), _finite(v, f"model.weights[{k}]")) for k, v in doc["weights"].items()
        )
        return Linear(weights, _finite(doc["intercept"], "model.intercept"),
                      str(doc.get("link", "identity")))
    raise PipelineFormatError(f"model.type: unknown model type {mtype!r}")


def _load_featurizer(doc: dict, i: int):
    where = f"featurizers[{i}]"
    if not isinstance(doc, dict) or "kind" not in doc:
        raise PipelineFormatError(f"{where}: missing kind")
    if doc["kind"] == "one_hot":
        _check_keys(doc, {"kind", "column", "categories", "unknown"},
                    {"kind", "column", "categories"}, where)
        cats = doc["categories"]
        if not isinstance(cats, list) or not all(isinstance(c, str) for c in cats):
            raise PipelineFormatError(f"{where}.categories: expected a list of strings")
        return OneHot(str(doc["column"]), tuple(cats), str(doc.get("unknown", "zeros")))
    if doc["kind"] == "standard_scale":
        _check_keys(doc, {"kind", "column", "mean", "std"},
                    {"kind", "column", "mean", "std"}, where)
        return StandardScale(str(doc["column"]), _finite(doc["mean"], f"{where}.mean"),
                             _finite(doc["std"], f"{where}.std"))
    raise PipelineFormatError(f"{where}.kind: unknown featurizer {doc['kind']!r}")


def load_pipeline(doc: dict) -> ModelPipeline:
    """Parse and validate a pipeline document."""
    if not isinstance(doc, dict):
        raise PipelineFormatError("pipeline document must be a JSON object")
    _check_keys(doc, {"format_version", "kind", "featurizers", "model", "output"},
                {"format_version", "featurizers", "model", "output"}, "pipeline")
    if doc["format_version"] != FORMAT_VERSION:
        raise PipelineFormatError(
            f"format_version: expected {FORMAT_VERSION}, got {doc['format_version']!r}"
        )
    if doc.get("kind", "pipeline") != "pipeline":
        raise PipelineFormatError(f"kind: expected 'pipeline', got {doc['kind']!r}")
    if doc["output"] not in ("scores", "label"):
        raise PipelineFormatError(f"output: expected scores|label, got {doc['output']!r}")
    featurizers = tuple(_load_featurizer(f, i) for i, f in enumerate(doc["featurizers"]))
    pipeline = ModelPipeline(featurizers, _load_model(doc["model"]), doc["output"])
    pipeline.validate()
    return pipeline


# ---------------------------------------------------------------------------
# Serialization (canonical form)
# ---------------------------------------------------------------------------


def _dump_tree(root: TreeNode) -> dict:
    nodes: list[dict] = []

    def add(node: TreeNode) -> int:
        idx = len(nodes)
        if isinstance(node, Leaf):
            nodes.append({"id": idx, "kind": "leaf", "values": list(node.values)})
            return idx
        nodes.append({})  # reserve pre-order slot
        entry = {
            "id": idx,
            "kind": "split",
            "feature": node.feature,
            "threshold": node.threshold,
            "left": add(node.left),
            "right": add(node.right),
        }
        nodes[idx] = entry
        return idx

    add(root)
    return {"root": 0, "nodes": nodes}


def _dump_model(model: Model) -> dict:
    if isinstance(model, DecisionTree):
        return {"type": "decision_tree", **_dump_tree(model.root)}
    if isinstance(model, Linear):
        return {
            "type": "linear",
            "weights": {f: w for f, w in model.weights},
            "intercept": model.intercept,
            "link": model.link,
        }
    return {
        "type": "tree_ensemble",
        "aggregation": model.aggregation,
        "trees": [_dump_tree(t.root) for t in model.trees],
    }


def serialize_pipeline(pipeline: ModelPipeline) -> dict:
    """Canonical document for a pipeline; `load(serialize(p)) == p`."""
    featurizers = []
    for f in pipeline.featurizers:
        if isinstance(f, OneHot):
            featurizers.append({
                "kind": "one_hot",
                "column": f.column,
                "categories": list(f.categories),
                "unknown": f.unknown,
            })
        else:
            featurizers.append({
                "kind": "standard_scale",
                "column": f.column,
                "mean": f.mean,
                "std": f.std,
            })
    return {
        "format_version": FORMAT_VERSION,
        "kind": "pipeline",
        "featurizers": featurizers,
        "model": _dump_model(pipeline.model),
        "output": pipeline.output,
    }


def canonical_json(doc: dict) -> str:
    return json.dumps(doc, indent=2, sort_keys=False)


def load_model_document(doc: dict):
    """Dispatch a top-level model document on its `kind`."""
    kind = doc.get("kind", "pipeline") if isinstance(doc, dict) else "pipeline"
    if kind == "pipeline":
        return load_pipeline(doc)
    if kind == "cluster_dispatch":
        from .cluster import load_cluster_dispatch

        return load_cluster_dispatch(doc)
    if kind == "tensor_model":
        from .tensor import load_tensor_model

        return load_tensor_model(doc)
    raise PipelineFormatError(f"kind: unknown document kind {kind!r}")
