"""Pipeline JSON format: strict schema, lossless round trips."""

import json
import math

import pytest

from inferq.errors import PipelineFormatError
from inferq.models import DecisionTree, Leaf, Linear, Split, TreeEnsemble
from inferq.pipeline_json import (
    canonical_json,
    load_model_document,
    load_pipeline,
    serialize_pipeline,
)


def linear_doc():
    return {
        "format_version": 1,
        "featurizers": [],
        "model": {
            "type": "linear",
            "weights": {"a": 1.5, "b": -2.0, "c": 0.25},
            "intercept": 0.1,
            "link": "sigmoid",
        },
        "output": "scores",
    }


def seven_node_tree_doc():
    # Hand-counted: 3 splits, 4 leaves.
    return {
        "format_version": 1,
        "featurizers": [],
        "model": {
            "type": "decision_tree",
            "root": 0,
            "nodes": [
                {"id": 0, "kind": "split", "feature": "x", "threshold": 0.0,
                 "left": 1, "right": 2},
                {"id": 1, "kind": "split", "feature": "y", "threshold": 1.0,
                 "left": 3, "right": 4},
                {"id": 2, "kind": "split", "feature": "x", "threshold": 5.0,
                 "left": 5, "right": 6},
                {"id": 3, "kind": "leaf", "values": [1.0]},
                {"id": 4, "kind": "leaf", "values": [2.0]},
                {"id": 5, "kind": "leaf", "values": [3.0]},
                {"id": 6, "kind": "leaf", "values": [4.0]},
            ],
        },
        "output": "scores",
    }


class TestLoad:
    def test_linear_sigmoid(self):
        pipe = load_pipeline(linear_doc())
        assert isinstance(pipe.model, Linear)
        assert pipe.model.link == "sigmoid"
        assert len(pipe.model.weights) == 3

    def test_seven_node_tree(self):
        pipe = load_pipeline(seven_node_tree_doc())
        model = pipe.model
        assert isinstance(model, DecisionTree)
        assert model.node_count == 7
        splits = sum(1 for _ in _walk_splits(model.root))
        assert splits == 3

    def test_dangling_child_id_names_it(self):
        doc = seven_node_tree_doc()
        doc["model"]["nodes"][2]["right"] = 99
        with pytest.raises(PipelineFormatError, match="99"):
            load_pipeline(doc)

    def test_unknown_key_rejected(self):
        doc = linear_doc()
        doc["surprise"] = 1
        with pytest.raises(PipelineFormatError, match="surprise"):
            load_pipeline(doc)

    def test_unknown_nested_key_rejected(self):
        doc = linear_doc()
        doc["model"]["extra"] = True
        with pytest.raises(PipelineFormatError, match="extra"):
            load_pipeline(doc)

    def test_nonfinite_weight_rejected(self):
        doc = linear_doc()
        doc["model"]["weights"]["a"] = math.inf
        with pytest.raises(PipelineFormatError, match="non-finite"):
            load_pipeline(doc)

    def test_wrong_format_version(self):
        doc = linear_doc()
        doc["format_version"] = 2
        with pytest.raises(PipelineFormatError, match="format_version"):
            load_pipeline(doc)

    def test_ensemble(self):
        tree = seven_node_tree_doc()["model"]
        doc = {
            "format_version": 1,
            "featurizers": [],
            "model": {
                "type": "tree_ensemble",
                "aggregation": "mean",
                "trees": [
                    {"root": tree["root"], "nodes": tree["nodes"]},
                    {"root": 0, "nodes": [{"id": 0, "kind": "leaf", "values": [1.0]}]},
                ],
            },
            "output": "scores",
        }
        pipe = load_pipeline(doc)
        assert isinstance(pipe.model, TreeEnsemble)
        assert pipe.model.node_count == 8


class TestRoundTrip:
    def test_load_serialize_is_identity_on_objects(self):
        for doc in (linear_doc(), seven_node_tree_doc()):
            pipe = load_pipeline(doc)
            again = load_pipeline(serialize_pipeline(pipe))
            assert again == pipe

    def test_serialize_load_is_canonical_fixed_point(self):
        doc = seven_node_tree_doc()
        canon = serialize_pipeline(load_pipeline(doc))
        assert serialize_pipeline(load_pipeline(canon)) == canon
        json.loads(canonical_json(canon))  # renders as valid JSON

    def test_featurizers_round_trip(self):
        doc = {
            "format_version": 1,
            "featurizers": [
                {"kind": "one_hot", "column": "dest",
                 "categories": ["JFK", "SEA"], "unknown": "error"},
                {"kind": "standard_scale", "column": "age", "mean": 40.0, "std": 12.0},
            ],
            "model": {"type": "linear",
                      "weights": {"dest=JFK": 1.0, "age": 0.5}, "intercept": 0.0},
            "output": "scores",
        }
        pipe = load_pipeline(doc)
        assert load_pipeline(serialize_pipeline(pipe)) == pipe

    def test_bundled_models_round_trip(self, hospital_ws, flights_ws):
        for ws, name in ((hospital_ws, "M"), (flights_ws, "D")):
            pipe = ws.catalog.model(name)
            assert load_pipeline(serialize_pipeline(pipe)) == pipe


class TestDispatch:
    def test_document_kind_dispatch(self):
        pipe = load_model_document(linear_doc())
        assert isinstance(pipe.model, Linear)
        with pytest.raises(PipelineFormatError, match="kind"):
            load_model_document({"kind": "whatever"})


def _walk_splits(node):
    if isinstance(node, Split):
        yield node
        yield from _walk_splits(node.left)
        yield from _walk_splits(node.right)
