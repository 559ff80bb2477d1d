"""Model payloads: pipelines, used-feature tracing, vectorized evaluation."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inferq.errors import PipelineFormatError
from inferq.models import (
    ColumnView,
    DecisionTree,
    Leaf,
    Linear,
    ModelPipeline,
    OneHot,
    Split,
    StandardScale,
    TreeEnsemble,
    compile_pipeline,
    predict_row,
    route_row,
)


def dest_onehot(categories=("JFK", "SEA", "LAX", "ORD", "ATL")):
    return OneHot("dest", categories, "zeros")


class TestUsedFeatures:
    def test_all_zero_weights_is_empty(self):
        model = Linear((("a", 0.0), ("b", 0.0)), intercept=3.0)
        pipe = ModelPipeline((), model, "scores")
        assert pipe.used_features() == set()

    def test_onehot_traces_to_source_column(self):
        # Five categories, only two carry weight: the source column is still
        # needed, nothing else is.
        weights = (("dest=JFK", 1.5), ("dest=SEA", -0.5), ("dest=LAX", 0.0),
                   ("dest=ORD", 0.0), ("dest=ATL", 0.0))
        pipe = ModelPipeline((dest_onehot(),), Linear(weights, 0.0), "scores")
        assert pipe.used_features() == {"dest"}

    def test_tree_features_and_passthrough(self):
        tree = DecisionTree(Split("age", 35.0, Leaf((1.0,)), Leaf((2.0,))))
        pipe = ModelPipeline((StandardScale("bp", 120.0, 10.0),), tree, "scores")
        assert pipe.used_features() == {"age"}

    def test_scaled_feature_traces_to_column(self):
        tree = DecisionTree(Split("bp", 1.0, Leaf((1.0,)), Leaf((2.0,))))
        pipe = ModelPipeline((StandardScale("bp", 120.0, 10.0),), tree, "scores")
        assert pipe.used_features() == {"bp"}


class TestPipelineValidation:
    def test_dangling_onehot_feature(self):
        model = Linear((("dest=JFK", 1.0),), 0.0)
        pipe = ModelPipeline((), model, "scores")
        with pytest.raises(PipelineFormatError, match="dest"):
            pipe.validate()

    def test_onehot_feature_outside_categories(self):
        model = Linear((("dest=XXX", 1.0),), 0.0)
        pipe = ModelPipeline((dest_onehot(("JFK", "SEA")),), model, "scores")
        with pytest.raises(PipelineFormatError):
            pipe.validate()

    def test_duplicate_linear_features(self):
        with pytest.raises(PipelineFormatError):
            Linear((("a", 1.0), ("a", 2.0)), 0.0).validate()

    def test_leaf_arity_must_match(self):
        bad = Split("a", 0.0, Leaf((1.0, 2.0)), Leaf((1.0,)))
        with pytest.raises(PipelineFormatError):
            DecisionTree(bad).validate()

    def test_input_order_is_deterministic(self):
        pipe = ModelPipeline(
            (StandardScale("pregnant", 0.5, 0.5), dest_onehot(("A", "B"))),
            DecisionTree(Split("age", 30.0,
                               Split("pregnant", 0.0, Leaf((1.0,)), Leaf((2.0,))),
                               Leaf((3.0,)))),
            "scores",
        )
        assert [n for n, _ in pipe.input_columns()] == ["pregnant", "dest", "age"]


class TestTreeRouting:
    def test_every_row_reaches_exactly_one_leaf(self):
        rng = np.random.default_rng(0)

        def rand_tree(depth):
            if depth == 0 or rng.random() < 0.25:
                return Leaf((float(rng.integers(0, 100)),))
            return Split(f"x{rng.integers(0, 3)}", float(rng.uniform(-1, 1)),
                         rand_tree(depth - 1), rand_tree(depth - 1))

        for _ in range(20):
            tree = rand_tree(6)
            values = {f"x{i}": float(rng.uniform(-1, 1)) for i in range(3)}
            first = route_row(tree, values)
            second = route_row(tree, values)
            assert first == second  # total and deterministic

    def test_boundary_goes_left(self):
        tree = Split("x", 1.0, Leaf((0.0,)), Leaf((1.0,)))
        assert route_row(tree, {"x": 1.0}) == (0.0,)
        assert route_row(tree, {"x": 1.0000000001}) == (1.0,)

    def test_packed_matches_scalar_routing_exactly(self):
        rng = np.random.default_rng(1)

        def rand_tree(depth):
            if depth == 0 or rng.random() < 0.2:
                return Leaf((float(rng.uniform(-5, 5)),))
            return Split(f"x{rng.integers(0, 4)}", float(rng.uniform(-1, 1)),
                         rand_tree(depth - 1), rand_tree(depth - 1))

        for _ in range(10):
            tree = DecisionTree(rand_tree(7))
            pipe = ModelPipeline((), tree, "scores")
            compiled = compile_pipeline(pipe)
            X = rng.uniform(-1, 1, (64, 4))
            cols = {f"x{i}": ColumnView(values=X[:, i].copy()) for i in range(4)}
            got = compiled.predict({k: cols[k] for k, _ in compiled.inputs}, 64)[0]
            for r in range(64):
                exp = route_row(tree.root, {f"x{i}": X[r, i] for i in range(4)})
                assert got[r, 0] == exp[0]  # single tree is bit-exact


class TestCompiledPipeline:
    def test_linear_sigmoid(self):
        pipe = ModelPipeline((), Linear((("a", 2.0), ("b", -1.0)), 0.5), "scores")
        compiled = compile_pipeline(pipe)
        cols = {"a": ColumnView(values=np.array([1.0])),
                "b": ColumnView(values=np.array([1.0]))}
        out, _ = compiled.predict(cols, 1)
        assert out[0, 0] == pytest.approx(1.5)

    def test_onehot_unknown_zeros(self):
        pipe = ModelPipeline(
            (dest_onehot(("JFK", "SEA")),),
            Linear((("dest=JFK", 1.0), ("dest=SEA", 2.0)), 0.0),
            "scores",
        )
        compiled = compile_pipeline(pipe)
        cols = {"dest": ColumnView(codes=np.array([0, 1, 2]),
                                   categories=["JFK", "SEA", "BOS"])}
        out, _ = compiled.predict(cols, 3)
        assert out[:, 0].tolist() == [1.0, 2.0, 0.0]

    def test_onehot_unknown_error(self):
        pipe = ModelPipeline(
            (OneHot("dest", ("JFK",), "error"),),
            Linear((("dest=JFK", 1.0),), 0.0),
            "scores",
        )
        compiled = compile_pipeline(pipe)
        cols = {"dest": ColumnView(codes=np.array([0, 1]), categories=["JFK", "BOS"])}
        with pytest.raises(Exception, match="unknown category at row 1"):
            compiled.predict(cols, 2)

    def test_label_argmax_lowest_index_tie(self):
        tree = DecisionTree(Leaf((3.0, 3.0, 1.0)))
        pipe = ModelPipeline((), tree, "label")
        compiled = compile_pipeline(pipe)
        out, _ = compiled.predict({}, 4)
        assert out.shape == (4, 1)
        assert (out == 0.0).all()

    def test_ensemble_mean_matches_scalar_oracle(self):
        rng = np.random.default_rng(5)

        def rand_tree(depth):
            if depth == 0 or rng.random() < 0.3:
                return Leaf((float(rng.uniform(0, 10)),))
            return Split(f"x{rng.integers(0, 3)}", float(rng.uniform(-1, 1)),
                         rand_tree(depth - 1), rand_tree(depth - 1))

        forest = TreeEnsemble(tuple(DecisionTree(rand_tree(5)) for _ in range(9)),
                              "mean")
        pipe = ModelPipeline((), forest, "scores")
        compiled = compile_pipeline(pipe)
        X = rng.uniform(-1, 1, (100, 3))
        cols = {f"x{i}": ColumnView(values=X[:, i].copy()) for i in range(3)}
        got = compiled.predict({k: cols[k] for k, _ in compiled.inputs}, 100)[0][:, 0]
        for r in range(100):
            exp = predict_row(pipe, {f"x{i}": X[r, i] for i in range(3)})[0]
            assert got[r] == pytest.approx(exp, abs=1e-12)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 500))
    def test_batch_invariance_bit_identical(self, n):
        rng = np.random.default_rng(n)
        tree = DecisionTree(
            Split("a", 0.3,
                  Split("b", -0.2, Leaf((1.0,)), Leaf((2.0,))),
                  Split("a", 0.7, Leaf((3.0,)), Leaf((4.0,)))))
        pipe = ModelPipeline((StandardScale("b", 0.1, 2.0),), tree, "scores")
        compiled = compile_pipeline(pipe)
        a = rng.uniform(-1, 1, n)
        b = rng.uniform(-1, 1, n)
        cols = {"b": ColumnView(values=b), "a": ColumnView(values=a)}
        full = compiled.predict(cols, n)[0]
        singles = np.vstack([
            compiled.predict({"b": ColumnView(values=b[i:i + 1]),
                              "a": ColumnView(values=a[i:i + 1])}, 1)[0]
            for i in range(n)
        ])
        assert (full == singles).all()

    def test_required_validity_covers_used_inputs_only(self):
        weights = (("a", 1.0), ("b", 0.0))
        pipe = ModelPipeline((), Linear(weights, 0.0), "scores")
        compiled = compile_pipeline(pipe)
        validity_b = np.array([True, False])
        cols = {"a": ColumnView(values=np.array([1.0, 2.0])),
                "b": ColumnView(values=np.array([1.0, 2.0]), validity=validity_b)}
        # b has zero weight, so its NULL must not count.
        assert compiled.required_validity(cols) is None
