"""Rewrite rules: per-rule semantics plus driver-level equivalence."""

import numpy as np
import pytest

from conftest import bags_equal, numeric_table, single_table_catalog, sorted_rows
from inferq.analysis import EMPTY, TOP, Constant, Interval, ValueSet, interval
from inferq.catalog import Catalog, ForeignKey, TableDecl
from inferq.executor import ExecConfig, execute
from inferq.ir import (
    And,
    CaseWhen,
    ColType,
    Column,
    ColumnRef,
    Compare,
    Filter,
    InList,
    Join,
    Literal,
    Predict,
    Project,
    Scan,
    Schema,
    TensorEval,
    Udf,
    UnionAll,
    render_expr,
    validate_plan,
    walk_preorder,
)
from inferq.models import (
    ColumnView,
    DecisionTree,
    Leaf,
    Linear,
    ModelPipeline,
    OneHot,
    Split,
    StandardScale,
    compile_pipeline,
    route_row,
)
from inferq.parser import parse_sql
from inferq.rules import (
    UNREACHABLE,
    RuleConfig,
    drop_zero_weights,
    eliminate_joins,
    feature_domains,
    fold_onehot,
    inline_tree_expr,
    optimize,
    prune_tree,
    push_predicates,
    rule_config_from_spec,
    split_model_query,
)


def rand_interval_domain(rng) -> object:
    kind = rng.integers(0, 3)
    if kind == 0:
        return TOP
    lo, hi = sorted(rng.uniform(-10, 10, 2))
    if kind == 1:
        return interval(float(lo), float(hi))
    return Constant(float(rng.integers(-8, 9)))


def rand_tree(rng, feats, depth):
    if depth == 0 or rng.random() < 0.25:
        return Leaf((float(rng.integers(0, 50)),))
    return Split(str(rng.choice(feats)), float(rng.integers(-9, 10)),
                 rand_tree(rng, feats, depth - 1), rand_tree(rng, feats, depth - 1))


def tree_grid(tree_root, domains, feats):
    """Exhaustive per-feature candidate grid covering all routing outcomes.

    Candidates: every in-domain threshold of the tree, one point just above
    each, and the domain endpoints.  Features without constraints or splits
    contribute a single point.
    """
    from inferq.analysis import contains
    from inferq.models import tree_features

    thresholds: dict[str, set] = {f: set() for f in feats}

    def collect(node):
        if isinstance(node, Split):
            thresholds[node.feature].add(node.threshold)
            collect(node.left)
            collect(node.right)

    collect(tree_root)
    axes = []
    for f in feats:
        d = domains.get(f, TOP)
        points = set()
        for t in thresholds[f]:
            for candidate in (t, t + 0.5):
                if contains(d, candidate):
                    points.add(candidate)
        if isinstance(d, Constant):
            points.add(d.value)
        elif isinstance(d, Interval):
            if np.isfinite(d.lo) and contains(d, d.lo):
                points.add(d.lo)
            if np.isfinite(d.hi) and contains(d, d.hi):
                points.add(d.hi)
            points.add((max(d.lo, -20) + min(d.hi, 20)) / 2)
        else:
            points.add(0.0)
        points = {p for p in points if contains(d, p)}
        axes.append(sorted(points) or [0.0])
    grids = np.meshgrid(*axes, indexing="ij")
    return np.column_stack([g.ravel() for g in grids])


class TestPruneTree:
    def test_all_top_is_identity_object(self):
        rng = np.random.default_rng(0)
        model = DecisionTree(rand_tree(rng, ["a", "b"], 5))
        assert prune_tree(model, {}) is model

    def test_empty_domain_marks_unreachable(self):
        model = DecisionTree(Split("a", 0.0, Leaf((1.0,)), Leaf((2.0,))))
        assert prune_tree(model, {"a": EMPTY}) is UNREACHABLE

    def test_monotone_and_idempotent(self):
        rng = np.random.default_rng(1)
        for _ in range(30):
            feats = ["a", "b", "c"]
            model = DecisionTree(rand_tree(rng, feats, 6))
            domains = {f: rand_interval_domain(rng) for f in feats}
            pruned = prune_tree(model, domains)
            if pruned is UNREACHABLE:
                continue
            assert pruned.node_count <= model.node_count
            again = prune_tree(pruned, domains)
            assert again is pruned or again.node_count == pruned.node_count

    def test_pruned_equals_original_on_exhaustive_grid(self):
        # Brute-force oracle: enumerate a grid covering every routing
        # outcome inside the domains; routing must agree pointwise.
        rng = np.random.default_rng(2)
        checked = 0
        for _ in range(40):
            feats = ["a", "b", "c", "d"]
            model = DecisionTree(rand_tree(rng, feats, 8))
            domains = {f: rand_interval_domain(rng) for f in feats}
            pruned = prune_tree(model, domains)
            if pruned is UNREACHABLE:
                continue
            grid = tree_grid(model.root, domains, feats)
            for row in grid:
                values = dict(zip(feats, (float(v) for v in row)))
                assert route_row(model.root, values) == route_row(pruned.root, values)
                checked += 1
        assert checked > 1000

    def test_hospital_tree_prunes_pregnant_zero_subtree(self, hospital_ws):
        pipe = hospital_ws.catalog.model("M")
        binding = {n: n for n, _ in pipe.input_columns()}
        fd = feature_domains(pipe, {"pregnant": Constant(1.0)}, binding)
        pruned = prune_tree(pipe.model, fd)
        assert pruned.node_count < pipe.model.node_count
        from inferq.rules import slim_pipeline

        slimmed = slim_pipeline(ModelPipeline(pipe.featurizers, pruned, pipe.output))
        assert "gender" in pipe.used_features()
        assert "gender" not in slimmed.used_features()
        assert "pregnant" not in slimmed.used_features()


def five_cat_linear(weights=None):
    cats = ("JFK", "SEA", "LAX", "ORD", "ATL")
    if weights is None:
        weights = tuple((f"dest={c}", float(i + 1)) for i, c in enumerate(cats))
    weights = weights + (("dist", 0.5),)
    return ModelPipeline((OneHot("dest", cats, "zeros"),),
                         Linear(weights, 1.0), "scores")


def enumerate_rows(pipe, dests, dists):
    compiled = compile_pipeline(pipe)
    names = [n for n, _ in compiled.inputs]
    out = []
    for dest in dests:
        for dist in dists:
            cols = {}
            if "dest" in names:
                cols["dest"] = ColumnView(codes=np.array([0]), categories=[dest])
            if "dist" in names:
                cols["dist"] = ColumnView(values=np.array([dist]))
            out.append(compiled.predict(cols, 1)[0][0, 0])
    return np.array(out)


class TestFoldOnehot:
    def test_constant_folds_into_intercept(self):
        pipe = five_cat_linear()
        folded, notes = fold_onehot(pipe, {"dest": Constant("JFK")}, {"dest": "dest"})
        assert isinstance(folded.model, Linear)
        assert folded.model.intercept == 1.0 + 1.0  # base + JFK weight
        assert [f for f, _ in folded.model.weights] == ["dist"]
        assert not folded.featurizers  # encoder gone entirely
        dists = np.linspace(-2, 2, 9)
        before = enumerate_rows(pipe, ["JFK"], dists)
        after = enumerate_rows(folded, ["JFK"], dists)
        assert np.abs(before - after).max() <= 1e-12

    def test_full_value_set_is_identity(self):
        pipe = five_cat_linear()
        domain = ValueSet(frozenset(["JFK", "SEA", "LAX", "ORD", "ATL"]))
        folded, _ = fold_onehot(pipe, {"dest": domain}, {"dest": "dest"})
        assert folded is pipe

    def test_value_set_shrinks_encoder(self):
        pipe = five_cat_linear()
        domain = ValueSet(frozenset(["JFK", "SEA"]))
        folded, _ = fold_onehot(pipe, {"dest": domain}, {"dest": "dest"})
        enc = folded.featurizers[0]
        assert enc.categories == ("JFK", "SEA")
        assert len(folded.model.weights) == 3  # two encoder outputs + dist
        dists = np.linspace(-2, 2, 7)
        before = enumerate_rows(pipe, ["JFK", "SEA"], dists)
        after = enumerate_rows(folded, ["JFK", "SEA"], dists)
        assert np.abs(before - after).max() <= 1e-12

    def test_constant_resolves_tree_splits_exactly(self):
        tree = DecisionTree(Split("dest=JFK", 0.5,
                                  Leaf((1.0,)),
                                  Split("dist", 3.0, Leaf((2.0,)), Leaf((3.0,)))))
        pipe = ModelPipeline((OneHot("dest", ("JFK", "SEA"), "zeros"),), tree, "scores")
        folded, _ = fold_onehot(pipe, {"dest": Constant("JFK")}, {"dest": "dest"})
        assert isinstance(folded.model.root, Split)
        assert folded.model.root.feature == "dist"
        dists = [1.0, 3.0, 5.0]
        before = enumerate_rows(pipe, ["JFK"], dists)
        after = enumerate_rows(folded, ["JFK"], dists)
        assert (before == after).all()  # tree folds are bit-exact

    def test_error_policy_with_foreign_constant_skips(self):
        pipe = ModelPipeline(
            (OneHot("dest", ("JFK",), "error"),),
            Linear((("dest=JFK", 2.0),), 0.0), "scores")
        folded, notes = fold_onehot(pipe, {"dest": Constant("BOS")}, {"dest": "dest"})
        assert folded is pipe
        assert any("fold skipped" in n for n in notes)


class TestDropZeroWeights:
    def test_sparsity_retention_count(self):
        # 80.96% sparsity over 625 features: retained count is exactly
        # ceil(0.1904 * 625) = 119.
        F, zeros = 625, 506
        weights = tuple(
            (f"f{i}", 0.0 if i < zeros else 1.0 + i) for i in range(F)
        )
        pipe = ModelPipeline((), Linear(weights, 0.0), "scores")
        slim = drop_zero_weights(pipe)
        assert len(slim.model.weights) == 119

    def test_dense_model_unchanged(self):
        pipe = ModelPipeline((), Linear((("a", 1.0), ("b", 2.0)), 0.0), "scores")
        assert drop_zero_weights(pipe) is pipe


class TestPushPredicates:
    def setup_method(self):
        self.catalog = Catalog()
        self.catalog.add_table(TableDecl("l", Schema((
            Column("id", ColType.NUMERIC), Column("a", ColType.NUMERIC),
        ))))
        self.catalog.add_table(TableDecl("r", Schema((
            Column("rid", ColType.NUMERIC), Column("b", ColType.NUMERIC),
        ))))

    def test_single_side_conjunct_moves_below_join(self):
        join = Join(Scan("l"), Scan("r"), (("id", "rid"),))
        plan = Filter(join, Compare(">", ColumnRef("a"), Literal(1.0)))
        out = push_predicates(plan, self.catalog)
        assert isinstance(out, Join)
        assert isinstance(out.left, Filter)

    def test_cross_side_conjunct_stays(self):
        join = Join(Scan("l"), Scan("r"), (("id", "rid"),))
        plan = Filter(join, Compare(">", ColumnRef("a"), ColumnRef("b")))
        out = push_predicates(plan, self.catalog)
        assert isinstance(out, Filter)
        assert isinstance(out.child, Join)

    def test_filter_above_union_copies_into_branches(self):
        union = UnionAll((Scan("l"), Scan("l")))
        plan = Filter(union, Compare(">", ColumnRef("a"), Literal(0.0)))
        out = push_predicates(plan, self.catalog)
        assert isinstance(out, UnionAll)
        assert all(isinstance(b, Filter) for b in out.branches)

    def test_derived_filter_from_single_split_tree(self):
        # Only the right leaf (9.0) satisfies out > 7: every passing row has
        # bp > 140, so that test gets pushed below the model.
        tree = DecisionTree(Split("bp", 140.0, Leaf((2.0,)), Leaf((9.0,))))
        pipe = ModelPipeline((), tree, "scores")
        catalog = single_table_catalog(
            "t", Schema((Column("bp", ColType.NUMERIC),)), {"M": pipe})
        plan = Filter(
            Predict(Scan("t"), "M", pipe, ("bp",), ("out",)),
            Compare(">", ColumnRef("out"), Literal(7.0)),
        )
        notes = []
        out = push_predicates(plan, catalog, notes)
        texts = [render_expr(n.predicate) for n in walk_preorder(out)
                 if isinstance(n, Filter)]
        assert any("bp > 140.0" in t for t in texts)
        assert any("derived" in n for n in notes)

    def test_derived_filter_skipped_for_nullable_column(self):
        tree = DecisionTree(Split("bp", 140.0, Leaf((2.0,)), Leaf((9.0,))))
        pipe = ModelPipeline((), tree, "scores")
        catalog = single_table_catalog(
            "t", Schema((Column("bp", ColType.NUMERIC, nullable=True),)), {"M": pipe})
        plan = Filter(
            Predict(Scan("t"), "M", pipe, ("bp",), ("out",)),
            Compare(">", ColumnRef("out"), Literal(7.0)),
        )
        out = push_predicates(plan, catalog)
        texts = [render_expr(n.predicate) for n in walk_preorder(out)
                 if isinstance(n, Filter)]
        assert not any("bp > 140.0" in t for t in texts)

    def test_no_passing_leaf_derives_false(self):
        tree = DecisionTree(Split("bp", 140.0, Leaf((2.0,)), Leaf((3.0,))))
        pipe = ModelPipeline((), tree, "scores")
        catalog = single_table_catalog(
            "t", Schema((Column("bp", ColType.NUMERIC),)), {"M": pipe})
        plan = Filter(
            Predict(Scan("t"), "M", pipe, ("bp",), ("out",)),
            Compare(">", ColumnRef("out"), Literal(7.0)),
        )
        out = push_predicates(plan, catalog)
        table = numeric_table([("bp", ColType.NUMERIC)], {"bp": [100.0, 150.0]})
        assert execute(out, {"t": table}).row_count == 0


def _fk_catalog(with_fk=True, with_uk=True):
    catalog = Catalog()
    fks = (ForeignKey(("id",), "dim", ("did",)),) if with_fk else ()
    uks = (("did",),) if with_uk else ()
    catalog.add_table(TableDecl("fact", Schema((
        Column("id", ColType.NUMERIC), Column("v", ColType.NUMERIC),
    )), foreign_keys=fks))
    catalog.add_table(TableDecl("dim", Schema((
        Column("did", ColType.NUMERIC), Column("w", ColType.NUMERIC),
    )), unique_keys=uks))
    return catalog


class TestEliminateJoins:
    def _plan(self):
        join = Join(Scan("fact"), Scan("dim"), (("id", "did"),))
        return Project(join, (("v", ColumnRef("v")),))

    def test_eliminates_with_declared_constraints(self):
        catalog = _fk_catalog()
        out = eliminate_joins(self._plan(), catalog)
        assert not any(isinstance(n, Join) for n in walk_preorder(out))

    def test_retained_without_fk(self):
        catalog = _fk_catalog(with_fk=False)
        out = eliminate_joins(self._plan(), catalog)
        assert any(isinstance(n, Join) for n in walk_preorder(out))

    def test_retained_without_unique_key(self):
        catalog = _fk_catalog(with_uk=False)
        out = eliminate_joins(self._plan(), catalog)
        assert any(isinstance(n, Join) for n in walk_preorder(out))

    def test_retained_when_right_side_consumed(self):
        catalog = _fk_catalog()
        join = Join(Scan("fact"), Scan("dim"), (("id", "did"),))
        plan = Project(join, (("v", ColumnRef("v")), ("w", ColumnRef("w"))))
        out = eliminate_joins(plan, catalog)
        assert any(isinstance(n, Join) for n in walk_preorder(out))

    def test_retained_when_right_side_filters(self):
        catalog = _fk_catalog()
        join = Join(Scan("fact"),
                    Filter(Scan("dim"), Compare(">", ColumnRef("w"), Literal(0.0))),
                    (("id", "did"),))
        plan = Project(join, (("v", ColumnRef("v")),))
        out = eliminate_joins(plan, catalog)
        assert any(isinstance(n, Join) for n in walk_preorder(out))

    def test_retained_when_fk_source_nullable(self):
        catalog = Catalog()
        catalog.add_table(TableDecl("fact", Schema((
            Column("id", ColType.NUMERIC, nullable=True),
            Column("v", ColType.NUMERIC),
        )), foreign_keys=(ForeignKey(("id",), "dim", ("did",)),)))
        catalog.add_table(TableDecl("dim", Schema((
            Column("did", ColType.NUMERIC), Column("w", ColType.NUMERIC),
        )), unique_keys=(("did",),)))
        out = eliminate_joins(self._plan(), catalog)
        assert any(isinstance(n, Join) for n in walk_preorder(out))

    def test_elimination_preserves_bag(self):
        catalog = _fk_catalog()
        fact = numeric_table([("id", ColType.NUMERIC), ("v", ColType.NUMERIC)],
                             {"id": [1.0, 2.0, 2.0], "v": [10.0, 20.0, 21.0]})
        dim = numeric_table([("did", ColType.NUMERIC), ("w", ColType.NUMERIC)],
                            {"did": [1.0, 2.0, 3.0], "w": [0.0, 0.0, 0.0]})
        plan = self._plan()
        out = eliminate_joins(plan, catalog)
        assert bags_equal(execute(plan, {"fact": fact, "dim": dim}),
                          execute(out, {"fact": fact, "dim": dim}))


class TestSplitModelQuery:
    def _pipe(self, left_size=1, right_size=7):
        def chain(k):
            if k <= 1:
                return Leaf((float(k),))
            return Split("b", float(k), chain(k - 2), Leaf((float(k),)))

        root = Split("a", 10.0, chain(left_size), chain(right_size))
        return ModelPipeline((), DecisionTree(root), "scores")

    def _catalog(self, pipe, nullable_a=False):
        return single_table_catalog("t", Schema((
            Column("a", ColType.NUMERIC, nullable=nullable_a),
            Column("b", ColType.NUMERIC),
        )), {"M": pipe})

    def _plan(self, pipe):
        return Predict(Scan("t"), "M", pipe, ("a", "b"), ("out",))

    def test_splits_into_disjoint_exhaustive_branches(self):
        pipe = self._pipe()
        catalog = self._catalog(pipe)
        out = split_model_query(self._plan(pipe), catalog, RuleConfig())
        assert isinstance(out, UnionAll)
        rng = np.random.default_rng(0)
        table = numeric_table(
            [("a", ColType.NUMERIC), ("b", ColType.NUMERIC)],
            {"a": rng.uniform(0, 20, 300), "b": rng.uniform(0, 10, 300)},
        )
        left_f = out.branches[0].child.child
        right_f = out.branches[1].child.child
        nl = execute(left_f, {"t": table}).row_count
        nr = execute(right_f, {"t": table}).row_count
        assert nl + nr == 300  # every non-null row lands in exactly one branch
        assert bags_equal(execute(self._plan(pipe), {"t": table}),
                          execute(out, {"t": table}))

    def test_ratio_below_threshold_is_identity(self):
        pipe = self._pipe(left_size=7, right_size=7)
        catalog = self._catalog(pipe)
        plan = self._plan(pipe)
        assert split_model_query(plan, catalog, RuleConfig()) is plan

    def test_onehot_root_feature_skipped(self):
        tree = DecisionTree(Split("dest=JFK", 0.5, Leaf((1.0,)),
                                  Split("b", 1.0,
                                        Split("b", 0.5, Leaf((1.0,)), Leaf((2.0,))),
                                        Leaf((3.0,)))))
        pipe = ModelPipeline((OneHot("dest", ("JFK", "SEA"), "zeros"),), tree, "scores")
        catalog = single_table_catalog("t", Schema((
            Column("dest", ColType.CATEGORICAL), Column("b", ColType.NUMERIC),
        )), {"M": pipe})
        plan = Predict(Scan("t"), "M", pipe, ("dest", "b"), ("out",))
        assert split_model_query(plan, catalog, RuleConfig()) is plan

    def test_nullable_split_column_skipped_under_error_policy(self):
        pipe = self._pipe()
        catalog = self._catalog(pipe, nullable_a=True)
        plan = self._plan(pipe)
        notes = []
        out = split_model_query(plan, catalog, RuleConfig(null_policy="error"),
                                notes=notes)
        assert out is plan
        assert any("nullable" in n for n in notes)
        out = split_model_query(plan, catalog, RuleConfig(null_policy="drop"))
        assert isinstance(out, UnionAll)


class TestInlineTree:
    def test_single_split_case_text(self):
        tree = DecisionTree(Split("bp", 140.0, Leaf((2.0,)), Leaf((9.0,))))
        expr = inline_tree_expr(tree, "scores", {})
        assert render_expr(expr) == "CASE WHEN bp <= 140.0 THEN 2.0 ELSE 9.0 END"

    def test_single_leaf_is_literal(self):
        expr = inline_tree_expr(DecisionTree(Leaf((5.0,))), "scores", {})
        assert expr == Literal(5.0)

    def test_label_leaves_become_argmax_indexes(self):
        tree = DecisionTree(Split("x", 0.0, Leaf((1.0, 9.0)), Leaf((9.0, 1.0))))
        expr = inline_tree_expr(tree, "label", {})
        assert render_expr(expr) == "CASE WHEN x <= 0.0 THEN 1.0 ELSE 0.0 END"

    def test_case_matches_tree_bit_exactly(self):
        rng = np.random.default_rng(4)
        feats = ["a", "b"]
        tree = DecisionTree(rand_tree(rng, feats, 6))
        pipe = ModelPipeline((), tree, "scores")
        catalog = single_table_catalog("t", Schema((
            Column("a", ColType.NUMERIC), Column("b", ColType.NUMERIC),
        )), {"M": pipe})
        table = numeric_table(
            [("a", ColType.NUMERIC), ("b", ColType.NUMERIC)],
            {"a": rng.uniform(-12, 12, 5000), "b": rng.uniform(-12, 12, 5000)},
        )
        direct = Predict(Scan("t"), "M", pipe, ("a", "b"), ("out",))
        expr = inline_tree_expr(tree, "scores", {"a": "a", "b": "b"})
        inlined = Project(Scan("t"), (
            ("a", ColumnRef("a")), ("b", ColumnRef("b")), ("out", expr),
        ))
        got = execute(inlined, {"t": table}).columns["out"].values
        exp = execute(direct, {"t": table}).columns["out"].values
        assert (got == exp).all()


class TestOptimizeDriver:
    def test_all_rules_off_is_identity(self, hospital_ws, hospital_query):
        plan = parse_sql(hospital_query, hospital_ws.catalog)
        result = optimize(plan, hospital_ws.catalog, rule_config_from_spec("none"),
                          hospital_ws.table_stats)
        assert result.plan is plan
        assert result.traces == []
        assert result.registered == {}

    def test_udf_blocks_domains(self):
        pipe = ModelPipeline(
            (), DecisionTree(Split("a", 0.0, Leaf((1.0,)), Leaf((2.0,)))), "scores")
        catalog = single_table_catalog(
            "t", Schema((Column("a", ColType.NUMERIC),)), {"M": pipe})
        plan = Predict(
            Udf(Filter(Scan("t"), Compare("=", ColumnRef("a"), Literal(1.0))), "blk"),
            "M", pipe, ("a",), ("out",),
        )
        config = RuleConfig(rules=frozenset({"prune_tree", "fold_onehot"}))
        result = optimize(plan, catalog, config)
        predicts = [n for n in walk_preorder(result.plan) if isinstance(n, Predict)]
        assert predicts[0].pipeline is pipe  # model untouched past the Udf

    def test_contradictory_filter_empties_branch(self):
        pipe = ModelPipeline(
            (), DecisionTree(Split("a", 0.0, Leaf((1.0,)), Leaf((2.0,)))), "scores")
        catalog = single_table_catalog(
            "t", Schema((Column("a", ColType.NUMERIC),)), {"M": pipe})
        pred = And((
            Compare("<", ColumnRef("a"), Literal(1.0)),
            Compare(">", ColumnRef("a"), Literal(2.0)),
        ))
        plan = Predict(Filter(Scan("t"), pred), "M", pipe, ("a",), ("out",))
        config = RuleConfig(rules=frozenset({"prune_tree"}))
        result = optimize(plan, catalog, config)
        table = numeric_table([("a", ColType.NUMERIC)], {"a": [0.0, 3.0]})
        assert execute(result.plan, {"t": table}).row_count == 0

    def test_registered_models_resolve_in_catalog(self, hospital_ws, hospital_query):
        plan = parse_sql(hospital_query, hospital_ws.catalog)
        result = optimize(plan, hospital_ws.catalog, table_stats=hospital_ws.table_stats)
        for node in walk_preorder(result.plan):
            if isinstance(node, (Predict, TensorEval)):
                assert hospital_ws.catalog.has_model(node.model)
        for name in result.registered:
            assert hospital_ws.catalog.has_model(name)

    def test_plan_validates_after_every_stage(self, hospital_ws, hospital_query):
        plan = parse_sql(hospital_query, hospital_ws.catalog)
        result = optimize(plan, hospital_ws.catalog, table_stats=hospital_ws.table_stats)
        assert validate_plan(result.plan, hospital_ws.catalog) == []


class TestMasterEquivalence:
    """execute(optimize(plan)) equals execute(plan) on randomized instances."""

    def test_randomized_instances(self):
        rng = np.random.default_rng(2024)
        for trial in range(12):
            n = 400
            feats = ["x", "y", "z"]
            table = numeric_table(
                [("id", ColType.NUMERIC)] + [(f, ColType.NUMERIC) for f in feats]
                + [("s", ColType.CATEGORICAL)],
                {
                    "id": np.arange(n, dtype=float),
                    "x": rng.integers(-10, 11, n).astype(float),
                    "y": rng.integers(-10, 11, n).astype(float),
                    "z": rng.integers(-10, 11, n).astype(float),
                    "s": rng.choice(["a", "b", "c"], n),
                },
            )
            if rng.random() < 0.5:
                model = DecisionTree(rand_tree(rng, feats, 7))
                pipe = ModelPipeline((), model, "scores")
            else:
                cats = ("a", "b", "c")
                weights = tuple((f"s={c}", float(rng.normal())) for c in cats) + \
                    tuple((f, float(rng.normal())) for f in feats)
                pipe = ModelPipeline((OneHot("s", cats, "zeros"),),
                                     Linear(weights, float(rng.normal())), "scores")
            catalog = single_table_catalog("t", table.schema, {"M": pipe})
            args = ", ".join(n for n, _ in pipe.input_columns())
            where = []
            if rng.random() < 0.7:
                col = str(rng.choice(feats))
                op = str(rng.choice(["<", "<=", ">", ">=", "="]))
                where.append(f"{col} {op} {rng.integers(-8, 9)}")
            if rng.random() < 0.4:
                where.append("s = 'a'")
            if rng.random() < 0.6:
                where.append(f"PREDICT(M, {args}) > {rng.integers(-3, 30)}")
            sql = f"SELECT id, PREDICT(M, {args}) AS p FROM t"
            if where:
                sql += " WHERE " + " AND ".join(where)
            plan = parse_sql(sql, catalog)
            result = optimize(plan, catalog, table_stats={"t": table.stats})
            naive = execute(plan, {"t": table}, ExecConfig(threads=1))
            opt = execute(result.plan, {"t": table}, ExecConfig(threads=1))
            assert naive.row_count == opt.row_count, f"trial {trial}"
            a = sorted_rows(naive)
            b = sorted_rows(opt)
            for ra, rb in zip(a, b):
                assert ra[0] == rb[0]
                assert abs(ra[1] - rb[1]) <= 1e-9 * max(1.0, abs(ra[1]))
