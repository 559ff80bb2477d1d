"""Abstract domains: statistics, predicate derivation, plan propagation."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import numeric_table, single_table_catalog
from inferq.analysis import (
    EMPTY,
    TOP,
    Constant,
    Interval,
    ValueSet,
    collect_stats,
    contains,
    derive_domains,
    interval,
    is_statically_empty,
    join,
    meet,
    propagate_domains,
    stats_domains,
    value_set,
)
from inferq.catalog import Catalog, TableDecl
from inferq.executor import execute
from inferq.ir import (
    And,
    ColType,
    Column,
    ColumnRef,
    Compare,
    Filter,
    InList,
    Join as JoinNode,
    Literal,
    Predict,
    Project,
    Scan,
    Schema,
    Udf,
    UnionAll,
)
from inferq.models import DecisionTree, Leaf, Linear, ModelPipeline, Split


class TestLattice:
    def test_interval_canonicalization(self):
        assert interval(3.0, 3.0) == Constant(3.0)
        assert interval(3.0, 2.0) is EMPTY
        assert interval(3.0, 3.0, hi_closed=False) is EMPTY
        assert interval() is TOP

    def test_value_set_canonicalization(self):
        assert value_set(["x"]) == Constant("x")
        assert value_set([]) is EMPTY

    def test_meet_intervals_by_hand(self):
        # x <= 3 AND x <= 5  ->  (-inf, 3]
        a = interval(hi=3.0)
        b = interval(hi=5.0)
        got = meet(a, b)
        assert got == Interval(-math.inf, 3.0, False, True)

    def test_meet_constant_with_interval(self):
        assert meet(Constant(2.0), interval(1.0, 3.0)) == Constant(2.0)
        assert meet(Constant(9.0), interval(1.0, 3.0)) is EMPTY

    def test_meet_value_sets(self):
        a = value_set(["a", "b", "c"])
        b = value_set(["b", "c", "d"])
        assert meet(a, b) == ValueSet(frozenset(["b", "c"]))

    def test_meet_is_sound(self):
        a = interval(0.0, 10.0)
        b = interval(5.0, 20.0, lo_closed=False)
        m = meet(a, b)
        for v in (0.0, 4.9, 5.0, 5.1, 10.0, 10.1, 20.0):
            assert contains(m, v) == (contains(a, v) and contains(b, v))

    def test_join_widens(self):
        a = interval(hi=3.0)
        b = interval(lo=3.0, lo_closed=False)
        assert join(a, b) is TOP  # complementary intervals cover everything

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-50, 50), st.floats(-50, 50), st.floats(-50, 50),
           st.floats(-50, 50), st.floats(-60, 60))
    def test_meet_join_soundness_property(self, lo1, hi1, lo2, hi2, probe):
        a = interval(min(lo1, hi1), max(lo1, hi1))
        b = interval(min(lo2, hi2), max(lo2, hi2))
        m = meet(a, b)
        j = join(a, b)
        both = contains(a, probe) and contains(b, probe)
        either = contains(a, probe) or contains(b, probe)
        assert contains(m, probe) == both
        if either:
            assert contains(j, probe)


class TestCollectStats:
    def test_constant_column(self):
        t = numeric_table([("v", ColType.NUMERIC)], {"v": [42.0] * 10})
        stats = collect_stats(t)
        assert stats["v"].min == 42.0 and stats["v"].max == 42.0

    def test_age_fixture_by_hand(self):
        # 5-row fixture scanned by hand: minimum 36, maximum 80.
        t = numeric_table([("age", ColType.NUMERIC)],
                          {"age": [41.0, 36.0, 77.0, 80.0, 52.0]})
        stats = collect_stats(t)
        assert stats["age"].min == 36.0
        assert stats["age"].max == 80.0
        assert stats["age"].null_count == 0

    def test_distinct_cap_overflow(self):
        values = [f"v{i}" for i in range(300)]
        t = numeric_table([("s", ColType.CATEGORICAL)], {"s": values})
        stats = collect_stats(t)
        assert stats["s"].distinct_overflowed
        assert stats["s"].distinct is None

    def test_distinct_within_cap(self):
        t = numeric_table([("s", ColType.CATEGORICAL)], {"s": ["a", "b", "a"]})
        stats = collect_stats(t)
        assert stats["s"].distinct == frozenset(["a", "b"])


class TestDeriveDomains:
    def test_equality_gives_constant(self):
        pred = Compare("=", ColumnRef("pregnant"), Literal(1.0))
        assert derive_domains(pred) == {"pregnant": Constant(1.0)}

    def test_stats_only_all_ages_above_35(self):
        t = numeric_table([("age", ColType.NUMERIC)],
                          {"age": [41.0, 36.0, 77.0, 80.0, 52.0]})
        domains = derive_domains(None, collect_stats(t))
        assert domains["age"] == Interval(36.0, 80.0, True, True)

    def test_meet_of_conjuncts(self):
        pred = And((
            Compare("<=", ColumnRef("x"), Literal(3.0)),
            Compare("<=", ColumnRef("x"), Literal(5.0)),
        ))
        assert derive_domains(pred) == {"x": Interval(-math.inf, 3.0, False, True)}

    def test_contradiction_reports_empty(self):
        pred = And((
            Compare("<", ColumnRef("x"), Literal(1.0)),
            Compare(">", ColumnRef("x"), Literal(2.0)),
        ))
        domains = derive_domains(pred)
        assert domains["x"] is EMPTY
        assert is_statically_empty(domains)

    def test_unsupported_conjunct_maps_to_top(self):
        pred = Compare("=", ColumnRef("x"), ColumnRef("y"))
        assert derive_domains(pred) == {}

    def test_in_list_gives_value_set(self):
        pred = InList(ColumnRef("s"), (Literal("a"), Literal("b")))
        assert derive_domains(pred) == {"s": ValueSet(frozenset(["a", "b"]))}

    def test_not_equal_needs_stats(self):
        pred = Compare("!=", ColumnRef("s"), Literal("a"))
        assert derive_domains(pred) == {}
        t = numeric_table([("s", ColType.CATEGORICAL)], {"s": ["a", "b", "c"]})
        domains = derive_domains(pred, collect_stats(t))
        assert domains["s"] == ValueSet(frozenset(["b", "c"]))

    def test_nullable_stats_do_not_contribute(self):
        t = numeric_table([("age", ColType.NUMERIC)], {"age": [40.0, 50.0]})
        t.columns["age"].validity = np.array([True, False])
        t.stats = collect_stats(t)
        assert stats_domains(t.stats) == {}

    def test_monotonicity_adding_conjunct_never_widens(self):
        base = Compare("<=", ColumnRef("x"), Literal(10.0))
        extra = And((base, Compare(">", ColumnRef("x"), Literal(2.0))))
        d1 = derive_domains(base)["x"]
        d2 = derive_domains(extra)["x"]
        for v in np.linspace(-5, 15, 101):
            if contains(d2, float(v)):
                assert contains(d1, float(v))

    def test_top_stats_equals_no_stats(self):
        pred = Compare("<=", ColumnRef("x"), Literal(3.0))
        assert derive_domains(pred, {}) == derive_domains(pred)


def _predict_plan(catalog, pipe, child):
    return Predict(child, "M", pipe, ("x",), ("out",))


class TestPropagate:
    def setup_method(self):
        self.schema = Schema((
            Column("x", ColType.NUMERIC),
            Column("y", ColType.NUMERIC),
        ))
        self.pipe = ModelPipeline((), Linear((("x", 1.0),), 0.0), "scores")
        self.catalog = single_table_catalog("t", self.schema, {"M": self.pipe})

    def test_filter_below_predict_is_seen(self):
        child = Filter(Scan("t"), Compare("=", ColumnRef("x"), Literal(1.0)))
        plan = _predict_plan(self.catalog, self.pipe, child)
        domains = propagate_domains(plan, self.catalog)
        assert domains[id(plan)]["x"] == Constant(1.0)

    def test_projected_away_column_is_absent(self):
        child = Project(
            Filter(Scan("t"), Compare("=", ColumnRef("y"), Literal(2.0))),
            (("x", ColumnRef("x")),),
        )
        pipe = ModelPipeline((), Linear((("x", 1.0),), 0.0), "scores")
        plan = Predict(child, "M", pipe, ("x",), ("out",))
        domains = propagate_domains(plan, self.catalog)
        assert "y" not in domains[id(plan)]

    def test_union_of_complementary_intervals_is_top(self):
        left = Filter(Scan("t"), Compare("<=", ColumnRef("x"), Literal(3.0)))
        right = Filter(Scan("t"), Compare(">", ColumnRef("x"), Literal(3.0)))
        union = UnionAll((left, right))
        plan = _predict_plan(self.catalog, self.pipe, union)
        domains = propagate_domains(plan, self.catalog)
        assert "x" not in domains[id(plan)]

    def test_flow_stops_at_udf(self):
        child = Udf(
            Filter(Scan("t"), Compare("=", ColumnRef("x"), Literal(1.0))),
            "opaque",
        )
        plan = _predict_plan(self.catalog, self.pipe, child)
        domains = propagate_domains(plan, self.catalog)
        assert domains[id(plan)] == {}

    def test_join_keys_unify_domains(self):
        catalog = Catalog()
        catalog.add_table(TableDecl("l", Schema((Column("k", ColType.NUMERIC),))))
        catalog.add_table(TableDecl("r", Schema((
            Column("rk", ColType.NUMERIC), Column("v", ColType.NUMERIC),
        ))))
        pipe = ModelPipeline((), Linear((("v", 1.0),), 0.0), "scores")
        catalog.add_model("M", pipe)
        left = Filter(Scan("l"), Compare("=", ColumnRef("k"), Literal(5.0)))
        plan = Predict(
            JoinNode(left, Scan("r"), (("k", "rk"),)), "M", pipe, ("v",), ("out",)
        )
        domains = propagate_domains(plan, catalog)
        assert domains[id(plan)]["rk"] == Constant(5.0)

    def test_rename_through_project(self):
        child = Project(
            Filter(Scan("t"), Compare("=", ColumnRef("x"), Literal(1.0))),
            (("renamed", ColumnRef("x")), ("x", ColumnRef("y"))),
        )
        pipe = ModelPipeline((), Linear((("x", 1.0),), 0.0), "scores")
        plan = Predict(child, "M", pipe, ("x",), ("out",))
        domains = propagate_domains(plan, self.catalog)
        env = domains[id(plan)]
        assert env.get("renamed") == Constant(1.0)
        assert "x" not in env  # new x comes from y, unknown


class TestSoundnessAgainstExecution:
    """Every row that actually reaches a Predict lies inside its domains."""

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10_000))
    def test_random_plans_and_data(self, seed):
        rng = np.random.default_rng(seed)
        n = 64
        table = numeric_table(
            [("x", ColType.NUMERIC), ("y", ColType.NUMERIC), ("s", ColType.CATEGORICAL)],
            {
                "x": rng.integers(-5, 6, n).astype(float),
                "y": rng.integers(-5, 6, n).astype(float),
                "s": rng.choice(["a", "b", "c"], n),
            },
        )
        schema = table.schema
        pipe = ModelPipeline((), Linear((("x", 1.0), ("y", 1.0)), 0.0), "scores")
        catalog = single_table_catalog("t", schema, {"M": pipe})

        atoms = []
        for _ in range(rng.integers(0, 4)):
            col = rng.choice(["x", "y"])
            op = rng.choice(["<", "<=", ">", ">=", "="])
            atoms.append(Compare(str(op), ColumnRef(str(col)),
                                 Literal(float(rng.integers(-4, 5)))))
        if rng.random() < 0.4:
            atoms.append(InList(ColumnRef("s"), (Literal("a"), Literal("b"))))
        child = Scan("t")
        if atoms:
            child = Filter(child, atoms[0] if len(atoms) == 1 else And(tuple(atoms)))
        plan = Predict(child, "M", pipe, ("x", "y"), ("out",))

        domains = propagate_domains(plan, catalog, {"t": table.stats})
        env = domains[id(plan)]
        reaching = execute(child, {"t": table})
        for row in reaching.rows():
            for col, value in zip(reaching.schema.names, row):
                if col in env:
                    assert contains(env[col], value), (col, value, env[col])
