"""Per-column abstract domains derived from predicates and table statistics.

The domain lattice is deliberately simple: numeric columns get intervals,
categorical columns get value sets, and a single value of either kind is
canonicalized to `Constant`.  `TOP` means "no information", `EMPTY` means the
conjunction is contradictory (the plan is statically empty at that point).
Everything here is pure; soundness means every row that satisfies the
predicate (and belongs to the stats' table) lies inside its column's domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import TYPE_CHECKING, Union

from .ir import (
    And,
    ColType,
    ColumnRef,
    Compare,
    Filter,
    InList,
    Join,
    Literal,
    PlanNode,
    Predict,
    Project,
    Scan,
    ScalarExpr,
    Schema,
    TensorEval,
    Udf,
    UnionAll,
    join_output_columns,
    output_schema,
)

if TYPE_CHECKING:
    from .catalog import Catalog
    from .executor import Table

DISTINCT_CAP = 256


class _Top:
    def __repr__(self):
        return "TOP"


class _Empty:
    def __repr__(self):
        return "EMPTY"


TOP = _Top()
EMPTY = _Empty()


@dataclass(frozen=True)
class Interval:
    """Numeric interval; infinite endpoints use +-inf with open bounds."""

    lo: float
    hi: float
    lo_closed: bool = True
    hi_closed: bool = True

    def __repr__(self):
        l = "[" if self.lo_closed else "("
        r = "]" if self.hi_closed else ")"
        return f"{l}{self.lo}, {self.hi}{r}"


@dataclass(frozen=True)
class ValueSet:
    values: frozenset

    def __repr__(self):
        return "{" + ", ".join(repr(v) for v in sorted(self.values, key=repr)) + "}"


@dataclass(frozen=True)
class Constant:
    value: Union[float, str]

    def __repr__(self):
        return f"Constant({self.value!r})"


Domain = Union[Interval, ValueSet, Constant, _Top, _Empty]


def interval(lo=-math.inf, hi=math.inf, lo_closed=True, hi_closed=True) -> Domain:
    """Canonicalizing constructor: rejects empty ranges, collapses points."""
    if math.isinf(lo):
        lo_closed = False
    if math.isinf(hi):
        hi_closed = False
    if lo > hi:
        return EMPTY
    if lo == hi:
        if lo_closed and hi_closed:
            return Constant(lo)
        return EMPTY
    if math.isinf(lo) and math.isinf(hi):
        return TOP
    return Interval(lo, hi, lo_closed, hi_closed)


def value_set(values) -> Domain:
    vs = frozenset(values)
    if not vs:
        return EMPTY
    if len(vs) == 1:
        return Constant(next(iter(vs)))
    return ValueSet(vs)


def _norm_value(v):
    """Domain values: booleans and ints live on the numeric axis as floats."""
    if isinstance(v, bool):
        return 1.0 if v else 0.0
    if isinstance(v, int):
        return float(v)
    return v


def contains(domain: Domain, value) -> bool:
    value = _norm_value(value)
    if domain is TOP:
        return True
    if domain is EMPTY:
        return False
    if isinstance(domain, Constant):
        return value == domain.value
    if isinstance(domain, ValueSet):
        return value in domain.values
    if not isinstance(value, (int, float)):
        return False
    if value < domain.lo or (value == domain.lo and not domain.lo_closed):
        return False
    if value > domain.hi or (value == domain.hi and not domain.hi_closed):
        return False
    return True


def _as_interval(d: Domain) -> Interval | None:
    if isinstance(d, Interval):
        return d
    if isinstance(d, Constant) and isinstance(d.value, float):
        return Interval(d.value, d.value, True, True)
    return None


def meet(a: Domain, b: Domain) -> Domain:
    """Greatest lower bound: contains exactly the values in both."""
    if a is TOP:
        return b
    if b is TOP:
        return a
    if a is EMPTY or b is EMPTY:
        return EMPTY
    # Set-like against anything: filter by membership in the other domain.
    for this, other in ((a, b), (b, a)):
        if isinstance(this, (ValueSet, Constant)):
            vals = this.values if isinstance(this, ValueSet) else frozenset([this.value])
            return value_set(v for v in vals if contains(other, v))
    ia, ib = _as_interval(a), _as_interval(b)
    assert ia is not None and ib is not None
    if ia.lo > ib.lo or (ia.lo == ib.lo and not ia.lo_closed):
        lo, lo_closed = ia.lo, ia.lo_closed
    else:
        lo, lo_closed = ib.lo, ib.lo_closed
    if ia.hi < ib.hi or (ia.hi == ib.hi and not ia.hi_closed):
        hi, hi_closed = ia.hi, ia.hi_closed
    else:
        hi, hi_closed = ib.hi, ib.hi_closed
    return interval(lo, hi, lo_closed, hi_closed)


def join(a: Domain, b: Domain) -> Domain:
    """Least upper bound (may over-approximate the union; always sound)."""
    if a is EMPTY:
        return b
    if b is EMPTY:
        return a
    if a is TOP or b is TOP:
        return TOP
    set_like = lambda d: isinstance(d, (ValueSet, Constant))
    if set_like(a) and set_like(b):
        va = a.values if isinstance(a, ValueSet) else frozenset([a.value])
        vb = b.values if isinstance(b, ValueSet) else frozenset([b.value])
        merged = va | vb
        if len(merged) > DISTINCT_CAP:
            return TOP
        if all(isinstance(v, float) for v in merged) and len(merged) > 8:
            # Large numeric sets widen to their hull.
            return interval(min(merged), max(merged))
        return value_set(merged)
    ia, ib = _as_interval(a), _as_interval(b)
    if ia is None or ib is None:
        # Mixed categorical/numeric shapes (or categorical vs interval).
        if isinstance(a, ValueSet) and all(isinstance(v, float) for v in a.values):
            ia = _hull(a)
        if isinstance(b, ValueSet) and all(isinstance(v, float) for v in b.values):
            ib = _hull(b)
        if ia is None or ib is None:
            return TOP
    if ia.lo < ib.lo or (ia.lo == ib.lo and ia.lo_closed):
        lo, lo_closed = ia.lo, ia.lo_closed
    else:
        lo, lo_closed = ib.lo, ib.lo_closed
    if ia.hi > ib.hi or (ia.hi == ib.hi and ia.hi_closed):
        hi, hi_closed = ia.hi, ia.hi_closed
    else:
        hi, hi_closed = ib.hi, ib.hi_closed
    return interval(lo, hi, lo_closed, hi_closed)


def _hull(vs: ValueSet) -> Interval:
    return Interval(min(vs.values), max(vs.values), True, True)


def map_affine(domain: Domain, scale: float, offset: float) -> Domain:
    """Image of a domain under x -> x*scale + offset, scale > 0."""
    assert scale > 0
    if domain is TOP or domain is EMPTY:
        return domain
    if isinstance(domain, Constant):
        if not isinstance(domain.value, float):
            return TOP
        return Constant(domain.value * scale + offset)
    if isinstance(domain, ValueSet):
        if not all(isinstance(v, float) for v in domain.values):
            return TOP
        return value_set(v * scale + offset for v in domain.values)
    lo = domain.lo * scale + offset if not math.isinf(domain.lo) else -math.inf
    hi = domain.hi * scale + offset if not math.isinf(domain.hi) else math.inf
    return interval(lo, hi, domain.lo_closed, domain.hi_closed)


# ---------------------------------------------------------------------------
# Statistics
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ColumnStats:
    min: float | None = None
    max: float | None = None
    distinct: frozenset | None = None  # categorical only, None once overflowed
    distinct_overflowed: bool = False
    null_count: int = 0
    row_count: int = 0


TableStats = dict  # column name -> ColumnStats


def collect_stats(table: "Table", cap: int = DISTINCT_CAP) -> TableStats:
    """Exact per-column min/max, distinct values (capped) and null counts."""
    import numpy as np

    stats: TableStats = {}
    for col in table.schema.columns:
        data = table.columns[col.name]
        validity = data.validity
        nulls = 0 if validity is None else int((~validity).sum())
        n = table.row_count
        if col.type == ColType.CATEGORICAL:
            codes = data.codes if validity is None else data.codes[validity]
            uniq = np.unique(codes)
            if len(uniq) > cap:
                stats[col.name] = ColumnStats(None, None, None, True, nulls, n)
            else:
                values = frozenset(data.categories[int(c)] for c in uniq)
                stats[col.name] = ColumnStats(None, None, values, False, nulls, n)
        else:
            vals = data.values if validity is None else data.values[validity]
            if len(vals) == 0:
                stats[col.name] = ColumnStats(None, None, None, False, nulls, n)
            else:
                stats[col.name] = ColumnStats(
                    float(vals.min()), float(vals.max()), None, False, nulls, n
                )
    return stats


def stats_domains(stats: TableStats) -> dict[str, Domain]:
    """Domains implied by exact statistics.

    Only columns with zero nulls contribute: a NULL escapes any interval, so
    stats-derived constraints would be unsound for nullable data.
    """
    out: dict[str, Domain] = {}
    for name, cs in stats.items():
        if cs.null_count != 0 or cs.row_count == 0:
            continue
        if cs.distinct is not None and not cs.distinct_overflowed:
            out[name] = value_set(cs.distinct)
        elif cs.min is not None:
            out[name] = interval(cs.min, cs.max)
    return {k: v for k, v in out.items() if v is not TOP}


def stats_to_json(stats: TableStats) -> dict:
    out = {}
    for name, cs in stats.items():
        entry: dict = {"null_count": cs.null_count, "row_count": cs.row_count}
        if cs.min is not None:
            entry["min"] = cs.min
            entry["max"] = cs.max
        if cs.distinct is not None:
            entry["distinct"] = sorted(cs.distinct, key=repr)
        if cs.distinct_overflowed:
            entry["distinct_overflowed"] = True
        out[name] = entry
    return out


# ---------------------------------------------------------------------------
# Domains from predicates
# ---------------------------------------------------------------------------

_MIRROR = {"<": ">", "<=": ">=", ">": "<", ">=": "<=", "=": "=", "!=": "!="}


def _atom_domain(op: str, value) -> Domain:
    value = _norm_value(value)
    if op == "=":
        return Constant(value)
    if not isinstance(value, float):
        return TOP  # ordering over categoricals carries no domain info
    if op == "<":
        return interval(hi=value, hi_closed=False)
    if op == "<=":
        return interval(hi=value, hi_closed=True)
    if op == ">":
        return interval(lo=value, lo_closed=False)
    if op == ">=":
        return interval(lo=value, lo_closed=True)
    return TOP  # != is representable only with stats (handled by the caller)


def conjuncts(pred: ScalarExpr) -> list[ScalarExpr]:
    if isinstance(pred, And):
        out: list[ScalarExpr] = []
        for item in pred.items:
            out.extend(conjuncts(item))
        return out
    return [pred]


def derive_domains(
    predicate: ScalarExpr | None, stats: TableStats | None = None
) -> dict[str, Domain]:
    """Sound per-column domains for rows satisfying a conjunctive predicate.

    Unsupported conjuncts (disjunctions, multi-column atoms, arithmetic)
    contribute nothing.  A contradiction yields an EMPTY entry for the
    affected column, signalling a statically empty plan.
    """
    domains: dict[str, Domain] = {}
    if stats is not None:
        domains.update(stats_domains(stats))

    def narrow(col: str, d: Domain):
        domains[col] = meet(domains.get(col, TOP), d)

    if predicate is not None:
        for atom in conjuncts(predicate):
            if isinstance(atom, Compare):
                left, right, op = atom.left, atom.right, atom.op
                if isinstance(left, Literal) and isinstance(right, ColumnRef):
                    left, right, op = right, left, _MIRROR[op]
                if not (isinstance(left, ColumnRef) and isinstance(right, Literal)):
                    continue
                if op == "!=":
                    # Only expressible by subtracting from a known finite set.
                    current = domains.get(left.name, TOP)
                    if isinstance(current, (ValueSet, Constant)):
                        vals = (current.values if isinstance(current, ValueSet)
                                else frozenset([current.value]))
                        narrow(left.name, value_set(vals - {_norm_value(right.value)}))
                    continue
                narrow(left.name, _atom_domain(op, right.value))
            elif isinstance(atom, InList) and isinstance(atom.item, ColumnRef):
                narrow(atom.item.name, value_set(_norm_value(v.value) for v in atom.values))
            # anything else: no information (maps to TOP)

    return {k: v for k, v in domains.items() if v is not TOP}


def is_statically_empty(domains: dict[str, Domain]) -> bool:
    return any(d is EMPTY for d in domains.values())


# ---------------------------------------------------------------------------
# Plan-wide propagation
# ---------------------------------------------------------------------------


def propagate_domains(
    plan: PlanNode,
    catalog: "Catalog",
    table_stats: dict[str, TableStats] | None = None,
) -> dict[int, dict[str, Domain]]:
    """Domain environment seen by every Predict/TensorEval node's input.

    Domains originate at scans (statistics) and filters, flow through
    projections (renaming), joins (key unification) and unions (widening),
    and stop at Udf nodes.  Keys of the result are `id(node)`.
    """
    table_stats = table_stats or {}
    result: dict[int, dict[str, Domain]] = {}
    memo: dict[int, dict[str, Domain]] = {}

    def env_of(node: PlanNode) -> dict[str, Domain]:
        if id(node) in memo:
            return memo[id(node)]
        env = _compute_env(node)
        memo[id(node)] = env
        return env

    def _compute_env(node: PlanNode) -> dict[str, Domain]:
        if isinstance(node, Scan):
            stats = table_stats.get(node.table)
            return stats_domains(stats) if stats else {}
        if isinstance(node, Filter):
            child = env_of(node.child)
            derived = derive_domains(node.predicate)
            env = dict(child)
            for col, d in derived.items():
                env[col] = meet(env.get(col, TOP), d)
            return env
        if isinstance(node, Project):
            child = env_of(node.child)
            env: dict[str, Domain] = {}
            for name, expr in node.columns:
                if isinstance(expr, ColumnRef) and expr.name in child:
                    env[name] = child[expr.name]
                elif isinstance(expr, Literal):
                    env[name] = Constant(_norm_value(expr.value))
            return env
        if isinstance(node, Join):
            left = env_of(node.left)
            right = env_of(node.right)
            right_schema = output_schema(node.right, catalog)
            left_schema = output_schema(node.left, catalog)
            _, rename = join_output_columns(left_schema, right_schema)
            env = dict(left)
            for col, d in right.items():
                env[rename[col]] = d
            for lk, rk in node.keys:
                unified = meet(env.get(lk, TOP), env.get(rename[rk], TOP))
                if unified is not TOP:
                    env[lk] = unified
                    env[rename[rk]] = unified
            return env
        if isinstance(node, UnionAll):
            branches = [env_of(b) for b in node.branches]
            common = set(branches[0])
            for b in branches[1:]:
                common &= set(b)
            env = {}
            for col in common:
                d = branches[0][col]
                for b in branches[1:]:
                    d = join(d, b[col])
                if d is not TOP:
                    env[col] = d
            return env
        if isinstance(node, (Predict, TensorEval)):
            env = env_of(node.child)
            result[id(node)] = dict(env)
            return env  # outputs carry no information (TOP)
        if isinstance(node, Udf):
            env_of(node.child)  # still visit predicts below
            return {}
        raise AssertionError(f"unexpected node {node!r}")

    env_of(plan)
    # Visit any predicts not reached through the memo (shared subtrees).
    for n in plan_predicts(plan):
        if id(n) not in result:
            result[id(n)] = dict(env_of(n.child))
    return result


def plan_predicts(plan: PlanNode):
    from .ir import walk_preorder

    return [n for n in walk_preorder(plan) if isinstance(n, (Predict, TensorEval))]
