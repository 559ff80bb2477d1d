"""Render an optimized plan back to SQL text in the frontend grammar.

Emitted text reparses (with the same catalog, which carries any derived
models the optimizer registered) into a plan structurally equivalent to the
source.  "Structurally equivalent" is the canonical-signature relation
implemented here: since the grammar has one flat FROM..WHERE scope per
SELECT, pushed-down filters and pure narrowing projections cannot keep their
positions through a round trip, so equivalence compares, per UNION branch,
the join chain, the multiset of WHERE conjuncts, the model invocations and
the effective output expressions (computed columns substituted through).
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .catalog import Catalog
from .errors import SqlEmitError
from .ir import (
    And,
    Arith,
    CaseWhen,
    ColumnRef,
    Compare,
    Filter,
    InList,
    Join,
    Literal,
    Not,
    Or,
    PlanNode,
    Predict,
    Project,
    Scan,
    ScalarExpr,
    TensorEval,
    Udf,
    UnionAll,
    expr_columns,
    node_ids,
    render_expr,
    render_literal,
)
from .rules import fold_expr_constants, normalize_union_tops


def _clean_conjuncts(preds: list[ScalarExpr], defs: dict[str, ScalarExpr]) -> list[ScalarExpr]:
    """Substitute computed columns, fold constants, drop TRUE conjuncts."""
    out: list[ScalarExpr] = []
    for pred in preds:
        sub = _substitute(pred, defs)
        items = sub.items if isinstance(sub, And) else (sub,)
        for c in items:
            if not _has_call(c):
                c = fold_expr_constants(c)
            if isinstance(c, Literal) and c.value is True:
                continue
            if isinstance(c, Literal) and c.value is False:
                return [Literal(False)]
            out.append(c)
    return out


def _has_call(expr) -> bool:
    if isinstance(expr, _Call):
        return True
    for attr in ("left", "right", "item", "default"):
        child = getattr(expr, attr, None)
        if child is not None and _has_call(child):
            return True
    for attr in ("items",):
        children = getattr(expr, attr, None)
        if children and any(_has_call(c) for c in children):
            return True
    if isinstance(expr, CaseWhen):
        return any(_has_call(c) or _has_call(r) for c, r in expr.whens)
    return False


@dataclass(frozen=True)
class _Call:
    """Stand-in expression for a model invocation during rendering."""

    model: str
    args: tuple[str, ...]


@dataclass
class _Branch:
    tables: list[tuple[str, tuple[tuple[str, str], ...] | None]] = field(default_factory=list)
    where: list[ScalarExpr] = field(default_factory=list)  # bottom-up conjuncts
    predicts: list[tuple[str, tuple[str, ...], tuple[str, ...]]] = field(default_factory=list)
    select: list[tuple[str, ScalarExpr]] | None = None
    defs: dict[str, ScalarExpr] = field(default_factory=dict)


def _render(expr: ScalarExpr) -> str:
    if isinstance(expr, _Call):
        return f"PREDICT({expr.model}, {', '.join(expr.args)})"
    if isinstance(expr, Compare):
        return f"{_render(expr.left)} {expr.op} {_render(expr.right)}"
    if isinstance(expr, And):
        return " AND ".join(
            f"({_render(i)})" if isinstance(i, (And, Or)) else _render(i)
            for i in expr.items
        )
    if isinstance(expr, Or):
        return " OR ".join(
            f"({_render(i)})" if isinstance(i, (And, Or)) else _render(i)
            for i in expr.items
        )
    if isinstance(expr, Not):
        return f"NOT ({_render(expr.item)})"
    if isinstance(expr, InList):
        vals = ", ".join(render_literal(v.value) for v in expr.values)
        return f"{_render(expr.item)} IN ({vals})"
    if isinstance(expr, CaseWhen):
        parts = ["CASE"]
        for cond, res in expr.whens:
            parts.append(f"WHEN {_render(cond)} THEN {_render(res)}")
        parts.append(f"ELSE {_render(expr.default)}")
        parts.append("END")
        return " ".join(parts)
    if isinstance(expr, Arith):
        return f"({_render(expr.left)} {expr.op} {_render(expr.right)})"
    return render_expr(expr)


def _substitute(expr: ScalarExpr, defs: dict[str, ScalarExpr]) -> ScalarExpr:
    if isinstance(expr, ColumnRef):
        if expr.name in defs:
            return _substitute(defs[expr.name], defs)
        return expr
    if isinstance(expr, (Literal, _Call)):
        return expr
    if isinstance(expr, Compare):
        return Compare(expr.op, _substitute(expr.left, defs), _substitute(expr.right, defs))
    if isinstance(expr, And):
        return And(tuple(_substitute(i, defs) for i in expr.items))
    if isinstance(expr, Or):
        return Or(tuple(_substitute(i, defs) for i in expr.items))
    if isinstance(expr, Not):
        return Not(_substitute(expr.item, defs))
    if isinstance(expr, InList):
        return InList(_substitute(expr.item, defs), expr.values)
    if isinstance(expr, CaseWhen):
        return CaseWhen(
            tuple((_substitute(c, defs), _substitute(r, defs)) for c, r in expr.whens),
            _substitute(expr.default, defs),
        )
    if isinstance(expr, Arith):
        return Arith(expr.op, _substitute(expr.left, defs), _substitute(expr.right, defs))
    return expr


def _is_identity_project(node: Project) -> bool:
    return all(isinstance(e, ColumnRef) and e.name == n for n, e in node.columns)


def _extract_branch(root: PlanNode, ids: dict[int, str]) -> _Branch:
    b = _Branch()
    node = root
    spine_where: list[ScalarExpr] = []
    while True:
        if isinstance(node, Project):
            if b.select is None:
                b.select = list(node.columns)
            else:
                for name, expr in node.columns:
                    if not (isinstance(expr, ColumnRef) and expr.name == name):
                        b.defs[name] = expr
            node = node.child
        elif isinstance(node, Filter):
            spine_where.append(node.predicate)
            node = node.child
        elif isinstance(node, Predict):
            b.predicts.append((node.model, node.inputs, node.outputs))
            for out in node.outputs:
                b.defs[out] = _Call(node.model, node.inputs)
            node = node.child
        elif isinstance(node, TensorEval):
            cols = tuple(x.column for x in node.bindings)
            b.predicts.append((node.model, cols, node.outputs))
            for out in node.outputs:
                b.defs[out] = _Call(node.model, cols)
            node = node.child
        elif isinstance(node, Udf):
            raise SqlEmitError(
                f"plan node {ids.get(id(node), 'n?')} (UDF {node.tag!r}) has no SQL form"
            )
        else:
            break
    below: list[ScalarExpr] = []
    _flatten_from(node, b, below, ids)
    b.where = below + list(reversed(spine_where))
    return b


def _flatten_from(node: PlanNode, b: _Branch, below: list[ScalarExpr],
                  ids: dict[int, str]):
    if isinstance(node, Join):
        _flatten_from(node.left, b, below, ids)
        right = node.right
        right_where: list[ScalarExpr] = []
        while isinstance(right, (Filter, Project)):
            if isinstance(right, Project):
                if not _is_identity_project(right):
                    raise SqlEmitError(
                        f"computed projection below a join ({ids.get(id(right), 'n?')}) "
                        "has no SQL form"
                    )
            else:
                right_where.append(right.predicate)
            right = right.child
        if not isinstance(right, Scan):
            raise SqlEmitError(
                f"join input {ids.get(id(right), 'n?')} "
                f"({type(right).__name__}) has no SQL form"
            )
        b.tables.append((right.table, node.keys))
        below.extend(reversed(right_where))
        return
    cur = node
    where_here: list[ScalarExpr] = []
    while isinstance(cur, (Filter, Project)):
        if isinstance(cur, Project):
            if not _is_identity_project(cur):
                raise SqlEmitError(
                    f"computed projection below a join ({ids.get(id(cur), 'n?')}) "
                    "has no SQL form"
                )
        else:
            where_here.append(cur.predicate)
        cur = cur.child
    if not isinstance(cur, Scan):
        raise SqlEmitError(
            f"plan node {ids.get(id(cur), 'n?')} ({type(cur).__name__}) "
            "has no SQL form"
        )
    b.tables.append((cur.table, None))
    below.extend(reversed(where_here))


def _branch_sql(b: _Branch) -> str:
    if b.select is None:
        items = "*"
        extra = []
        for model, args, outputs in b.predicts:
            if len(outputs) == 1:
                extra.append(f"PREDICT({model}, {', '.join(args)}) AS {outputs[0]}")
        if extra:
            items = "*, " + ", ".join(extra)
    else:
        rendered = []
        for name, expr in b.select:
            sub = _substitute(expr, b.defs)
            if isinstance(sub, ColumnRef) and sub.name == name:
                rendered.append(name)
            else:
                rendered.append(f"{_render(sub)} AS {name}")
        items = ", ".join(rendered)
    sql = [f"SELECT {items}"]
    first, _ = b.tables[0]
    frm = [first]
    for table, keys in b.tables[1:]:
        conds = " AND ".join(f"{l} = {r}" for l, r in keys)
        frm.append(f"JOIN {table} ON {conds}")
    sql.append("FROM " + " ".join(frm))
    conjs = [_render(c) for c in _clean_conjuncts(b.where, b.defs)]
    if conjs:
        sql.append("WHERE " + " AND ".join(conjs))
    return " ".join(sql)


def emit_sql(plan: PlanNode, catalog: Catalog | None = None) -> str:
    """Render a plan as SQL; raises SqlEmitError on inexpressible nodes."""
    plan = normalize_union_tops(plan)
    ids = node_ids(plan)
    if isinstance(plan, UnionAll):
        branches = [_extract_branch(x, ids) for x in plan.branches]
    else:
        branches = [_extract_branch(plan, ids)]
    return " UNION ALL ".join(_branch_sql(b) for b in branches)


# ---------------------------------------------------------------------------
# Structural equivalence
# ---------------------------------------------------------------------------


def _branch_signature(b: _Branch) -> tuple:
    where = sorted(_render(c) for c in _clean_conjuncts(b.where, b.defs))
    predicts = sorted((model, args) for model, args, _ in b.predicts)
    if b.select is None:
        select = ("*",) + tuple(
            sorted(
                (outputs[0], f"PREDICT({model}, {', '.join(args)})")
                for model, args, outputs in b.predicts
                if len(outputs) == 1
            )
        )
    else:
        select = tuple(
            (name, _render(_substitute(expr, b.defs))) for name, expr in b.select
        )
    return (tuple(b.tables), tuple(where), tuple(predicts), select)


def plan_signature(plan: PlanNode) -> tuple:
    """Canonical description used for round-trip structural comparison."""
    plan = normalize_union_tops(plan)
    ids = node_ids(plan)
    if isinstance(plan, UnionAll):
        return tuple(_branch_signature(_extract_branch(x, ids)) for x in plan.branches)
    return (_branch_signature(_extract_branch(plan, ids)),)


def plans_equivalent(a: PlanNode, b: PlanNode) -> bool:
    return plan_signature(a) == plan_signature(b)
