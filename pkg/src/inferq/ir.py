"""Unified plan IR: schemas, scalar expressions, operator nodes and validation.

Plans are immutable DAGs of operator nodes.  Rewrites never mutate a node;
they build new nodes around unchanged subtrees, so sharing a subtree between
two parents is safe and cycles cannot be constructed.  Node identifiers are
not stored on the nodes: they are derived deterministically (pre-order) when
a plan is rendered or diagnosed, so structurally equal rewrites always print
the same way.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Union

from .errors import PlanError

if TYPE_CHECKING:
    from .catalog import Catalog


class ColType(enum.Enum):
    NUMERIC = "numeric"
    CATEGORICAL = "categorical"
    BOOLEAN = "boolean"

    @property
    def short(self) -> str:
        return {"numeric": "num", "categorical": "cat", "boolean": "bool"}[self.value]


# Booleans participate in numeric comparisons as 0/1.
_ORDERED_TYPES = {ColType.NUMERIC, ColType.BOOLEAN}


@dataclass(frozen=True)
class Column:
    name: str
    type: ColType
    nullable: bool = False

    def render(self) -> str:
        return f"{self.name}:{self.type.short}" + ("?" if self.nullable else "")


@dataclass(frozen=True)
class Schema:
    """Ordered, uniquely named columns. Order is significant (positional binding)."""

    columns: tuple[Column, ...]

    def __post_init__(self):
        names = [c.name for c in self.columns]
        if len(set(names)) != len(names):
            dup = sorted({n for n in names if names.count(n) > 1})
            raise PlanError(f"duplicate column names in schema: {dup}")

    @property
    def names(self) -> tuple[str, ...]:
        return tuple(c.name for c in self.columns)

    def has(self, name: str) -> bool:
        return any(c.name == name for c in self.columns)

    def col(self, name: str) -> Column:
        for c in self.columns:
            if c.name == name:
                return c
        raise PlanError(f"unknown column: {name!r}")

    def index(self, name: str) -> int:
        for i, c in enumerate(self.columns):
            if c.name == name:
                return i
        raise PlanError(f"unknown column: {name!r}")

    def render(self) -> str:
        return "[" + ", ".join(c.render() for c in self.columns) + "]"


# ---------------------------------------------------------------------------
# Scalar expressions
# ---------------------------------------------------------------------------

COMPARE_OPS = ("=", "!=", "<", "<=", ">", ">=")
ARITH_OPS = ("+", "-", "*", "/")


@dataclass(frozen=True)
class ColumnRef:
    name: str


@dataclass(frozen=True)
class Literal:
    """Constant value: float (numeric), str (categorical) or bool."""

    value: Union[float, str, bool]


@dataclass(frozen=True)
class Compare:
    op: str
    left: "ScalarExpr"
    right: "ScalarExpr"


@dataclass(frozen=True)
class And:
    items: tuple["ScalarExpr", ...]


@dataclass(frozen=True)
class Or:
    items: tuple["ScalarExpr", ...]


@dataclass(frozen=True)
class Not:
    item: "ScalarExpr"


@dataclass(frozen=True)
class InList:
    item: "ScalarExpr"
    values: tuple[Literal, ...]


@dataclass(frozen=True)
class CaseWhen:
    whens: tuple[tuple["ScalarExpr", "ScalarExpr"], ...]
    default: "ScalarExpr"


@dataclass(frozen=True)
class Arith:
    op: str
    left: "ScalarExpr"
    right: "ScalarExpr"


ScalarExpr = Union[ColumnRef, Literal, Compare, And, Or, Not, InList, CaseWhen, Arith]


def literal_type(value) -> ColType:
    if isinstance(value, bool):
        return ColType.BOOLEAN
    if isinstance(value, (int, float)):
        return ColType.NUMERIC
    if isinstance(value, str):
        return ColType.CATEGORICAL
    raise PlanError(f"unsupported literal value: {value!r}")


def _comparable(a: ColType, b: ColType, op: str) -> bool:
    if a in _ORDERED_TYPES and b in _ORDERED_TYPES:
        return True
    if a == ColType.CATEGORICAL and b == ColType.CATEGORICAL:
        return op in ("=", "!=")
    return False


def expr_type(expr: ScalarExpr, schema: Schema) -> ColType:
    """Type-check an expression against a schema; raises PlanError on errors."""
    if isinstance(expr, ColumnRef):
        return schema.col(expr.name).type
    if isinstance(expr, Literal):
        return literal_type(expr.value)
    if isinstance(expr, Compare):
        lt = expr_type(expr.left, schema)
        rt = expr_type(expr.right, schema)
        if expr.op not in COMPARE_OPS:
            raise PlanError(f"unknown comparison operator: {expr.op}")
        if not _comparable(lt, rt, expr.op):
            raise PlanError(
                f"incompatible comparison: {lt.value} {expr.op} {rt.value}"
            )
        return ColType.BOOLEAN
    if isinstance(expr, (And, Or)):
        for item in expr.items:
            t = expr_type(item, schema)
            if t != ColType.BOOLEAN:
                raise PlanError(f"AND/OR operand is {t.value}, expected boolean")
        return ColType.BOOLEAN
    if isinstance(expr, Not):
        if expr_type(expr.item, schema) != ColType.BOOLEAN:
            raise PlanError("NOT operand must be boolean")
        return ColType.BOOLEAN
    if isinstance(expr, InList):
        it = expr_type(expr.item, schema)
        if not expr.values:
            raise PlanError("IN list must be non-empty")
        for v in expr.values:
            if not _comparable(it, literal_type(v.value), "="):
                raise PlanError(
                    f"IN list value {v.value!r} incompatible with {it.value}"
                )
        return ColType.BOOLEAN
    if isinstance(expr, CaseWhen):
        if not expr.whens:
            raise PlanError("CASE must have at least one WHEN branch")
        result_t: ColType | None = None
        for cond, res in expr.whens:
            if expr_type(cond, schema) != ColType.BOOLEAN:
                raise PlanError("CASE WHEN condition must be boolean")
            t = expr_type(res, schema)
            result_t = t if result_t is None else result_t
            if t != result_t:
                raise PlanError(
                    f"CASE branches yield mixed types: {result_t.value} vs {t.value}"
                )
        dt = expr_type(expr.default, schema)
        if dt != result_t:
            raise PlanError(
                f"CASE default yields {dt.value}, branches yield {result_t.value}"
            )
        return result_t
    if isinstance(expr, Arith):
        if expr.op not in ARITH_OPS:
            raise PlanError(f"unknown arithmetic operator: {expr.op}")
        for side in (expr.left, expr.right):
            t = expr_type(side, schema)
            if t not in _ORDERED_TYPES:
                raise PlanError(f"arithmetic over {t.value} is not defined")
        return ColType.NUMERIC
    raise PlanError(f"unknown expression node: {expr!r}")


def expr_columns(expr: ScalarExpr) -> set[str]:
    """All column names referenced anywhere inside the expression."""
    out: set[str] = set()

    def walk(e):
        if isinstance(e, ColumnRef):
            out.add(e.name)
        elif isinstance(e, Compare):
            walk(e.left)
            walk(e.right)
        elif isinstance(e, (And, Or)):
            for item in e.items:
                walk(item)
        elif isinstance(e, Not):
            walk(e.item)
        elif isinstance(e, InList):
            walk(e.item)
        elif isinstance(e, CaseWhen):
            for cond, res in e.whens:
                walk(cond)
                walk(res)
            walk(e.default)
        elif isinstance(e, Arith):
            walk(e.left)
            walk(e.right)

    walk(expr)
    return out


def render_literal(value) -> str:
    if isinstance(value, bool):
        return "TRUE" if value else "FALSE"
    if isinstance(value, (int, float)):
        return repr(float(value))
    return "'" + str(value).replace("'", "''") + "'"


def render_expr(expr: ScalarExpr) -> str:
    """Deterministic SQL-style rendering, shared by explain and emit_sql."""
    if isinstance(expr, ColumnRef):
        return expr.name
    if isinstance(expr, Literal):
        return render_literal(expr.value)
    if isinstance(expr, Compare):
        return f"{render_expr(expr.left)} {expr.op} {render_expr(expr.right)}"
    if isinstance(expr, And):
        return " AND ".join(_render_bool_operand(i) for i in expr.items)
    if isinstance(expr, Or):
        return " OR ".join(_render_bool_operand(i) for i in expr.items)
    if isinstance(expr, Not):
        return f"NOT ({render_expr(expr.item)})"
    if isinstance(expr, InList):
        vals = ", ".join(render_literal(v.value) for v in expr.values)
        return f"{render_expr(expr.item)} IN ({vals})"
    if isinstance(expr, CaseWhen):
        parts = ["CASE"]
        for cond, res in expr.whens:
            parts.append(f"WHEN {render_expr(cond)} THEN {render_expr(res)}")
        parts.append(f"ELSE {render_expr(expr.default)}")
        parts.append("END")
        return " ".join(parts)
    if isinstance(expr, Arith):
        return f"({render_expr(expr.left)} {expr.op} {render_expr(expr.right)})"
    raise PlanError(f"cannot render expression: {expr!r}")


def _render_bool_operand(e: ScalarExpr) -> str:
    if isinstance(e, (And, Or)):
        return f"({render_expr(e)})"
    return render_expr(e)


# ---------------------------------------------------------------------------
# Plan nodes
# ---------------------------------------------------------------------------


class PlanNode:
    """Base class for plan operators. Subclasses are frozen dataclasses."""

    @property
    def children(self) -> tuple["PlanNode", ...]:
        raise NotImplementedError

    def with_children(self, children: tuple["PlanNode", ...]) -> "PlanNode":
        raise NotImplementedError


@dataclass(frozen=True, eq=False)
class Scan(PlanNode):
    table: str

    @property
    def children(self):
        return ()

    def with_children(self, children):
        assert not children
        return self


@dataclass(frozen=True, eq=False)
class Filter(PlanNode):
    child: PlanNode
    predicate: ScalarExpr

    @property
    def children(self):
        return (self.child,) if self.child is not None else ()

    def with_children(self, children):
        (child,) = children
        return Filter(child, self.predicate)


@dataclass(frozen=True, eq=False)
class Project(PlanNode):
    child: PlanNode
    columns: tuple[tuple[str, ScalarExpr], ...]

    @property
    def children(self):
        return (self.child,) if self.child is not None else ()

    def with_children(self, children):
        (child,) = children
        return Project(child, self.columns)

    def is_identity_for(self, name: str) -> bool:
        for out, expr in self.columns:
            if out == name:
                return isinstance(expr, ColumnRef) and expr.name == name
        return False


@dataclass(frozen=True, eq=False)
class Join(PlanNode):
    """Inner equi-join; duplicate right-side names get a numeric suffix."""

    left: PlanNode
    right: PlanNode
    keys: tuple[tuple[str, str], ...]

    @property
    def children(self):
        return tuple(c for c in (self.left, self.right) if c is not None)

    def with_children(self, children):
        left, right = children
        return Join(left, right, self.keys)


@dataclass(frozen=True, eq=False)
class UnionAll(PlanNode):
    branches: tuple[PlanNode, ...]

    @property
    def children(self):
        return self.branches

    def with_children(self, children):
        return UnionAll(tuple(children))


@dataclass(frozen=True, eq=False)
class Predict(PlanNode):
    """Model invocation: binds child columns positionally to pipeline inputs.

    `model` is the catalog name; `pipeline` is the resolved payload (a
    ModelPipeline, TensorModel or ClusterDispatch).  Output columns are
    appended to the child schema.
    """

    child: PlanNode
    model: str
    pipeline: object
    inputs: tuple[str, ...]
    outputs: tuple[str, ...]

    @property
    def children(self):
        return (self.child,) if self.child is not None else ()

    def with_children(self, children):
        (child,) = children
        return Predict(child, self.model, self.pipeline, self.inputs, self.outputs)


@dataclass(frozen=True, eq=False)
class TensorEval(PlanNode):
    """Evaluate a tensor graph over bound child columns; appends outputs."""

    child: PlanNode
    model: str
    graph: object
    bindings: tuple[object, ...]  # tensor.GraphBinding
    outputs: tuple[str, ...]

    @property
    def children(self):
        return (self.child,) if self.child is not None else ()

    def with_children(self, children):
        (child,) = children
        return TensorEval(child, self.model, self.graph, self.bindings, self.outputs)


@dataclass(frozen=True, eq=False)
class Udf(PlanNode):
    """Opaque black box: representable and serializable, never executable.

    Treated as schema-preserving; every analysis gives up (Top) at this node
    and no rewrite may look through it.
    """

    child: PlanNode
    tag: str

    @property
    def children(self):
        return (self.child,) if self.child is not None else ()

    def with_children(self, children):
        (child,) = children
        return Udf(child, self.tag)


_ARITY = {Scan: 0, Filter: 1, Project: 1, Join: 2, Predict: 1, TensorEval: 1, Udf: 1}


def walk_preorder(root: PlanNode):
    """Yield nodes in pre-order; shared subtrees are visited once."""
    seen: set[int] = set()

    def rec(node: PlanNode):
        if id(node) in seen:
            return
        seen.add(id(node))
        yield node
        for c in node.children:
            yield from rec(c)

    yield from rec(root)


def node_ids(root: PlanNode) -> dict[int, str]:
    """Deterministic pre-order numbering used for diagnostics and explain."""
    ids: dict[int, str] = {}
    for i, node in enumerate(walk_preorder(root), start=1):
        ids[id(node)] = f"n{i}"
    return ids


# ---------------------------------------------------------------------------
# Schema derivation
# ---------------------------------------------------------------------------


def join_output_columns(
    left: Schema, right: Schema
) -> tuple[tuple[Column, ...], dict[str, str]]:
    """Concatenate schemas, suffixing duplicate right-side names.

    Returns the output columns and the rename map for the right side
    (original name -> output name).
    """
    out = list(left.columns)
    taken = {c.name for c in left.columns}
    rename: dict[str, str] = {}
    for c in right.columns:
        name = c.name
        k = 2
        while name in taken:
            name = f"{c.name}_{k}"
            k += 1
        taken.add(name)
        rename[c.name] = name
        out.append(Column(name, c.type, c.nullable))
    return tuple(out), rename


def output_schema(node: PlanNode, catalog: "Catalog") -> Schema:
    """Schema of a node's output. Raises PlanError on broken plans."""
    if isinstance(node, Scan):
        return catalog.table_schema(node.table)
    if isinstance(node, Filter):
        child = output_schema(node.child, catalog)
        t = expr_type(node.predicate, child)
        if t != ColType.BOOLEAN:
            raise PlanError(f"filter predicate has type {t.value}, expected boolean")
        return child
    if isinstance(node, Project):
        child = output_schema(node.child, catalog)
        cols = []
        for name, expr in node.columns:
            t = expr_type(expr, child)
            nullable = any(
                child.col(c).nullable for c in expr_columns(expr) if child.has(c)
            )
            cols.append(Column(name, t, nullable))
        return Schema(tuple(cols))
    if isinstance(node, Join):
        left = output_schema(node.left, catalog)
        right = output_schema(node.right, catalog)
        for lk, rk in node.keys:
            lt = left.col(lk).type
            rt = right.col(rk).type
            if not _comparable(lt, rt, "="):
                raise PlanError(f"join key type mismatch: {lk}:{lt.value} = {rk}:{rt.value}")
        cols, _ = join_output_columns(left, right)
        return Schema(cols)
    if isinstance(node, UnionAll):
        schemas = [output_schema(b, catalog) for b in node.branches]
        first = schemas[0]
        for s in schemas[1:]:
            if s.names != first.names or any(
                a.type != b.type for a, b in zip(s.columns, first.columns)
            ):
                raise PlanError("UNION ALL branches have different schemas")
        # A column is nullable in the union if nullable in any branch.
        cols = tuple(
            Column(c.name, c.type, any(s.columns[i].nullable for s in schemas))
            for i, c in enumerate(first.columns)
        )
        return Schema(cols)
    if isinstance(node, Predict):
        child = output_schema(node.child, catalog)
        cols = list(child.columns)
        for out in node.outputs:
            if child.has(out):
                raise PlanError(f"predict output {out!r} collides with input column")
            cols.append(Column(out, ColType.NUMERIC, False))
        return Schema(tuple(cols))
    if isinstance(node, TensorEval):
        child = output_schema(node.child, catalog)
        cols = list(child.columns)
        for out in node.outputs:
            if child.has(out):
                raise PlanError(f"tensor output {out!r} collides with input column")
            cols.append(Column(out, ColType.NUMERIC, False))
        return Schema(tuple(cols))
    if isinstance(node, Udf):
        return output_schema(node.child, catalog)
    raise PlanError(f"unknown plan node: {node!r}")


# ---------------------------------------------------------------------------
# Validation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Diagnostic:
    node: str
    message: str

    def __str__(self):
        return f"{self.node}: {self.message}"


def validate_plan(plan: PlanNode, catalog: "Catalog") -> list[Diagnostic]:
    """Structural validation. Empty list means every invariant holds.

    Side-effect free and idempotent; never raises for malformed plans, it
    reports instead.
    """
    ids = node_ids(plan)
    diags: list[Diagnostic] = []
    schemas: dict[int, Schema | None] = {}

    def diag(node, msg):
        diags.append(Diagnostic(ids.get(id(node), "n?"), msg))

    def visit(node: PlanNode, stack: tuple[int, ...]) -> Schema | None:
        if id(node) in stack:
            diag(node, "cycle detected in plan graph")
            return None
        if id(node) in schemas:
            return schemas[id(node)]
        schemas[id(node)] = None  # placeholder while children are visited

        expected = _ARITY.get(type(node))
        actual = len(node.children)
        if expected is not None and actual != expected:
            diag(node, f"{type(node).__name__} expects {expected} input(s), has {actual}")
            return None
        if isinstance(node, UnionAll) and actual < 2:
            diag(node, f"UnionAll expects at least 2 inputs, has {actual}")
            return None

        child_schemas = [visit(c, stack + (id(node),)) for c in node.children]
        if any(s is None for s in child_schemas) and not isinstance(node, Scan):
            return None  # don't cascade diagnostics from broken children

        schema: Schema | None = None
        try:
            if isinstance(node, Scan):
                if not catalog.has_table(node.table):
                    diag(node, f"unknown table: {node.table!r}")
                    return None
                schema = catalog.table_schema(node.table)
            elif isinstance(node, Predict):
                schema = _validate_predict(node, child_schemas[0], catalog, diag)
            elif isinstance(node, TensorEval):
                schema = _validate_tensoreval(node, child_schemas[0], diag)
            elif isinstance(node, Filter):
                missing = expr_columns(node.predicate) - set(child_schemas[0].names)
                if missing:
                    diag(node, f"unresolved column(s) in predicate: {sorted(missing)}")
                    return None
                schema = output_schema(node, _FixedSchemas(child_schemas, node, catalog))
            else:
                schema = output_schema(node, _FixedSchemas(child_schemas, node, catalog))
        except PlanError as exc:
            diag(node, str(exc))
            return None
        schemas[id(node)] = schema
        return schema

    visit(plan, ())
    return diags


class _FixedSchemas:
    """Catalog shim that serves already computed child schemas to output_schema."""

    def __init__(self, child_schemas, node, catalog):
        self._map = {id(c): s for c, s in zip(node.children, child_schemas)}
        self._catalog = catalog
        self._node = node

    def table_schema(self, table):
        return self._catalog.table_schema(table)

    def has_table(self, table):
        return self._catalog.has_table(table)


def _validate_predict(node: Predict, child: Schema, catalog, diag) -> Schema | None:
    if node.pipeline is None and not catalog.has_model(node.model):
        diag(node, f"unknown model: {node.model!r}")
        return None
    pipeline = node.pipeline if node.pipeline is not None else catalog.model(node.model)
    expected = pipeline.input_columns()
    if len(node.inputs) != len(expected):
        diag(
            node,
            f"predict binds {len(node.inputs)} column(s), pipeline expects {len(expected)}",
        )
        return None
    ok = True
    for col, (iname, itype) in zip(node.inputs, expected):
        if not child.has(col):
            diag(node, f"unresolved column in predict bindings: {col!r}")
            ok = False
            continue
        ct = child.col(col).type
        if itype == ColType.CATEGORICAL and ct != ColType.CATEGORICAL:
            diag(node, f"input {iname!r} expects a categorical column, got {col}:{ct.value}")
            ok = False
        if itype == ColType.NUMERIC and ct == ColType.CATEGORICAL:
            diag(node, f"input {iname!r} expects a numeric column, got {col}:{ct.value}")
            ok = False
    arity = pipeline.output_arity()
    if len(node.outputs) != arity:
        diag(node, f"predict declares {len(node.outputs)} output(s), pipeline yields {arity}")
        ok = False
    if not ok:
        return None
    cols = list(child.columns)
    for out in node.outputs:
        if child.has(out):
            diag(node, f"predict output {out!r} collides with input column")
            return None
        cols.append(Column(out, ColType.NUMERIC, False))
    return Schema(tuple(cols))


def _validate_tensoreval(node: TensorEval, child: Schema, diag) -> Schema | None:
    ok = True
    for b in node.bindings:
        if not child.has(b.column):
            diag(node, f"unresolved column in tensor bindings: {b.column!r}")
            ok = False
    if len(node.outputs) != node.graph.output_arity():
        diag(
            node,
            f"tensor node declares {len(node.outputs)} output(s), graph yields "
            f"{node.graph.output_arity()}",
        )
        ok = False
    if not ok:
        return None
    cols = list(child.columns)
    for out in node.outputs:
        if child.has(out):
            diag(node, f"tensor output {out!r} collides with input column")
            return None
        cols.append(Column(out, ColType.NUMERIC, False))
    return Schema(tuple(cols))


# ---------------------------------------------------------------------------
# Explain rendering
# ---------------------------------------------------------------------------


def _node_args(node: PlanNode) -> str:
    if isinstance(node, Scan):
        return node.table
    if isinstance(node, Filter):
        return render_expr(node.predicate)
    if isinstance(node, Project):
        parts = []
        for name, expr in node.columns:
            if isinstance(expr, ColumnRef) and expr.name == name:
                parts.append(name)
            else:
                parts.append(f"{name}={render_expr(expr)}")
        return ", ".join(parts)
    if isinstance(node, Join):
        return ", ".join(f"{l} = {r}" for l, r in node.keys)
    if isinstance(node, UnionAll):
        return ""
    if isinstance(node, Predict):
        return f"{node.model}, {', '.join(node.inputs)} -> {', '.join(node.outputs)}"
    if isinstance(node, TensorEval):
        cols = ", ".join(b.column for b in node.bindings)
        return f"{node.model}, {cols} -> {', '.join(node.outputs)}"
    if isinstance(node, Udf):
        return node.tag
    return ""


def explain_plan(plan: PlanNode, catalog: "Catalog") -> str:
    """Deterministic indented rendering: one `id Op(args) [schema]` per line.

    A subtree shared by several parents is printed once; later occurrences
    are shown as `id ^`.
    """
    ids = node_ids(plan)
    printed: set[int] = set()
    lines: list[str] = []

    def schema_str(node):
        try:
            return " " + output_schema(node, catalog).render()
        except PlanError:
            return " [?]"

    def rec(node: PlanNode, depth: int):
        pad = "  " * depth
        nid = ids[id(node)]
        if id(node) in printed:
            lines.append(f"{pad}{nid} ^")
            return
        printed.add(id(node))
        lines.append(f"{pad}{nid} {type(node).__name__}({_node_args(node)}){schema_str(node)}")
        for c in node.children:
            rec(c, depth + 1)

    rec(plan, 0)
    return "\n".join(lines)


def plan_node_count(plan: PlanNode) -> int:
    return sum(1 for _ in walk_preorder(plan))
