"""In-memory columnar execution of plans over CSV-loaded tables.

Numeric columns are float64 arrays, booleans byte arrays, categoricals
dictionary-encoded int64 codes.  Results follow bag semantics: the multiset
of output rows is deterministic for any batch size and worker count, row
order is unspecified at the interface (in practice partition order is kept).

Model invocations are evaluated per batch of `batch_size` rows.  When
`threads > 1`, linear scan→filter→project→predict chains are partitioned
row-wise across forked worker processes and merged; the GIL makes in-process
threads useless for this workload, so "threads" are processes.  Comparisons
involving NULL are false (rows are filtered out); there is no further
three-valued logic.
"""

from __future__ import annotations

import csv
import multiprocessing
import os
import time
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .analysis import collect_stats
from .errors import ExecutionError
from .ir import (
    And,
    Arith,
    CaseWhen,
    ColType,
    Column,
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
    Schema,
    TensorEval,
    Udf,
    UnionAll,
    expr_type,
    join_output_columns,
    node_ids,
)
from .models import ColumnView, ModelPipeline, compile_pipeline

# ---------------------------------------------------------------------------
# Tables
# ---------------------------------------------------------------------------


@dataclass
class ColumnData:
    """One column: float64 values, uint8 booleans, or dictionary-coded strings."""

    values: np.ndarray | None = None
    codes: np.ndarray | None = None
    categories: list[str] | None = None
    validity: np.ndarray | None = None  # True = present; None = no NULLs

    def __len__(self):
        arr = self.values if self.values is not None else self.codes
        return len(arr)

    def as_float(self) -> np.ndarray:
        if self.values is None:
            raise ExecutionError("categorical column has no numeric view")
        if self.values.dtype == np.float64:
            return self.values
        return self.values.astype(np.float64)

    def take(self, idx) -> "ColumnData":
        return ColumnData(
            None if self.values is None else self.values[idx],
            None if self.codes is None else self.codes[idx],
            self.categories,
            None if self.validity is None else self.validity[idx],
        )


@dataclass
class Table:
    schema: Schema
    columns: dict[str, ColumnData]
    row_count: int
    stats: dict | None = None

    @classmethod
    def from_columns(cls, schema: Schema, columns: dict[str, ColumnData],
                     with_stats: bool = False) -> "Table":
        n = len(next(iter(columns.values()))) if columns else 0
        t = cls(schema, columns, n)
        if with_stats:
            t.stats = collect_stats(t)
        return t

    def take(self, idx) -> "Table":
        cols = {name: col.take(idx) for name, col in self.columns.items()}
        n = int(idx.sum()) if idx.dtype == bool else len(idx)
        return Table(self.schema, cols, n)

    def slice(self, lo: int, hi: int) -> "Table":
        idx = slice(lo, hi)
        cols = {
            name: ColumnData(
                None if c.values is None else c.values[idx],
                None if c.codes is None else c.codes[idx],
                c.categories,
                None if c.validity is None else c.validity[idx],
            )
            for name, c in self.columns.items()
        }
        return Table(self.schema, cols, min(hi, self.row_count) - lo)

    def column_view(self, name: str) -> ColumnView:
        c = self.columns[name]
        if c.codes is not None:
            return ColumnView(codes=c.codes, categories=c.categories, validity=c.validity)
        return ColumnView(values=c.as_float(), validity=c.validity)

    def rows(self) -> list[tuple]:
        """Decoded python rows (None for NULL); convenience for tests/CSV."""
        out = []
        cols = []
        for col in self.schema.columns:
            c = self.columns[col.name]
            if c.codes is not None:
                decoded = [c.categories[int(k)] if k >= 0 else None for k in c.codes]
            elif col.type == ColType.BOOLEAN:
                decoded = [bool(v) for v in c.values]
            else:
                decoded = [float(v) for v in c.values]
            if c.validity is not None:
                decoded = [v if ok else None for v, ok in zip(decoded, c.validity)]
            cols.append(decoded)
        for i in range(self.row_count):
            out.append(tuple(col[i] for col in cols))
        return out


def empty_like(schema: Schema) -> Table:
    cols = {}
    for c in schema.columns:
        if c.type == ColType.CATEGORICAL:
            cols[c.name] = ColumnData(codes=np.empty(0, np.int64), categories=[])
        elif c.type == ColType.BOOLEAN:
            cols[c.name] = ColumnData(values=np.empty(0, np.uint8))
        else:
            cols[c.name] = ColumnData(values=np.empty(0, np.float64))
    return Table(schema, cols, 0)


def concat_tables(schema: Schema, parts: list[Table]) -> Table:
    parts = [p for p in parts if p.row_count > 0]
    if not parts:
        return empty_like(schema)
    cols: dict[str, ColumnData] = {}
    for col in schema.columns:
        datas = [p.columns[col.name] for p in parts]
        if col.type == ColType.CATEGORICAL:
            merged: list[str] = []
            lookup: dict[str, int] = {}
            remapped = []
            for d in datas:
                remap = np.empty(len(d.categories or []), np.int64)
                for i, cat in enumerate(d.categories or []):
                    if cat not in lookup:
                        lookup[cat] = len(merged)
                        merged.append(cat)
                    remap[i] = lookup[cat]
                codes = d.codes.copy()
                valid = codes >= 0
                codes[valid] = remap[codes[valid]]
                remapped.append(codes)
            values = None
            codes = np.concatenate(remapped)
            cats = merged
        else:
            values = np.concatenate([d.values for d in datas])
            codes = None
            cats = None
        if any(d.validity is not None for d in datas):
            validity = np.concatenate([
                d.validity if d.validity is not None else np.ones(len(d), bool)
                for d in datas
            ])
        else:
            validity = None
        cols[col.name] = ColumnData(values, codes, cats, validity)
    return Table(schema, cols, sum(p.row_count for p in parts))


# ---------------------------------------------------------------------------
# CSV in/out
# ---------------------------------------------------------------------------

_BOOL_WORDS = {"1": 1, "0": 0, "true": 1, "false": 0}


def load_csv(path: str | Path, schema: Schema) -> Table:
    """Load an RFC-4180-style CSV with a header row matching the schema.

    Empty fields become NULL in nullable columns; statistics are collected
    eagerly on the loaded table.
    """
    path = Path(path)
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ExecutionError(f"{path.name}: empty file") from None
        if tuple(header) != schema.names:
            raise ExecutionError(
                f"{path.name}: header {header} does not match declared columns "
                f"{list(schema.names)}"
            )
        raw: list[list[str]] = [[] for _ in schema.columns]
        for lineno, row in enumerate(reader, start=2):
            if not row:
                row = [""] * len(schema.columns)  # blank line: all fields empty
            if len(row) != len(schema.columns):
                raise ExecutionError(
                    f"{path.name}:{lineno}: expected {len(schema.columns)} fields, "
                    f"got {len(row)}"
                )
            for i, v in enumerate(row):
                raw[i].append(v)

    n = len(raw[0]) if schema.columns else 0
    cols: dict[str, ColumnData] = {}
    for i, col in enumerate(schema.columns):
        vals = raw[i]
        validity = None
        nulls = [j for j, v in enumerate(vals) if v == ""]
        if nulls:
            if not col.nullable:
                raise ExecutionError(
                    f"{path.name}:{nulls[0] + 2}: empty value in non-nullable "
                    f"column {col.name!r}"
                )
            validity = np.ones(n, bool)
            validity[nulls] = False
        if col.type == ColType.NUMERIC:
            data = np.zeros(n, np.float64)
            for j, v in enumerate(vals):
                if v == "":
                    continue
                try:
                    data[j] = float(v)
                except ValueError:
                    raise ExecutionError(
                        f"{path.name}:{j + 2}: cannot parse {v!r} as numeric in "
                        f"column {col.name!r}"
                    ) from None
            cols[col.name] = ColumnData(values=data, validity=validity)
        elif col.type == ColType.BOOLEAN:
            data = np.zeros(n, np.uint8)
            for j, v in enumerate(vals):
                if v == "":
                    continue
                w = _BOOL_WORDS.get(v.strip().lower())
                if w is None:
                    raise ExecutionError(
                        f"{path.name}:{j + 2}: cannot parse {v!r} as boolean in "
                        f"column {col.name!r}"
                    )
                data[j] = w
            cols[col.name] = ColumnData(values=data, validity=validity)
        else:
            categories: list[str] = []
            lookup: dict[str, int] = {}
            codes = np.empty(n, np.int64)
            for j, v in enumerate(vals):
                if v == "":
                    codes[j] = -1
                    continue
                k = lookup.get(v)
                if k is None:
                    k = lookup[v] = len(categories)
                    categories.append(v)
                codes[j] = k
            cols[col.name] = ColumnData(codes=codes, categories=categories,
                                        validity=validity)
    table = Table(schema, cols, n)
    table.stats = collect_stats(table)
    return table


def write_csv(table: Table, out) -> None:
    """Write a table as CSV (header included, NULL as empty field)."""
    close = False
    if isinstance(out, (str, Path)):
        out = open(out, "w", newline="", encoding="utf-8")
        close = True
    try:
        w = csv.writer(out)
        w.writerow(table.schema.names)
        for row in table.rows():
            w.writerow(["" if v is None else _csv_value(v) for v in row])
    finally:
        if close:
            out.close()


def _csv_value(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return v


# ---------------------------------------------------------------------------
# Expression evaluation
# ---------------------------------------------------------------------------


def _null_false(mask: np.ndarray, validity: np.ndarray | None) -> np.ndarray:
    return mask if validity is None else (mask & validity)


def _and_validity(a: np.ndarray | None, b: np.ndarray | None) -> np.ndarray | None:
    if a is None:
        return b
    if b is None:
        return a
    return a & b


def eval_predicate(expr: ScalarExpr, table: Table) -> np.ndarray:
    """Boolean mask; rows where the predicate is NULL evaluate to false."""
    if isinstance(expr, Literal):
        if not isinstance(expr.value, bool):
            raise ExecutionError(f"predicate literal must be boolean, got {expr.value!r}")
        return np.full(table.row_count, bool(expr.value))
    if isinstance(expr, And):
        out = np.ones(table.row_count, bool)
        for item in expr.items:
            out &= eval_predicate(item, table)
        return out
    if isinstance(expr, Or):
        out = np.zeros(table.row_count, bool)
        for item in expr.items:
            out |= eval_predicate(item, table)
        return out
    if isinstance(expr, Not):
        return ~eval_predicate(expr.item, table)
    if isinstance(expr, Compare):
        return _eval_compare(expr, table)
    if isinstance(expr, InList):
        return _eval_in(expr, table)
    if isinstance(expr, ColumnRef):
        col = table.columns[expr.name]
        return _null_false(col.as_float() != 0.0, col.validity)
    raise ExecutionError(f"cannot evaluate predicate node {type(expr).__name__}")


def _categorical_operands(expr: Compare, table: Table):
    """Returns (codes, validity, literal) when one side is a categorical column."""
    for a, b in ((expr.left, expr.right), (expr.right, expr.left)):
        if isinstance(a, ColumnRef) and isinstance(b, Literal) and isinstance(b.value, str):
            col = table.columns[a.name]
            if col.codes is None:
                raise ExecutionError(f"string literal compared to non-categorical {a.name!r}")
            return col, b.value
    return None


def _eval_compare(expr: Compare, table: Table) -> np.ndarray:
    cat = _categorical_operands(expr, table)
    if cat is not None:
        col, value = cat
        lookup = {c: i for i, c in enumerate(col.categories or [])}
        code = lookup.get(value, -2)  # -2 never matches (NULL is -1)
        if expr.op == "=":
            return _null_false(col.codes == code, col.validity)
        if expr.op == "!=":
            return _null_false(col.codes != code, col.validity)
        raise ExecutionError(f"ordering comparison on categorical column")
    # Column-to-column categorical equality (join residuals).
    if (isinstance(expr.left, ColumnRef) and isinstance(expr.right, ColumnRef)):
        lc, rc = table.columns[expr.left.name], table.columns[expr.right.name]
        if lc.codes is not None and rc.codes is not None:
            remap = {c: i for i, c in enumerate(lc.categories or [])}
            rr = np.array([remap.get(c, -2) for c in (rc.categories or [])], np.int64)
            rcodes = np.where(rc.codes >= 0, rr[rc.codes], -1)
            mask = {"=": lc.codes == rcodes, "!=": lc.codes != rcodes}.get(expr.op)
            if mask is None:
                raise ExecutionError("ordering comparison on categorical columns")
            return _null_false(mask, _and_validity(lc.validity, rc.validity))
    lv, lval = _eval_numeric(expr.left, table)
    rv, rval = _eval_numeric(expr.right, table)
    op = expr.op
    if op == "=":
        mask = lv == rv
    elif op == "!=":
        mask = lv != rv
    elif op == "<":
        mask = lv < rv
    elif op == "<=":
        mask = lv <= rv
    elif op == ">":
        mask = lv > rv
    else:
        mask = lv >= rv
    return _null_false(mask, _and_validity(lval, rval))


def _eval_in(expr: InList, table: Table) -> np.ndarray:
    if not isinstance(expr.item, ColumnRef):
        raise ExecutionError("IN requires a column operand")
    col = table.columns[expr.item.name]
    if col.codes is not None:
        lookup = {c: i for i, c in enumerate(col.categories or [])}
        wanted = [lookup[v.value] for v in expr.values
                  if isinstance(v.value, str) and v.value in lookup]
        mask = np.isin(col.codes, wanted) if wanted else np.zeros(len(col), bool)
    else:
        vals = [float(v.value) for v in expr.values if not isinstance(v.value, str)]
        mask = np.isin(col.as_float(), vals)
    return _null_false(mask, col.validity)


def _eval_numeric(expr: ScalarExpr, table: Table) -> tuple[np.ndarray, np.ndarray | None]:
    """Evaluate to float64 values plus validity (None when never NULL)."""
    if isinstance(expr, ColumnRef):
        col = table.columns[expr.name]
        return col.as_float(), col.validity
    if isinstance(expr, Literal):
        if isinstance(expr.value, str):
            raise ExecutionError(f"string literal {expr.value!r} in numeric context")
        v = 1.0 if expr.value is True else 0.0 if expr.value is False else float(expr.value)
        return np.broadcast_to(np.float64(v), (table.row_count,)), None
    if isinstance(expr, Arith):
        lv, lval = _eval_numeric(expr.left, table)
        rv, rval = _eval_numeric(expr.right, table)
        with np.errstate(divide="ignore", invalid="ignore"):
            if expr.op == "+":
                out = lv + rv
            elif expr.op == "-":
                out = lv - rv
            elif expr.op == "*":
                out = lv * rv
            else:
                out = lv / rv
        return out, _and_validity(lval, rval)
    if isinstance(expr, CaseWhen):
        conds = [eval_predicate(c, table) for c, _ in expr.whens]
        vals = []
        validity = None
        for _, res in expr.whens:
            v, val = _eval_numeric(res, table)
            vals.append(np.broadcast_to(v, (table.row_count,)))
            validity = _and_validity(validity, val)
        dv, dval = _eval_numeric(expr.default, table)
        validity = _and_validity(validity, dval)
        out = np.select(conds, vals, default=np.broadcast_to(dv, (table.row_count,)))
        return out, validity
    if isinstance(expr, (Compare, And, Or, Not, InList)):
        return eval_predicate(expr, table).astype(np.float64), None
    raise ExecutionError(f"cannot evaluate expression node {type(expr).__name__}")


# ---------------------------------------------------------------------------
# Config and metrics
# ---------------------------------------------------------------------------


def hardware_threads() -> int:
    return os.cpu_count() or 1


@dataclass
class ExecConfig:
    batch_size: int = 2048
    threads: int = 1
    null_policy: str = "error"  # error | drop
    engine: str = "auto"  # auto | force-direct | force-tensor

    def __post_init__(self):
        if self.batch_size < 1:
            raise ExecutionError("batch_size must be >= 1")
        if self.threads < 1:
            raise ExecutionError("threads must be >= 1")
        if self.null_policy not in ("error", "drop"):
            raise ExecutionError(f"unknown null policy: {self.null_policy!r}")
        if self.engine not in ("auto", "force-direct", "force-tensor"):
            raise ExecutionError(f"unknown engine override: {self.engine!r}")


@dataclass
class ExecMetrics:
    node_visits: int = 0
    dropped_null_rows: int = 0
    predict_rows: int = 0
    predict_batches: int = 0

    def merge(self, other: "ExecMetrics"):
        self.node_visits += other.node_visits
        self.dropped_null_rows += other.dropped_null_rows
        self.predict_rows += other.predict_rows
        self.predict_batches += other.predict_batches


# ---------------------------------------------------------------------------
# Plan execution
# ---------------------------------------------------------------------------

_PARALLEL_MIN_ROWS = 8192


class _Exec:
    def __init__(self, tables: dict[str, Table], config: ExecConfig):
        self.tables = tables
        self.config = config
        self.metrics = ExecMetrics()

    def run(self, node: PlanNode) -> Table:
        chain: list[PlanNode] = []
        cur = node
        while isinstance(cur, (Filter, Project, Predict, TensorEval)):
            chain.append(cur)
            cur = cur.child
        base = self.run_base(cur)
        chain.reverse()
        if not chain:
            return base
        if (self.config.threads > 1 and base.row_count >= _PARALLEL_MIN_ROWS
                and base.row_count >= 2 * self.config.threads):
            return self._run_chain_parallel(chain, base)
        return run_chain(chain, base, self.config, self.metrics)

    def run_base(self, node: PlanNode) -> Table:
        if isinstance(node, Scan):
            if node.table not in self.tables:
                raise ExecutionError(f"table {node.table!r} is not loaded")
            return self.tables[node.table]
        if isinstance(node, Join):
            return self._join(node)
        if isinstance(node, UnionAll):
            parts = [self.run(b) for b in node.branches]
            return concat_tables(parts[0].schema, parts)
        if isinstance(node, Udf):
            ids = node_ids(node)
            raise ExecutionError(f"unsupported UDF node {ids[id(node)]} ({node.tag})")
        return self.run(node)

    def _join(self, node: Join) -> Table:
        left = self.run(node.left)
        right = self.run(node.right)
        lkeys = [k for k, _ in node.keys]
        rkeys = [k for _, k in node.keys]
        build: dict = {}
        for key, i in zip(_key_iter(right, rkeys), range(right.row_count)):
            if key is None:
                continue
            build.setdefault(key, []).append(i)
        li: list[int] = []
        ri: list[int] = []
        for key, i in zip(_key_iter(left, lkeys), range(left.row_count)):
            if key is None:
                continue
            for j in build.get(key, ()):
                li.append(i)
                ri.append(j)
        lidx = np.asarray(li, np.int64)
        ridx = np.asarray(ri, np.int64)
        out_cols, rename = join_output_columns(left.schema, right.schema)
        cols: dict[str, ColumnData] = {}
        for c in left.schema.columns:
            cols[c.name] = left.columns[c.name].take(lidx)
        for c in right.schema.columns:
            cols[rename[c.name]] = right.columns[c.name].take(ridx)
        return Table(Schema(out_cols), cols, len(lidx))

    def _run_chain_parallel(self, chain: list[PlanNode], base: Table) -> Table:
        try:
            ctx = multiprocessing.get_context("fork")
        except ValueError:
            return run_chain(chain, base, self.config, self.metrics)
        nparts = min(self.config.threads, max(1, base.row_count // _PARALLEL_MIN_ROWS))
        if nparts == 1:
            return run_chain(chain, base, self.config, self.metrics)
        bounds = np.linspace(0, base.row_count, nparts + 1, dtype=int)
        global _WORKER_STATE
        _WORKER_STATE = (chain, base, self.config)
        try:
            with ctx.Pool(processes=nparts) as pool:
                parts = pool.map(
                    _run_partition,
                    [(int(lo), int(hi)) for lo, hi in zip(bounds[:-1], bounds[1:])],
                )
        finally:
            _WORKER_STATE = None
        tables = []
        for table, metrics in parts:
            tables.append(table)
            self.metrics.merge(metrics)
        return concat_tables(tables[0].schema, tables)


_WORKER_STATE = None


def _run_partition(span: tuple[int, int]):
    chain, base, config = _WORKER_STATE
    lo, hi = span
    metrics = ExecMetrics()
    out = run_chain(chain, base.slice(lo, hi), config, metrics)
    return out, metrics


def _key_iter(table: Table, keys: list[str]):
    cols = [table.columns[k] for k in keys]
    arrays = []
    for c in cols:
        if c.codes is not None:
            cats = c.categories or []
            arrays.append([cats[k] if k >= 0 else None for k in c.codes])
        else:
            arrays.append(c.values.tolist())
    validities = [c.validity for c in cols]
    for i in range(table.row_count):
        key = []
        ok = True
        for arr, val in zip(arrays, validities):
            if (val is not None and not val[i]) or arr[i] is None:
                ok = False
                break
            key.append(arr[i])
        yield tuple(key) if ok else None


def run_chain(chain: list[PlanNode], table: Table, config: ExecConfig,
              metrics: ExecMetrics) -> Table:
    for op in chain:
        if isinstance(op, Filter):
            mask = eval_predicate(op.predicate, table)
            table = table.take(mask)
        elif isinstance(op, Project):
            table = _project(op, table)
        elif isinstance(op, Predict):
            table = _predict(op, table, config, metrics)
        elif isinstance(op, TensorEval):
            table = _tensor_eval(op, table, config, metrics)
    return table


def _project(op: Project, table: Table) -> Table:
    cols: dict[str, ColumnData] = {}
    schema_cols = []
    for name, expr in op.columns:
        if isinstance(expr, ColumnRef):
            src = table.columns[expr.name]
            cols[name] = src
            col = table.schema.col(expr.name)
            schema_cols.append(Column(name, col.type, col.nullable))
            continue
        t = expr_type(expr, table.schema)
        if t == ColType.CATEGORICAL:
            if not isinstance(expr, Literal):
                raise ExecutionError("computed categorical projections are not supported")
            codes = np.zeros(table.row_count, np.int64)
            cols[name] = ColumnData(codes=codes, categories=[str(expr.value)])
            schema_cols.append(Column(name, t, False))
            continue
        if t == ColType.BOOLEAN:
            mask = eval_predicate(expr, table)
            cols[name] = ColumnData(values=mask.astype(np.uint8))
            schema_cols.append(Column(name, t, False))
            continue
        values, validity = _eval_numeric(expr, table)
        cols[name] = ColumnData(values=np.ascontiguousarray(values, np.float64),
                                validity=validity)
        schema_cols.append(Column(name, t, validity is not None))
    return Table(Schema(tuple(schema_cols)), cols, table.row_count)


def _apply_null_policy(table: Table, required_validity, config: ExecConfig,
                       metrics: ExecMetrics) -> Table:
    if required_validity is None:
        return table
    if required_validity.all():
        return table
    if config.null_policy == "error":
        row = int(np.nonzero(~required_validity)[0][0])
        raise ExecutionError(f"NULL in model-required feature at row {row}")
    metrics.dropped_null_rows += int((~required_validity).sum())
    return table.take(required_validity)


def _predict(op: Predict, table: Table, config: ExecConfig,
             metrics: ExecMetrics) -> Table:
    pipeline = op.pipeline
    from .cluster import ClusterDispatch  # local import to avoid a cycle

    if isinstance(pipeline, ClusterDispatch):
        return _predict_dispatch(op, pipeline, table, config, metrics)
    from .tensor import TensorModel, translate_pipeline

    if isinstance(pipeline, TensorModel):
        bindings = tuple(b.with_column(col) for b, col
                         in zip(pipeline.bindings, op.inputs))
        shim = TensorEval(op.child, op.model, pipeline.graph, bindings, op.outputs)
        return _tensor_eval(shim, table, config, metrics)
    if config.engine == "force-tensor" and isinstance(pipeline, ModelPipeline):
        tm = translate_pipeline(pipeline)
        bindings = tuple(b.with_column(col) for b, col in zip(tm.bindings, op.inputs))
        shim = TensorEval(op.child, op.model, tm.graph, bindings, op.outputs)
        return _tensor_eval(shim, table, config, metrics)

    compiled = compile_pipeline(pipeline)
    views = {name: table.column_view(col)
             for (name, _), col in zip(compiled.inputs, op.inputs)}
    table = _apply_null_policy(table, compiled.required_validity(views), config, metrics)
    if table.row_count == 0:
        return _append_outputs(table, op.outputs, np.empty((0, len(op.outputs))))
    views = {name: table.column_view(col)
             for (name, _), col in zip(compiled.inputs, op.inputs)}
    n = table.row_count
    out = np.empty((n, len(op.outputs)), np.float64)
    for lo in range(0, n, config.batch_size):
        hi = min(lo + config.batch_size, n)
        batch = {name: _slice_view(v, lo, hi) for name, v in views.items()}
        scores, visits = compiled.predict(batch, hi - lo)
        out[lo:hi, :] = scores
        metrics.node_visits += visits
        metrics.predict_batches += 1
    metrics.predict_rows += n
    return _append_outputs(table, op.outputs, out)


def _predict_dispatch(op: Predict, dispatch, table: Table, config: ExecConfig,
                      metrics: ExecMetrics) -> Table:
    from .cluster import route_rows

    fallback = compile_pipeline(dispatch.fallback)
    views = {name: table.column_view(col)
             for (name, _), col in zip(fallback.inputs, op.inputs)}
    table = _apply_null_policy(table, fallback.required_validity(views), config, metrics)
    if table.row_count == 0:
        return _append_outputs(table, op.outputs, np.empty((0, len(op.outputs))))
    views = {name: table.column_view(col)
             for (name, _), col in zip(fallback.inputs, op.inputs)}
    out = np.empty((table.row_count, len(op.outputs)), np.float64)
    assignment = route_rows(dispatch, views)
    for which, pipeline in [(-1, dispatch.fallback)] + [
        (k, c.pipeline) for k, c in enumerate(dispatch.clusters)
    ]:
        mask = assignment == which
        if not mask.any():
            continue
        compiled = compile_pipeline(pipeline)
        sub = {name: _mask_view(views[name], mask) for name, _ in compiled.inputs}
        n_sub = int(mask.sum())
        scores = np.empty((n_sub, len(op.outputs)), np.float64)
        for lo in range(0, n_sub, config.batch_size):
            hi = min(lo + config.batch_size, n_sub)
            batch = {name: _slice_view(v, lo, hi) for name, v in sub.items()}
            s, visits = compiled.predict(batch, hi - lo)
            scores[lo:hi, :] = s
            metrics.node_visits += visits
            metrics.predict_batches += 1
        out[mask, :] = scores
    metrics.predict_rows += table.row_count
    return _append_outputs(table, op.outputs, out)


def _tensor_eval(op: TensorEval, table: Table, config: ExecConfig,
                 metrics: ExecMetrics) -> Table:
    from .tensor import eval_graph

    live = {inp.name for inp in op.graph.input_nodes()}
    required = None
    for b in op.bindings:
        if b.input not in live:
            continue
        v = table.columns[b.column].validity
        if v is not None:
            required = v.copy() if required is None else (required & v)
    table = _apply_null_policy(table, required, config, metrics)
    if table.row_count == 0:
        return _append_outputs(table, op.outputs, np.empty((0, len(op.outputs))))

    n = table.row_count
    arrays: dict[str, np.ndarray] = {}
    for b in op.bindings:
        if b.input not in live:
            continue
        col = table.columns[b.column]
        if b.kind == "category":
            remap = {c: i for i, c in enumerate(b.categories)}
            table_cats = col.categories or []
            lut = np.array([remap.get(c, -1) for c in table_cats], np.int64)
            codes = np.where(col.codes >= 0, lut[np.maximum(col.codes, 0)], -1)
            arrays[b.input] = codes.reshape(-1, 1)
        else:
            arrays[b.input] = col.as_float().reshape(-1, 1)
    out = np.empty((n, len(op.outputs)), np.float64)
    for lo in range(0, n, config.batch_size):
        hi = min(lo + config.batch_size, n)
        batch = {name: a[lo:hi] for name, a in arrays.items()}
        result = eval_graph(op.graph, batch)
        block = np.concatenate([np.asarray(v, np.float64) for v in result.values()],
                               axis=1)
        if block.shape[0] == 1 and hi - lo > 1:
            block = np.broadcast_to(block, (hi - lo, block.shape[1]))
        out[lo:hi, :] = block
        metrics.predict_batches += 1
    metrics.predict_rows += n
    return _append_outputs(table, op.outputs, out)


def _slice_view(v: ColumnView, lo: int, hi: int) -> ColumnView:
    return ColumnView(
        None if v.values is None else v.values[lo:hi],
        None if v.codes is None else v.codes[lo:hi],
        v.categories,
        None if v.validity is None else v.validity[lo:hi],
    )


def _mask_view(v: ColumnView, mask: np.ndarray) -> ColumnView:
    return ColumnView(
        None if v.values is None else v.values[mask],
        None if v.codes is None else v.codes[mask],
        v.categories,
        None if v.validity is None else v.validity[mask],
    )


def _append_outputs(table: Table, names: tuple[str, ...], values: np.ndarray) -> Table:
    cols = dict(table.columns)
    schema_cols = list(table.schema.columns)
    for j, name in enumerate(names):
        cols[name] = ColumnData(values=np.ascontiguousarray(values[:, j]))
        schema_cols.append(Column(name, ColType.NUMERIC, False))
    return Table(Schema(tuple(schema_cols)), cols, table.row_count)


def execute(plan: PlanNode, tables: dict[str, Table],
            config: ExecConfig | None = None) -> Table:
    table, _ = execute_with_metrics(plan, tables, config)
    return table


def execute_with_metrics(plan: PlanNode, tables: dict[str, Table],
                         config: ExecConfig | None = None) -> tuple[Table, ExecMetrics]:
    config = config or ExecConfig()
    ex = _Exec(tables, config)
    out = ex.run(plan)
    return out, ex.metrics


# ---------------------------------------------------------------------------
# Benchmarks
# ---------------------------------------------------------------------------


def bench(plan: PlanNode, tables: dict[str, Table], grid: list[dict],
          warmup: int = 1, runs: int = 3) -> list[dict]:
    """Wall-clock per configuration; mean over `runs` warm runs.

    Grid entries may set batch_size, threads, null_policy and max_rows.  A
    max_rows cap slices every table so slow configurations (e.g. batch 1)
    can be measured by steady-state throughput instead of total time.
    """
    report = []
    for entry in grid:
        max_rows = entry.get("max_rows")
        db = tables
        if max_rows is not None:
            db = {name: t.slice(0, min(max_rows, t.row_count))
                  for name, t in tables.items()}
        config = ExecConfig(
            batch_size=entry.get("batch_size", 2048),
            threads=entry.get("threads", 1),
            null_policy=entry.get("null_policy", "error"),
        )
        rows = max((t.row_count for t in db.values()), default=0)
        samples = []
        metrics = ExecMetrics()
        result_rows = 0
        for i in range(warmup + runs):
            t0 = time.perf_counter()
            out, m = execute_with_metrics(plan, db, config)
            dt = time.perf_counter() - t0
            if i >= warmup:
                samples.append(dt)
                metrics = m
                result_rows = out.row_count
        mean_s = sum(samples) / len(samples)
        report.append({
            "batch_size": config.batch_size,
            "threads": config.threads,
            "max_rows": max_rows,
            "rows": rows,
            "result_rows": result_rows,
            "runs_s": [round(s, 6) for s in samples],
            "mean_s": round(mean_s, 6),
            "rows_per_s": round(rows / mean_s, 1) if mean_s > 0 else float("inf"),
            "node_visits": metrics.node_visits,
            "visits_per_row": round(metrics.node_visits / max(1, metrics.predict_rows), 4),
        })
    return report
