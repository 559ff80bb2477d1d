"""Command-line interface.

    inferq optimize        --workspace WS QUERY.sql [--rules ...] [--explain]
    inferq run             --workspace WS QUERY.sql [--no-opt] [--out FILE]
    inferq validate        --workspace WS QUERY.sql [--trials N] [--seed S]
    inferq bench           --workspace WS QUERY.sql [--batch-grid ...] [--thread-grid ...]
    inferq cluster-compile --workspace WS --model M --table T --k K
    inferq stats           --workspace WS [--table T]

Exit codes: 0 ok, 1 semantic/runtime error, 2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np

from .analysis import stats_to_json
from .catalog import Workspace, load_workspace
from .cluster import serialize_cluster_dispatch, timed_cluster_compile
from .codegen import emit_sql
from .errors import InferqError
from .executor import ExecConfig, Table, bench, execute_with_metrics, hardware_threads, write_csv
from .models import ModelPipeline
from .parser import parse_sql
from .rules import optimize, rule_config_from_spec


def _add_common(p: argparse.ArgumentParser, query: bool = True):
    p.add_argument("--workspace", required=True, help="workspace directory")
    if query:
        p.add_argument("query", help="path to the query .sql file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--threads", type=int, default=None,
                   help="worker processes (default: hardware parallelism)")
    p.add_argument("--batch", type=int, default=2048, help="inference batch size")
    p.add_argument("--null-policy", choices=["error", "drop"], default="error")
    p.add_argument("--rules", default="all",
                   help="'all', 'none' or a comma list of rule names")
    p.add_argument("--explain", action="store_true",
                   help="print before/after plans for every fired rule")


def build_arg_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="inferq",
                                 description="Compile, optimize and run inference queries.")
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("optimize", help="show the rule trace and emitted SQL")
    _add_common(p)
    p.add_argument("--save-derived", metavar="DIR",
                   help="persist derived models referenced by the emitted SQL")

    p = sub.add_parser("run", help="execute a query and write the result CSV")
    _add_common(p)
    p.add_argument("--no-opt", action="store_true", help="execute the naive plan")
    p.add_argument("--out", help="result CSV path (default: stdout)")

    p = sub.add_parser("validate", help="compare naive vs optimized execution")
    _add_common(p)
    p.add_argument("--trials", type=int, default=20,
                   help="seeded data perturbations to test (0: workspace data only)")

    p = sub.add_parser("bench", help="benchmark batch sizes and worker counts")
    _add_common(p)
    p.add_argument("--batch-grid", default="1,64,2048")
    p.add_argument("--thread-grid", default="1")
    p.add_argument("--runs", type=int, default=3)
    p.add_argument("--max-rows-batch1", type=int, default=None,
                   help="cap rows for batch-1 configs (throughput extrapolates)")
    p.add_argument("--no-opt", action="store_true")
    p.add_argument("--report-dir", default="bench_report",
                   help="directory for CSV/JSON metrics and figures")

    p = sub.add_parser("cluster-compile",
                       help="k-means specialize a model over a table sample")
    _add_common(p, query=False)
    p.add_argument("--model", required=True)
    p.add_argument("--table", required=True)
    p.add_argument("--k", type=int, default=None, help="cluster count")
    p.add_argument("--report-dir", default=None,
                   help="directory for the cluster report and figure")

    p = sub.add_parser("stats", help="dump collected column statistics as JSON")
    _add_common(p, query=False)
    p.add_argument("--table", default=None)
    return ap


def _read_query(path: str) -> str:
    return Path(path).read_text()


def _config(args) -> ExecConfig:
    return ExecConfig(
        batch_size=args.batch,
        threads=args.threads if args.threads is not None else hardware_threads(),
        null_policy=args.null_policy,
    )


def _optimize(ws: Workspace, plan, args):
    config = rule_config_from_spec(args.rules, null_policy=args.null_policy,
                                   cluster_seed=args.seed)
    return optimize(plan, ws.catalog, config, ws.table_stats)


def _print_trace(result, explain: bool, out=sys.stdout):
    if not result.traces:
        print("no rules fired (identity plan)", file=out)
    for t in result.traces:
        print(t.summary(), file=out)
        if explain:
            print("  before:", file=out)
            for line in t.before.splitlines():
                print(f"    {line}", file=out)
            print("  after:", file=out)
            for line in t.after.splitlines():
                print(f"    {line}", file=out)


def cmd_optimize(args) -> int:
    ws = load_workspace(args.workspace)
    plan = parse_sql(_read_query(args.query), ws.catalog)
    result = _optimize(ws, plan, args)
    _print_trace(result, args.explain)
    sql = emit_sql(result.plan, ws.catalog)
    if args.save_derived:
        outdir = Path(args.save_derived)
        outdir.mkdir(parents=True, exist_ok=True)
        from .pipeline_json import serialize_pipeline
        from .tensor import TensorModel, serialize_tensor_model

        for name, payload in result.registered.items():
            if isinstance(payload, TensorModel):
                doc = serialize_tensor_model(payload)
            elif isinstance(payload, ModelPipeline):
                doc = serialize_pipeline(payload)
            else:
                doc = serialize_cluster_dispatch(payload)
            (outdir / f"{name}.json").write_text(json.dumps(doc, indent=2))
    print(sql)
    return 0


def cmd_run(args) -> int:
    ws = load_workspace(args.workspace)
    plan = parse_sql(_read_query(args.query), ws.catalog)
    if not args.no_opt:
        result = _optimize(ws, plan, args)
        if args.explain:
            _print_trace(result, True, out=sys.stderr)
        plan = result.plan
    t0 = time.perf_counter()
    table, metrics = execute_with_metrics(plan, ws.tables, _config(args))
    elapsed = time.perf_counter() - t0
    if args.out:
        write_csv(table, args.out)
    else:
        write_csv(table, sys.stdout)
    print(
        f"{table.row_count} row(s) in {elapsed:.4f}s"
        + (f", {metrics.dropped_null_rows} row(s) dropped for NULLs"
           if metrics.dropped_null_rows else ""),
        file=sys.stderr,
    )
    return 0


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def _perturb_tables(ws: Workspace, rng: np.random.Generator) -> dict[str, Table]:
    """Seeded data perturbation preserving schema, keys and NULL positions."""
    from .analysis import collect_stats
    from .executor import ColumnData
    from .ir import ColType

    protected: dict[str, set[str]] = {}
    for name, decl in ws.catalog.tables.items():
        cols = set()
        for uk in decl.unique_keys:
            cols.update(uk)
        for fk in decl.foreign_keys:
            cols.update(fk.columns)
            ref = ws.catalog.tables.get(fk.ref_table)
            if ref is not None:
                protected.setdefault(fk.ref_table, set()).update(fk.ref_columns)
        protected.setdefault(name, set()).update(cols)

    out: dict[str, Table] = {}
    for name, table in ws.tables.items():
        cols: dict[str, ColumnData] = {}
        for col in table.schema.columns:
            data = table.columns[col.name]
            if col.name in protected.get(name, set()):
                cols[col.name] = data
                continue
            valid = data.validity
            if col.type == ColType.CATEGORICAL:
                codes = data.codes.copy()
                uniq = np.unique(codes[codes >= 0])
                if len(uniq):
                    swap = rng.random(len(codes)) < 0.3
                    swap &= codes >= 0
                    codes[swap] = rng.choice(uniq, size=int(swap.sum()))
                cols[col.name] = ColumnData(codes=codes, categories=data.categories,
                                            validity=valid)
            elif col.type == ColType.BOOLEAN:
                vals = data.values.copy()
                flip = rng.random(len(vals)) < 0.1
                vals[flip] = 1 - vals[flip]
                cols[col.name] = ColumnData(values=vals, validity=valid)
            else:
                vals = data.values.copy()
                uniq = np.unique(vals)
                if len(uniq) <= 10:
                    swap = rng.random(len(vals)) < 0.3
                    vals[swap] = rng.choice(uniq, size=int(swap.sum()))
                else:
                    scale = max(1e-9, float(np.std(vals)))
                    vals = vals + rng.normal(0.0, 0.05 * scale, len(vals))
                cols[col.name] = ColumnData(values=vals, validity=valid)
        t = Table(table.schema, cols, table.row_count)
        t.stats = collect_stats(t)
        out[name] = t
    return out


def _sorted_rows(table: Table) -> list[tuple]:
    def key(row):
        return tuple(
            (round(v, 9) if isinstance(v, float) else (v is None, v)) for v in row
        )

    return sorted(table.rows(), key=lambda r: tuple(str(key(r)).split()))


def compare_bags(a: Table, b: Table, rtol: float = 1e-6) -> tuple[bool, float, str]:
    """(match, max relative deviation, first mismatch description)."""
    if a.schema.names != b.schema.names:
        return False, float("inf"), "schemas differ"
    if a.row_count != b.row_count:
        return False, float("inf"), f"row counts differ: {a.row_count} vs {b.row_count}"
    ra = _sorted_rows(a)
    rb = _sorted_rows(b)
    max_dev = 0.0
    for i, (x, y) in enumerate(zip(ra, rb)):
        for vx, vy in zip(x, y):
            if isinstance(vx, float) and isinstance(vy, float):
                dev = abs(vx - vy) / max(1.0, abs(vy))
                max_dev = max(max_dev, dev)
                if dev > rtol:
                    return False, max_dev, f"row {i}: {x} vs {y}"
            elif vx != vy:
                return False, float("inf"), f"row {i}: {x} vs {y}"
    return True, max_dev, ""


def cmd_validate(args) -> int:
    ws = load_workspace(args.workspace)
    sql = _read_query(args.query)
    config = _config(args)
    failures = 0
    max_dev = 0.0

    def one_trial(label: str, tables: dict[str, Table]) -> None:
        nonlocal failures, max_dev
        stats = {n: t.stats for n, t in tables.items()}
        plan = parse_sql(sql, ws.catalog)
        naive = execute_with_metrics(plan, tables, config)[0]
        opt_result = optimize(
            plan, ws.catalog,
            rule_config_from_spec(args.rules, null_policy=args.null_policy,
                                  cluster_seed=args.seed),
            stats,
        )
        optimized = execute_with_metrics(opt_result.plan, tables, config)[0]
        ok, dev, detail = compare_bags(optimized, naive)
        max_dev = max(max_dev, dev if dev != float("inf") else max_dev)
        status = "ok" if ok else "MISMATCH"
        print(f"{label}: {status} ({naive.row_count} rows, max deviation {dev:.3e})")
        if not ok:
            failures += 1
            print(f"  counterexample: {detail}")

    one_trial("workspace data", ws.tables)
    for trial in range(args.trials):
        rng = np.random.default_rng(args.seed + trial + 1)
        one_trial(f"perturbation {trial + 1}", _perturb_tables(ws, rng))

    print(f"validate: {'PASS' if failures == 0 else 'FAIL'} "
          f"({args.trials + 1} dataset(s), max deviation {max_dev:.3e})")
    return 0 if failures == 0 else 1


def cmd_bench(args) -> int:
    from .report import write_bench_report

    ws = load_workspace(args.workspace)
    plan = parse_sql(_read_query(args.query), ws.catalog)
    if not args.no_opt:
        plan = _optimize(ws, plan, args).plan
    grid = []
    for batch in [int(x) for x in args.batch_grid.split(",") if x]:
        for threads in [int(x) for x in args.thread_grid.split(",") if x]:
            entry = {"batch_size": batch, "threads": threads,
                     "null_policy": args.null_policy}
            if batch == 1 and args.max_rows_batch1:
                entry["max_rows"] = args.max_rows_batch1
            grid.append(entry)
    entries = bench(plan, ws.tables, grid, runs=args.runs)
    for e in entries:
        print(f"batch {e['batch_size']:>6}  workers {e['threads']:>2}  "
              f"{e['mean_s']:>9.4f}s  {e['rows_per_s']:>12.1f} rows/s  "
              f"visits/row {e['visits_per_row']}")
    written = write_bench_report(entries, args.report_dir)
    print("report written to: " + ", ".join(str(p) for p in written), file=sys.stderr)
    return 0


def cmd_cluster_compile(args) -> int:
    from .report import write_cluster_report

    ws = load_workspace(args.workspace)
    pipeline = ws.catalog.model(args.model)
    if not isinstance(pipeline, ModelPipeline):
        raise InferqError(f"{args.model!r} is not a plain pipeline model")
    if args.table not in ws.tables:
        raise InferqError(f"table {args.table!r} is not in the workspace")
    k = args.k if args.k is not None else 4
    dispatch, report = timed_cluster_compile(ws.tables[args.table], pipeline, k,
                                             args.seed)
    derived = f"{args.model}__clusters_k{k}"
    path = Path(args.workspace) / f"{derived}.json"
    path.write_text(json.dumps(serialize_cluster_dispatch(dispatch), indent=2))

    catalog_path = Path(args.workspace) / "catalog.json"
    doc = json.loads(catalog_path.read_text())
    doc.setdefault("models", {})[derived] = {"path": path.name}
    catalog_path.write_text(json.dumps(doc, indent=2))

    print(f"registered {derived} ({path.name}), compile time "
          f"{report['compile_time_s']}s")
    print(f"original model features: {report['original_features']}")
    for i, c in enumerate(report["clusters"]):
        consts = ", ".join(f"{k_}={v}" for k_, v in c["constants"].items()) or "none"
        print(f"  cluster {i}: {c['features']} features (constants: {consts})")
    if args.report_dir:
        written = write_cluster_report(report, args.report_dir)
        print("report written to: " + ", ".join(str(p) for p in written),
              file=sys.stderr)
    return 0


def cmd_stats(args) -> int:
    ws = load_workspace(args.workspace)
    names = [args.table] if args.table else sorted(ws.tables)
    out = {}
    for name in names:
        if name not in ws.tables:
            raise InferqError(f"table {name!r} is not in the workspace")
        out[name] = stats_to_json(ws.tables[name].stats)
    print(json.dumps(out, indent=2))
    return 0


_COMMANDS = {
    "optimize": cmd_optimize,
    "run": cmd_run,
    "validate": cmd_validate,
    "bench": cmd_bench,
    "cluster-compile": cmd_cluster_compile,
    "stats": cmd_stats,
}


def main(argv: list[str] | None = None) -> int:
    args = build_arg_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except InferqError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
