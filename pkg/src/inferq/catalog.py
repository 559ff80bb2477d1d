"""Catalog of tables, constraints and registered models; workspace loading.

A workspace is a directory holding `catalog.json`, the CSV data files and the
model JSON files it references:

    {
      "tables": {
        "patient_info": {
          "path": "patient_info.csv",
          "schema": [{"name": "id", "type": "numeric", "nullable": false}, ...],
          "unique_keys": [["id"]],
          "foreign_keys": [
            {"columns": ["id"], "ref_table": "blood_tests", "ref_columns": ["pid"]}
          ]
        }
      },
      "models": {"M": {"path": "los_model.json"}}
    }

Constraint declarations are what join elimination relies on; without them no
join is ever removed.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import CatalogError
from .ir import ColType, Column, Schema


@dataclass(frozen=True)
class ForeignKey:
    columns: tuple[str, ...]
    ref_table: str
    ref_columns: tuple[str, ...]


@dataclass(frozen=True)
class TableDecl:
    name: str
    schema: Schema
    path: str | None = None
    unique_keys: tuple[tuple[str, ...], ...] = ()
    foreign_keys: tuple[ForeignKey, ...] = ()


class Catalog:
    """Mutable registry: table declarations plus loaded model objects.

    The optimizer registers derived models here (suffixed names such as
    `M__pruned_1`) so that emitted SQL remains resolvable.
    """

    def __init__(self):
        self.tables: dict[str, TableDecl] = {}
        self.models: dict[str, object] = {}
        self._derived_counters: dict[tuple[str, str], int] = {}

    # -- tables --------------------------------------------------------------

    def add_table(self, decl: TableDecl):
        if decl.name in self.tables:
            raise CatalogError(f"duplicate table name: {decl.name!r}")
        self.tables[decl.name] = decl

    def has_table(self, name: str) -> bool:
        return name in self.tables

    def table_schema(self, name: str) -> Schema:
        if name not in self.tables:
            raise CatalogError(f"unknown table: {name!r}")
        return self.tables[name].schema

    def unique_keys(self, table: str) -> tuple[tuple[str, ...], ...]:
        return self.tables[table].unique_keys if table in self.tables else ()

    def foreign_keys(self, table: str) -> tuple[ForeignKey, ...]:
        return self.tables[table].foreign_keys if table in self.tables else ()

    # -- models ---------------------------------------------------------------

    def add_model(self, name: str, payload: object):
        if name in self.models:
            raise CatalogError(f"duplicate model name: {name!r}")
        self.models[name] = payload

    def has_model(self, name: str) -> bool:
        return name in self.models

    def model(self, name: str) -> object:
        if name not in self.models:
            raise CatalogError(f"unknown model: {name!r}")
        return self.models[name]

    def register_derived(self, base: str, kind: str, payload: object) -> str:
        """Register an optimizer-made model under `base__kind_N` and return the name."""
        root = base.split("__", 1)[0]
        n = self._derived_counters.get((root, kind), 0) + 1
        self._derived_counters[(root, kind)] = n
        name = f"{root}__{kind}_{n}"
        while name in self.models:
            n += 1
            self._derived_counters[(root, kind)] = n
            name = f"{root}__{kind}_{n}"
        self.models[name] = payload
        return name

    def drop_models(self, names: set[str]):
        for n in names:
            self.models.pop(n, None)


_COL_TYPES = {t.value: t for t in ColType}


def _parse_schema(cols: list, where: str) -> Schema:
    out = []
    for i, c in enumerate(cols):
        if not isinstance(c, dict) or "name" not in c or "type" not in c:
            raise CatalogError(f"{where}.schema[{i}]: expected name and type")
        if c["type"] not in _COL_TYPES:
            raise CatalogError(f"{where}.schema[{i}]: unknown type {c['type']!r}")
        out.append(Column(str(c["name"]), _COL_TYPES[c["type"]], bool(c.get("nullable", False))))
    return Schema(tuple(out))


def load_catalog(workspace: str | Path) -> Catalog:
    """Parse catalog.json and model documents; does not load table data."""
    from .pipeline_json import load_model_document

    root = Path(workspace)
    path = root / "catalog.json"
    if not path.is_file():
        raise CatalogError(f"no catalog.json in workspace {root}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise CatalogError(f"catalog.json: {exc}") from exc

    catalog = Catalog()
    for name, t in doc.get("tables", {}).items():
        schema = _parse_schema(t.get("schema", []), f"tables.{name}")
        fks = tuple(
            ForeignKey(tuple(fk["columns"]), str(fk["ref_table"]), tuple(fk["ref_columns"]))
            for fk in t.get("foreign_keys", [])
        )
        uks = tuple(tuple(k) for k in t.get("unique_keys", []))
        csv_path = t.get("path")
        if csv_path is not None and not (root / csv_path).is_file():
            raise CatalogError(f"tables.{name}: data file not found: {csv_path}")
        catalog.add_table(TableDecl(name, schema, csv_path, uks, fks))
    for name, m in doc.get("models", {}).items():
        mpath = root / m["path"]
        if not mpath.is_file():
            raise CatalogError(f"models.{name}: file not found: {m['path']}")
        try:
            catalog.add_model(name, load_model_document(json.loads(mpath.read_text())))
        except json.JSONDecodeError as exc:
            raise CatalogError(f"models.{name}: {exc}") from exc
    return catalog


@dataclass
class Workspace:
    root: Path
    catalog: Catalog
    tables: dict[str, object] = field(default_factory=dict)  # name -> executor.Table

    @property
    def table_stats(self) -> dict[str, dict]:
        return {name: t.stats for name, t in self.tables.items() if t.stats is not None}


def load_workspace(path: str | Path) -> Workspace:
    """Load the catalog and every declared CSV table (stats are collected on load)."""
    from .executor import load_csv

    root = Path(path)
    catalog = load_catalog(root)
    tables = {}
    for name, decl in catalog.tables.items():
        if decl.path is not None:
            tables[name] = load_csv(root / decl.path, decl.schema)
    return Workspace(root, catalog, tables)
