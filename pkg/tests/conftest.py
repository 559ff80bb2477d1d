import json
from pathlib import Path

import numpy as np
import pytest

from inferq.catalog import Catalog, TableDecl, load_workspace
from inferq.executor import ColumnData, Table
from inferq.ir import ColType, Column, Schema

REPO = Path(__file__).resolve().parent.parent
WORKSPACES = REPO / "workspaces"


@pytest.fixture
def hospital_ws():
    return load_workspace(WORKSPACES / "hospital")


@pytest.fixture
def flights_ws():
    return load_workspace(WORKSPACES / "flights")


@pytest.fixture
def hospital_query():
    return (WORKSPACES / "hospital" / "query.sql").read_text()


def numeric_table(schema_cols, arrays, with_stats=True) -> Table:
    """Quick Table builder: {name: ndarray|list}, numeric/categorical by dtype."""
    cols = {}
    schema = []
    for name, t in schema_cols:
        schema.append(Column(name, t))
        arr = arrays[name]
        if t == ColType.CATEGORICAL:
            cats, codes = np.unique(np.asarray(arr, dtype=object), return_inverse=True)
            cols[name] = ColumnData(codes=codes.astype(np.int64), categories=list(cats))
        elif t == ColType.BOOLEAN:
            cols[name] = ColumnData(values=np.asarray(arr, dtype=np.uint8))
        else:
            cols[name] = ColumnData(values=np.asarray(arr, dtype=np.float64))
    return Table.from_columns(Schema(tuple(schema)), cols, with_stats=with_stats)


def single_table_catalog(name: str, schema: Schema, models: dict | None = None) -> Catalog:
    catalog = Catalog()
    catalog.add_table(TableDecl(name, schema))
    for mname, payload in (models or {}).items():
        catalog.add_model(mname, payload)
    return catalog


def sorted_rows(table: Table):
    return sorted(table.rows(), key=lambda r: tuple(str(v) for v in r))


def bags_equal(a: Table, b: Table) -> bool:
    return sorted_rows(a) == sorted_rows(b)
