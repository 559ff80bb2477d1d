"""inferq: compile, optimize and execute SQL inference queries over ML pipelines."""

from .catalog import Catalog, load_catalog, load_workspace
from .codegen import emit_sql, plans_equivalent
from .executor import ExecConfig, Table, bench, execute, execute_with_metrics, load_csv
from .ir import explain_plan, output_schema, validate_plan
from .models import ModelPipeline
from .parser import bind, parse_sql
from .pipeline_json import load_pipeline, serialize_pipeline
from .rules import RuleConfig, optimize

__all__ = [
    "Catalog",
    "ExecConfig",
    "ModelPipeline",
    "RuleConfig",
    "Table",
    "bench",
    "bind",
    "emit_sql",
    "execute",
    "execute_with_metrics",
    "explain_plan",
    "load_catalog",
    "load_csv",
    "load_pipeline",
    "load_workspace",
    "optimize",
    "output_schema",
    "parse_sql",
    "plans_equivalent",
    "serialize_pipeline",
    "validate_plan",
]
