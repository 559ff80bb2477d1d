"""Exception hierarchy shared across the package."""

from __future__ import annotations


class InferqError(Exception):
    """Base class for every error raised by this package."""


class ParseError(InferqError):
    """SQL text could not be parsed.

    Carries the character offset of the offending token when known.
    """

    def __init__(self, message: str, position: int | None = None):
        self.position = position
        if position is not None:
            message = f"syntax error at position {position}: {message}"
        super().__init__(message)


class UnsupportedSqlError(ParseError):
    """The text is valid SQL but uses a construct outside the supported subset."""

    def __init__(self, construct: str, position: int | None = None):
        self.construct = construct
        super().__init__(f"unsupported construct: {construct}", position)


class PipelineFormatError(InferqError):
    """A pipeline/model JSON document violates the documented schema."""


class BindError(InferqError):
    """Plan references and model inputs could not be bound against the catalog."""


class PlanError(InferqError):
    """A plan violates structural invariants (raised by schema derivation)."""


class CatalogError(InferqError):
    """Workspace or catalog contents are missing or inconsistent."""


class ExecutionError(InferqError):
    """Runtime failure while executing a plan."""


class ShapeError(InferqError):
    """Tensor graph shapes are inconsistent."""


class SqlEmitError(InferqError):
    """A plan contains a node that cannot be rendered back to SQL."""
