"""Recursive-descent parser for the supported SQL subset.

    query      := select (UNION ALL select)*
    select     := SELECT proj_list FROM name (JOIN name ON col = col)*
                  (WHERE conjunction)?
    proj_list  := '*' (',' item)* | item (',' item)*
    item       := value_expr (AS name)?
    value_expr := term (('+'|'-') term)* ; term := factor (('*'|'/') factor)*
    factor     := literal | name | PREDICT '(' name (',' name)* ')'
                | CASE (WHEN cond THEN value_expr)+ ELSE value_expr END
                | '(' value_expr ')'
    conjunction:= disjunct (AND disjunct)* ; disjunct := atom (OR atom)*
    atom       := operand cmp literal | operand IN '(' literal (',' literal)* ')'
    literal    := number | 'string' | TRUE | FALSE

Keywords are case-insensitive, identifiers case-sensitive.  A top-level OR
chain over a single column collapses to IN; any other disjunction, and every
construct outside the grammar (GROUP BY, subqueries, outer joins, NOT, ...)
raises an explicit "unsupported" error.  `PREDICT(...)` in the WHERE clause
is normalized into a Predict node plus a filter over its output column;
identical calls share one node.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .catalog import Catalog
from .errors import BindError, CatalogError, ParseError, UnsupportedSqlError
from .ir import (
    And,
    Arith,
    CaseWhen,
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
    UnionAll,
    expr_columns,
    join_output_columns,
    output_schema,
    validate_plan,
)

KEYWORDS = {
    "SELECT", "FROM", "WHERE", "JOIN", "ON", "AND", "OR", "IN", "TRUE", "FALSE",
    "AS", "PREDICT", "UNION", "ALL", "CASE", "WHEN", "THEN", "ELSE", "END",
}

UNSUPPORTED = {
    "GROUP": "GROUP BY", "ORDER": "ORDER BY", "HAVING": "HAVING",
    "LIMIT": "LIMIT", "OUTER": "OUTER JOIN", "LEFT": "LEFT JOIN",
    "RIGHT": "RIGHT JOIN", "FULL": "FULL JOIN", "CROSS": "CROSS JOIN",
    "DISTINCT": "DISTINCT", "NOT": "NOT", "IS": "IS NULL", "NULL": "NULL literal",
    "BETWEEN": "BETWEEN", "LIKE": "LIKE", "EXISTS": "EXISTS",
}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<number>\d+(?:\.\d+)?(?:[eE][+-]?\d+)?)"
    r"|(?P<ident>[A-Za-z_][A-Za-z0-9_]*)"
    r"|(?P<string>'(?:[^']|'')*')"
    r"|(?P<op><=|>=|!=|<>|[(),*=<>+\-/]))"
)


@dataclass(frozen=True)
class Token:
    kind: str  # number | ident | keyword | string | op | eof
    value: str
    pos: int


def tokenize(text: str) -> list[Token]:
    out: list[Token] = []
    pos = 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m:
            stripped = text[pos:].lstrip()
            if not stripped:
                break
            at = len(text) - len(stripped)
            raise ParseError(f"unexpected character {stripped[0]!r}", at)
        pos = m.end()
        if m.lastgroup == "ident":
            word = m.group("ident")
            upper = word.upper()
            if upper in KEYWORDS:
                out.append(Token("keyword", upper, m.start("ident")))
            elif upper in UNSUPPORTED:
                raise UnsupportedSqlError(UNSUPPORTED[upper], m.start("ident"))
            else:
                out.append(Token("ident", word, m.start("ident")))
        elif m.lastgroup == "number":
            out.append(Token("number", m.group("number"), m.start("number")))
        elif m.lastgroup == "string":
            raw = m.group("string")[1:-1].replace("''", "'")
            out.append(Token("string", raw, m.start("string")))
        else:
            op = m.group("op")
            out.append(Token("op", "!=" if op == "<>" else op, m.start("op")))
    out.append(Token("eof", "", len(text)))
    return out


@dataclass(frozen=True)
class _PredictCall:
    model: str
    args: tuple[str, ...]
    pos: int


class _Select:
    """One parsed SELECT block, before plan construction."""

    def __init__(self):
        self.star = False
        self.items: list[tuple[object, str | None]] = []  # (expr-ish, alias)
        self.tables: list[tuple[str, tuple[str, str] | None]] = []  # (name, on)
        self.where: list[object] = []  # atoms in source order


class Parser:
    def __init__(self, text: str):
        self.text = text
        self.tokens = tokenize(text)
        self.i = 0

    # -- token helpers -------------------------------------------------------

    def peek(self) -> Token:
        return self.tokens[self.i]

    def next(self) -> Token:
        t = self.tokens[self.i]
        self.i += 1
        return t

    def accept(self, kind: str, value: str | None = None) -> Token | None:
        t = self.peek()
        if t.kind == kind and (value is None or t.value == value):
            return self.next()
        return None

    def expect(self, kind: str, value: str | None = None) -> Token:
        t = self.accept(kind, value)
        if t is None:
            got = self.peek()
            want = value or kind
            raise ParseError(f"expected {want}, found {got.value or 'end of input'!r}",
                             got.pos)
        return t

    def expect_ident(self, what: str) -> Token:
        t = self.peek()
        if t.kind != "ident":
            raise ParseError(f"expected {what}, found {t.value or 'end of input'!r}",
                             t.pos)
        return self.next()

    # -- grammar -------------------------------------------------------------

    def parse_query(self) -> list[_Select]:
        selects = [self.parse_select()]
        while self.accept("keyword", "UNION"):
            self.expect("keyword", "ALL")
            selects.append(self.parse_select())
        t = self.peek()
        if t.kind != "eof":
            raise ParseError(f"unexpected trailing input {t.value!r}", t.pos)
        return selects

    def parse_select(self) -> _Select:
        sel = _Select()
        self.expect("keyword", "SELECT")
        if self.accept("op", "*"):
            sel.star = True
        else:
            sel.items.append(self.parse_item())
        while self.accept("op", ","):
            sel.items.append(self.parse_item())
        self.expect("keyword", "FROM")
        if self.peek().kind == "op" and self.peek().value == "(":
            raise UnsupportedSqlError("subquery", self.peek().pos)
        sel.tables.append((self.expect_ident("table name").value, None))
        while self.accept("keyword", "JOIN"):
            table = self.expect_ident("table name").value
            self.expect("keyword", "ON")
            a = self.expect_ident("join column").value
            self.expect("op", "=")
            b = self.expect_ident("join column").value
            sel.tables.append((table, (a, b)))
        if self.accept("keyword", "WHERE"):
            sel.where.append(self.parse_disjunct())
            while self.accept("keyword", "AND"):
                sel.where.append(self.parse_disjunct())
        return sel

    def parse_item(self) -> tuple[object, str | None]:
        expr = self.parse_value()
        alias = None
        if self.accept("keyword", "AS"):
            alias = self.expect_ident("alias").value
        return expr, alias

    def parse_value(self):
        left = self.parse_term()
        while True:
            t = self.peek()
            if t.kind == "op" and t.value in ("+", "-"):
                self.next()
                left = ("arith", t.value, left, self.parse_term())
            else:
                return left

    def parse_term(self):
        left = self.parse_factor()
        while True:
            t = self.peek()
            if t.kind == "op" and t.value in ("*", "/"):
                self.next()
                left = ("arith", t.value, left, self.parse_factor())
            else:
                return left

    def parse_factor(self):
        t = self.peek()
        if t.kind == "number":
            self.next()
            return Literal(float(t.value))
        if t.kind == "op" and t.value == "-":
            self.next()
            num = self.expect("number")
            return Literal(-float(num.value))
        if t.kind == "string":
            self.next()
            return Literal(t.value)
        if t.kind == "keyword" and t.value in ("TRUE", "FALSE"):
            self.next()
            return Literal(t.value == "TRUE")
        if t.kind == "keyword" and t.value == "PREDICT":
            return self.parse_predict()
        if t.kind == "keyword" and t.value == "CASE":
            return self.parse_case()
        if t.kind == "op" and t.value == "(":
            self.next()
            if self.peek().kind == "keyword" and self.peek().value == "SELECT":
                raise UnsupportedSqlError("subquery", self.peek().pos)
            inner = self.parse_value()
            self.expect("op", ")")
            return inner
        if t.kind == "ident":
            self.next()
            return ColumnRef(t.value)
        raise ParseError(f"expected an expression, found {t.value or 'end of input'!r}",
                         t.pos)

    def parse_predict(self) -> _PredictCall:
        t = self.expect("keyword", "PREDICT")
        self.expect("op", "(")
        model = self.expect_ident("model name").value
        args = []
        while self.accept("op", ","):
            args.append(self.expect_ident("column name").value)
        self.expect("op", ")")
        return _PredictCall(model, tuple(args), t.pos)

    def parse_case(self):
        self.expect("keyword", "CASE")
        whens = []
        while self.accept("keyword", "WHEN"):
            cond = self.parse_condition_conj()
            self.expect("keyword", "THEN")
            whens.append((cond, self.parse_value()))
        if not whens:
            raise ParseError("CASE requires at least one WHEN", self.peek().pos)
        self.expect("keyword", "ELSE")
        default = self.parse_value()
        self.expect("keyword", "END")
        return ("case", tuple(whens), default)

    def parse_condition_conj(self):
        atoms = [self.parse_atom()]
        while self.accept("keyword", "AND"):
            atoms.append(self.parse_atom())
        return ("and", tuple(atoms)) if len(atoms) > 1 else atoms[0]

    def parse_disjunct(self):
        first = self.parse_atom()
        ors = [first]
        while self.accept("keyword", "OR"):
            ors.append(self.parse_atom())
        if len(ors) == 1:
            return first
        return self._normalize_or(ors)

    def _normalize_or(self, atoms: list) -> object:
        """`x = 1 OR x = 2 OR x IN (3)` collapses to `x IN (1, 2, 3)`."""
        column = None
        values: list[Literal] = []
        for atom in atoms:
            kind = atom[0]
            if kind == "cmp":
                _, op, operand, lit = atom
                if op != "=" or not isinstance(operand, ColumnRef):
                    raise UnsupportedSqlError("disjunction over non-equality atoms")
            elif kind == "in":
                _, operand, lits = atom
            else:
                raise UnsupportedSqlError("disjunction over non-equality atoms")
            if not isinstance(operand, ColumnRef):
                raise UnsupportedSqlError("disjunction over model outputs")
            if column is None:
                column = operand.name
            elif column != operand.name:
                raise UnsupportedSqlError("disjunction across columns")
            if kind == "cmp":
                values.append(lit)
            else:
                values.extend(lits)
        return ("in", ColumnRef(column), tuple(values))

    def parse_atom(self):
        t = self.peek()
        if t.kind == "op" and t.value == "(":
            self.next()
            inner = self.parse_disjunct()
            self.expect("op", ")")
            return inner
        if t.kind == "keyword" and t.value in ("TRUE", "FALSE"):
            self.next()
            return ("bool", t.value == "TRUE")
        operand = self.parse_operand()
        t = self.peek()
        if t.kind == "keyword" and t.value == "IN":
            self.next()
            self.expect("op", "(")
            lits = [self.parse_literal()]
            while self.accept("op", ","):
                lits.append(self.parse_literal())
            self.expect("op", ")")
            return ("in", operand, tuple(lits))
        if t.kind == "op" and t.value in ("=", "!=", "<", "<=", ">", ">="):
            self.next()
            lit = self.parse_literal()
            return ("cmp", t.value, operand, lit)
        raise ParseError(
            f"expected a comparison, found {t.value or 'end of input'!r}", t.pos
        )

    def parse_operand(self):
        t = self.peek()
        if t.kind == "keyword" and t.value == "PREDICT":
            return self.parse_predict()
        if t.kind == "keyword" and t.value == "CASE":
            return self.parse_case()
        return ColumnRef(self.expect_ident("column name").value)

    def parse_literal(self) -> Literal:
        t = self.peek()
        if t.kind == "number":
            self.next()
            return Literal(float(t.value))
        if t.kind == "op" and t.value == "-":
            self.next()
            num = self.expect("number")
            return Literal(-float(num.value))
        if t.kind == "string":
            self.next()
            return Literal(t.value)
        if t.kind == "keyword" and t.value in ("TRUE", "FALSE"):
            self.next()
            return Literal(t.value == "TRUE")
        raise ParseError(f"expected a literal, found {t.value or 'end of input'!r}",
                         t.pos)


# ---------------------------------------------------------------------------
# Plan construction
# ---------------------------------------------------------------------------


class _PlanBuilder:
    def __init__(self, catalog: Catalog):
        self.catalog = catalog

    def build(self, selects: list[_Select]) -> PlanNode:
        plans = [self.build_select(s) for s in selects]
        if len(plans) == 1:
            return plans[0]
        return UnionAll(tuple(plans))

    def build_select(self, sel: _Select) -> PlanNode:
        plan, schema = self._build_from(sel)
        predicts: dict[tuple, dict] = {}  # (model, args) -> spec

        def register(call: _PredictCall, alias: str | None) -> dict:
            key = (call.model, call.args)
            spec = predicts.get(key)
            if spec is None:
                try:
                    payload = self.catalog.model(call.model)
                except CatalogError as exc:
                    raise BindError(str(exc)) from exc
                spec = {"call": call, "payload": payload, "name": alias}
                predicts[key] = spec
            if alias and spec["name"] is None:
                spec["name"] = alias
            return spec

        for expr, alias in sel.items:
            for call in _collect_calls(expr):
                register(call, alias if expr is call else None)
        for atom in sel.where:
            for call in _collect_calls(atom):
                register(call, None)

        # Assign output column names.
        taken = set(schema.names)
        counter = 0
        for spec in predicts.values():
            arity = spec["payload"].output_arity()
            base = spec["name"]
            if base is None:
                counter += 1
                base = "pred" if counter == 1 else f"pred_{counter}"
            names = [base] if arity == 1 else [f"{base}_{i}" for i in range(arity)]
            for n in names:
                if n in taken:
                    raise BindError(f"output column {n!r} collides with an existing name")
                taken.add(n)
            spec["outputs"] = tuple(names)

        def output_ref(call: _PredictCall) -> ColumnRef:
            spec = predicts[(call.model, call.args)]
            if len(spec["outputs"]) != 1:
                raise BindError(
                    f"model {call.model!r} yields {len(spec['outputs'])} scores; "
                    "a scalar output is required here"
                )
            return ColumnRef(spec["outputs"][0])

        data_atoms: list[ScalarExpr] = []
        predict_atoms: list[ScalarExpr] = []
        for atom in sel.where:
            expr = _lower(atom, output_ref)
            if _mentions_predict(atom):
                predict_atoms.append(expr)
            else:
                data_atoms.append(expr)

        if data_atoms:
            plan = Filter(plan, _and_expr(data_atoms))
        for spec in predicts.values():
            call = spec["call"]
            plan = Predict(plan, call.model, spec["payload"], call.args, spec["outputs"])
        if predict_atoms:
            plan = Filter(plan, _and_expr(predict_atoms))

        items: list[tuple[str, ScalarExpr]] = []
        used_names: set[str] = set()

        def add_item(name: str, expr: ScalarExpr):
            if name in used_names:
                raise BindError(f"duplicate output column {name!r} in SELECT list")
            used_names.add(name)
            items.append((name, expr))

        expr_counter = 0
        if sel.star:
            for n in schema.names:
                add_item(n, ColumnRef(n))
        for expr, alias in sel.items:
            lowered = _lower(expr, output_ref)
            if isinstance(expr, _PredictCall):
                spec = predicts[(expr.model, expr.args)]
                if alias is None or alias == spec["outputs"][0] or len(spec["outputs"]) > 1:
                    for n in spec["outputs"]:
                        add_item(n, ColumnRef(n))
                else:
                    add_item(alias, ColumnRef(spec["outputs"][0]))
                continue
            if alias is None:
                if isinstance(lowered, ColumnRef):
                    alias = lowered.name
                else:
                    expr_counter += 1
                    alias = f"expr_{expr_counter}"
            add_item(alias, lowered)

        if sel.star and not sel.items and not predicts:
            return plan  # bare SELECT * needs no projection
        return Project(plan, tuple(items))

    def _build_from(self, sel: _Select) -> tuple[PlanNode, Schema]:
        name0, _ = sel.tables[0]
        if not self.catalog.has_table(name0):
            raise BindError(f"unknown table: {name0!r}")
        plan: PlanNode = Scan(name0)
        schema = self.catalog.table_schema(name0)
        for table, on in sel.tables[1:]:
            if not self.catalog.has_table(table):
                raise BindError(f"unknown table: {table!r}")
            right = self.catalog.table_schema(table)
            a, b = on
            a_left, a_right = schema.has(a), right.has(a)
            b_left, b_right = schema.has(b), right.has(b)
            if a_left and b_right and not (a_right and b_left):
                lcol, rcol = a, b
            elif b_left and a_right and not (b_right and a_left):
                lcol, rcol = b, a
            elif (a_left and b_right) or (b_left and a_right):
                raise BindError(f"ambiguous join condition {a} = {b}")
            else:
                raise BindError(f"join condition {a} = {b} does not reference both sides")
            plan = Join(plan, Scan(table), ((lcol, rcol),))
            cols, _ = join_output_columns(schema, right)
            schema = Schema(cols)
        return plan, schema


def _collect_calls(node) -> list[_PredictCall]:
    out: list[_PredictCall] = []

    def rec(x):
        if isinstance(x, _PredictCall):
            out.append(x)
        elif isinstance(x, tuple):
            if x and x[0] == "arith":
                rec(x[2])
                rec(x[3])
            elif x and x[0] == "case":
                for cond, val in x[1]:
                    rec(cond)
                    rec(val)
                rec(x[2])
            elif x and x[0] == "cmp":
                rec(x[2])
            elif x and x[0] == "in":
                rec(x[1])
            elif x and x[0] == "and":
                for a in x[1]:
                    rec(a)

    rec(node)
    return out


def _mentions_predict(node) -> bool:
    return bool(_collect_calls(node))


def _lower(node, output_ref) -> ScalarExpr:
    """Parse-tree fragment -> ScalarExpr; PREDICT calls become output refs."""
    if isinstance(node, (ColumnRef, Literal)):
        return node
    if isinstance(node, _PredictCall):
        return output_ref(node)
    kind = node[0]
    if kind == "arith":
        return Arith(node[1], _lower(node[2], output_ref), _lower(node[3], output_ref))
    if kind == "case":
        whens = tuple(
            (_lower(c, output_ref), _lower(v, output_ref)) for c, v in node[1]
        )
        return CaseWhen(whens, _lower(node[2], output_ref))
    if kind == "cmp":
        return Compare(node[1], _lower(node[2], output_ref), node[3])
    if kind == "in":
        return InList(_lower(node[1], output_ref), node[2])
    if kind == "and":
        return And(tuple(_lower(a, output_ref) for a in node[1]))
    if kind == "bool":
        return Literal(node[1])
    raise ParseError(f"cannot lower parse node {node!r}")


def _and_expr(items: list[ScalarExpr]) -> ScalarExpr:
    return items[0] if len(items) == 1 else And(tuple(items))


# ---------------------------------------------------------------------------
# Public API
# ---------------------------------------------------------------------------


def parse_sql(text: str, catalog: Catalog) -> PlanNode:
    """Parse, bind and validate an inference query; returns the plan DAG."""
    if not text or not text.strip():
        raise ParseError("empty query", 0)
    selects = Parser(text).parse_query()
    plan = _PlanBuilder(catalog).build(selects)
    return bind(plan, catalog)


def bind(plan: PlanNode, catalog: Catalog) -> PlanNode:
    """Type-check model bindings and structural invariants against a catalog."""
    diags = validate_plan(plan, catalog)
    if diags:
        raise BindError("; ".join(str(d) for d in diags))
    return plan
