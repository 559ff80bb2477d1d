"""Rewrite rules spanning data and model operators, plus the rule driver.

Every rule is a pure plan -> plan function that preserves the result bag
(exactly for pruning, folding, inlining, splitting and dispatching; within
documented float tolerances where arithmetic is restructured).  The driver
applies the rules in a fixed order:

    1. predicate pushdown (incl. filters derived from tree leaves)
    2. domain propagation
    3. tree pruning under domains
    4. one-hot folding
    5. model-projection pushdown + projection narrowing
    6. join elimination
    7. model/query splitting (rules 1-6 re-run once afterwards)
    8. engine selection: CASE inlining or tensor translation
    9. tensor constant folding under constant domains

Derived models are registered in the catalog under suffixed names
(`M__pruned_1`, ...) so emitted SQL remains self-contained; entries that do
not survive into the final plan are swept at the end.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

from .analysis import (
    EMPTY,
    TOP,
    Constant,
    Domain,
    Interval,
    ValueSet,
    conjuncts,
    map_affine,
    meet,
    propagate_domains,
)
from .catalog import Catalog
from .errors import PlanError
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
    explain_plan,
    expr_columns,
    join_output_columns,
    output_schema,
    plan_node_count,
    walk_preorder,
)
from .models import (
    DecisionTree,
    Leaf,
    Linear,
    ModelPipeline,
    OneHot,
    Split,
    StandardScale,
    TreeEnsemble,
    TreeNode,
    tree_node_count,
)

RULE_NAMES = (
    "push_predicates",
    "prune_tree",
    "fold_onehot",
    "projection_pushdown",
    "eliminate_joins",
    "split_model_query",
    "inline_tree",
    "nn_translate",
    "const_fold",
)

UNREACHABLE = object()  # prune_tree marker: no input consistent with the domains


@dataclass(frozen=True)
class RuleConfig:
    rules: frozenset = frozenset(RULE_NAMES)
    split_gain_threshold: float = 2.0
    cluster_k: int = 4
    cluster_seed: int = 0
    null_policy: str = "error"
    inline_node_limit: int = 64

    def __post_init__(self):
        if self.split_gain_threshold <= 0:
            raise PlanError("split_gain_threshold must be positive")
        if self.cluster_k < 1:
            raise PlanError("cluster_k must be >= 1")
        unknown = set(self.rules) - set(RULE_NAMES)
        if unknown:
            raise PlanError(f"unknown rule name(s): {sorted(unknown)}")

    def enabled(self, rule: str) -> bool:
        return rule in self.rules


def rule_config_from_spec(spec: str | None, **kwargs) -> RuleConfig:
    """Parse a --rules flag value: 'all', 'none' or a comma list of names."""
    if spec is None or spec == "all":
        return RuleConfig(**kwargs)
    if spec == "none":
        return RuleConfig(rules=frozenset(), **kwargs)
    names = frozenset(s.strip() for s in spec.split(",") if s.strip())
    return RuleConfig(rules=names, **kwargs)


@dataclass
class RuleTrace:
    rule: str
    detail: str
    nodes_before: int
    nodes_after: int
    before: str
    after: str

    def summary(self) -> str:
        delta = self.nodes_after - self.nodes_before
        return f"{self.rule}: {self.detail} (plan nodes {self.nodes_before} -> " \
               f"{self.nodes_after}, {delta:+d})"


@dataclass
class OptimizeResult:
    plan: PlanNode
    traces: list[RuleTrace]
    registered: dict[str, object]


# ---------------------------------------------------------------------------
# Generic plan transformation
# ---------------------------------------------------------------------------


def transform_bottom_up(plan: PlanNode, fn) -> PlanNode:
    """Rebuild a plan bottom-up; `fn(node)` may return a replacement or None.

    Shared subtrees are transformed once so sharing is preserved.
    """
    memo: dict[int, PlanNode] = {}

    def rec(node: PlanNode) -> PlanNode:
        got = memo.get(id(node))
        if got is not None:
            return got
        children = tuple(rec(c) for c in node.children)
        rebuilt = node if all(a is b for a, b in zip(children, node.children)) \
            else node.with_children(children)
        out = fn(rebuilt)
        out = rebuilt if out is None else out
        memo[id(node)] = out
        return out

    return rec(plan)


def _topo_order(plan: PlanNode) -> list[PlanNode]:
    """Topological order, parents before children (Kahn over the DAG)."""
    parents: dict[int, int] = {id(plan): 0}
    nodes: dict[int, PlanNode] = {id(plan): plan}
    for node in walk_preorder(plan):
        nodes[id(node)] = node
        for c in node.children:
            parents[id(c)] = parents.get(id(c), 0) + 1
            nodes[id(c)] = c
    parents.setdefault(id(plan), 0)
    order: list[PlanNode] = []
    ready = [plan]
    while ready:
        node = ready.pop(0)
        order.append(node)
        for c in node.children:
            parents[id(c)] -= 1
            if parents[id(c)] == 0:
                ready.append(c)
    return order


def required_columns(plan: PlanNode, catalog: Catalog) -> dict[int, set[str]]:
    """Per node: which of its output columns some ancestor consumes.

    Conservative: every Project item counts as consumed from its child, so
    the result is valid even before projections are narrowed.
    """
    req: dict[int, set[str]] = {id(plan): set(output_schema(plan, catalog).names)}

    def add(node: PlanNode, cols: set[str]):
        req.setdefault(id(node), set()).update(cols)

    for node in _topo_order(plan):
        mine = req.setdefault(id(node), set())
        if isinstance(node, Filter):
            add(node.child, mine | expr_columns(node.predicate))
        elif isinstance(node, Project):
            needed: set[str] = set()
            for _, expr in node.columns:
                needed |= expr_columns(expr)
            add(node.child, needed)
        elif isinstance(node, Predict):
            add(node.child, (mine - set(node.outputs)) | set(node.inputs))
        elif isinstance(node, TensorEval):
            cols = {b.column for b in node.bindings}
            add(node.child, (mine - set(node.outputs)) | cols)
        elif isinstance(node, Join):
            left_schema = output_schema(node.left, catalog)
            right_schema = output_schema(node.right, catalog)
            _, rename = join_output_columns(left_schema, right_schema)
            inverse = {v: k for k, v in rename.items()}
            lcols = {c for c in mine if left_schema.has(c)}
            rcols = {inverse[c] for c in mine
                     if c in inverse and not left_schema.has(c)}
            lcols |= {lk for lk, _ in node.keys}
            rcols |= {rk for _, rk in node.keys}
            add(node.left, lcols)
            add(node.right, rcols)
        elif isinstance(node, UnionAll):
            for b in node.branches:
                add(b, set(mine))
        elif isinstance(node, Udf):
            add(node.child, set(output_schema(node.child, catalog).names))
    return req


# ---------------------------------------------------------------------------
# Domains keyed by model features
# ---------------------------------------------------------------------------


def feature_domains(pipeline: ModelPipeline, col_domains: dict[str, Domain],
                    binding: dict[str, str]) -> dict[str, Domain]:
    """Map column domains through featurizers onto model feature names."""
    producers = pipeline.feature_producers()
    out: dict[str, Domain] = {}
    for feat in pipeline.model_features():
        producer = producers.get(feat)
        if producer is None:
            col = binding.get(feat, feat)
            d = col_domains.get(col, TOP)
        elif isinstance(producer, StandardScale):
            col = binding.get(producer.column, producer.column)
            d = map_affine(col_domains.get(col, TOP), 1.0 / producer.std,
                           -producer.mean / producer.std)
        else:
            col = binding.get(producer.column, producer.column)
            cd = col_domains.get(col, TOP)
            cat = feat.split("=", 1)[1]
            if cd is EMPTY:
                d = EMPTY
            elif isinstance(cd, Constant):
                if cd.value == cat:
                    d = Constant(1.0)
                elif cd.value in producer.categories or producer.unknown == "zeros":
                    d = Constant(0.0)
                else:
                    d = TOP  # unknown under error policy: runtime error, no info
            elif isinstance(cd, ValueSet) and cat not in cd.values:
                ok = producer.unknown == "zeros" or all(
                    v in producer.categories for v in cd.values
                )
                d = Constant(0.0) if ok else TOP
            else:
                d = TOP
        if d is not TOP:
            out[feat] = d
    return out


def _entirely_le(d: Domain, t: float) -> bool:
    if isinstance(d, Constant):
        return isinstance(d.value, float) and d.value <= t
    if isinstance(d, ValueSet):
        return all(isinstance(v, float) and v <= t for v in d.values)
    if isinstance(d, Interval):
        return d.hi <= t
    return False


def _entirely_gt(d: Domain, t: float) -> bool:
    if isinstance(d, Constant):
        return isinstance(d.value, float) and d.value > t
    if isinstance(d, ValueSet):
        return all(isinstance(v, float) and v > t for v in d.values)
    if isinstance(d, Interval):
        return d.lo > t or (d.lo == t and not d.lo_closed)
    return False


def _le_interval(t: float) -> Interval:
    return Interval(-math.inf, t, False, True)


def _gt_interval(t: float) -> Interval:
    return Interval(t, math.inf, False, False)


def prune_tree(model, domains: dict[str, Domain]):
    """Remove subtrees unreachable under the domains.

    Returns a model predicting identically on every in-domain input, or the
    UNREACHABLE marker when some domain is empty (statically no rows).
    Node count never increases; identical domains prune idempotently.
    """
    if any(d is EMPTY for d in domains.values()):
        return UNREACHABLE

    def rec(node: TreeNode, env: dict[str, Domain]) -> TreeNode:
        if isinstance(node, Leaf):
            return node
        d = env.get(node.feature, TOP)
        if _entirely_le(d, node.threshold):
            return rec(node.left, env)
        if _entirely_gt(d, node.threshold):
            return rec(node.right, env)
        left_env = dict(env)
        left_env[node.feature] = meet(d, _le_interval(node.threshold))
        right_env = dict(env)
        right_env[node.feature] = meet(d, _gt_interval(node.threshold))
        left = rec(node.left, left_env)
        right = rec(node.right, right_env)
        if left is node.left and right is node.right:
            return node
        return Split(node.feature, node.threshold, left, right)

    if isinstance(model, DecisionTree):
        root = rec(model.root, dict(domains))
        return model if root is model.root else DecisionTree(root)
    if isinstance(model, TreeEnsemble):
        roots = [rec(t.root, dict(domains)) for t in model.trees]
        if all(r is t.root for r, t in zip(roots, model.trees)):
            return model
        return TreeEnsemble(tuple(DecisionTree(r) for r in roots), model.aggregation)
    return model


# ---------------------------------------------------------------------------
# Constant substitution into models
# ---------------------------------------------------------------------------


def _subst_tree(node: TreeNode, consts: dict[str, float]) -> TreeNode:
    if isinstance(node, Leaf):
        return node
    if node.feature in consts:
        branch = node.left if consts[node.feature] <= node.threshold else node.right
        return _subst_tree(branch, consts)
    left = _subst_tree(node.left, consts)
    right = _subst_tree(node.right, consts)
    if left is node.left and right is node.right:
        return node
    return Split(node.feature, node.threshold, left, right)


def _subst_model(model, consts: dict[str, float]):
    if not consts:
        return model
    if isinstance(model, Linear):
        intercept = model.intercept
        weights = []
        for f, w in model.weights:
            if f in consts:
                intercept += w * consts[f]
            else:
                weights.append((f, w))
        return Linear(tuple(weights), intercept, model.link)
    if isinstance(model, DecisionTree):
        return DecisionTree(_subst_tree(model.root, consts))
    return TreeEnsemble(
        tuple(DecisionTree(_subst_tree(t.root, consts)) for t in model.trees),
        model.aggregation,
    )


def slim_pipeline(pipeline: ModelPipeline) -> ModelPipeline:
    """Drop featurizers none of whose outputs are consumed by the model."""
    used = set(pipeline.model_features())
    kept = tuple(
        f for f in pipeline.featurizers if any(n in used for n in f.output_names())
    )
    if kept == pipeline.featurizers:
        return pipeline
    return ModelPipeline(kept, pipeline.model, pipeline.output)


def fold_onehot(pipeline: ModelPipeline, col_domains: dict[str, Domain],
                binding: dict[str, str]) -> tuple[ModelPipeline, list[str]]:
    """Fold one-hot encodings under constant / value-set column domains.

    A Constant domain turns the encoder's outputs into compile-time 0/1
    constants folded into the model; a ValueSet domain drops the impossible
    categories.  Returns the rewritten pipeline plus human-readable notes.
    """
    notes: list[str] = []
    featurizers: list = []
    consts: dict[str, float] = {}
    model_feats = set(pipeline.model_features())
    for f in pipeline.featurizers:
        if not isinstance(f, OneHot):
            featurizers.append(f)
            continue
        col = binding.get(f.column, f.column)
        d = col_domains.get(col, TOP)
        if isinstance(d, Constant) and isinstance(d.value, str):
            if d.value not in f.categories and f.unknown == "error":
                notes.append(
                    f"one_hot({f.column}): constant {d.value!r} outside categories "
                    "under error policy; fold skipped"
                )
                featurizers.append(f)
                continue
            for cat in f.categories:
                name = f"{f.column}={cat}"
                if name in model_feats:
                    consts[name] = 1.0 if cat == d.value else 0.0
            notes.append(f"one_hot({f.column}): folded to constant {d.value!r}")
        elif isinstance(d, ValueSet):
            values = d.values
            if f.unknown == "error" and not all(
                isinstance(v, str) and v in f.categories for v in values
            ):
                featurizers.append(f)
                continue
            kept_cats = tuple(c for c in f.categories if c in values)
            dropped = [c for c in f.categories if c not in values]
            if not dropped:
                featurizers.append(f)
                continue
            for cat in dropped:
                name = f"{f.column}={cat}"
                if name in model_feats:
                    consts[name] = 0.0
            if kept_cats:
                featurizers.append(OneHot(f.column, kept_cats, f.unknown))
            notes.append(
                f"one_hot({f.column}): dropped {len(dropped)} impossible categor"
                f"{'y' if len(dropped) == 1 else 'ies'}"
            )
        else:
            featurizers.append(f)
    if not consts and len(featurizers) == len(pipeline.featurizers):
        return pipeline, notes
    model = _subst_model(pipeline.model, consts)
    return slim_pipeline(ModelPipeline(tuple(featurizers), model, pipeline.output)), notes


def fold_constant_inputs(pipeline: ModelPipeline,
                         col_domains: dict[str, Domain]) -> ModelPipeline:
    """Specialize a pipeline under Constant column domains (cluster compiler).

    Categorical constants fold through one-hot encoders; numeric constants
    resolve tree splits and fold linear weights into the intercept.
    """
    binding = {name: name for name, _ in pipeline.input_columns()}
    pipeline, _ = fold_onehot(pipeline, col_domains, binding)
    consts: dict[str, float] = {}
    producers = pipeline.feature_producers()
    for feat in pipeline.model_features():
        producer = producers.get(feat)
        if producer is None:
            d = col_domains.get(feat, TOP)
            if isinstance(d, Constant) and isinstance(d.value, float):
                consts[feat] = d.value
        elif isinstance(producer, StandardScale):
            d = col_domains.get(producer.column, TOP)
            if isinstance(d, Constant) and isinstance(d.value, float):
                consts[feat] = (d.value - producer.mean) / producer.std
    if consts:
        pipeline = slim_pipeline(
            ModelPipeline(pipeline.featurizers, _subst_model(pipeline.model, consts),
                          pipeline.output)
        )
    return pipeline


def drop_zero_weights(pipeline: ModelPipeline) -> ModelPipeline:
    """Remove exactly-zero linear weights; the dot product is unchanged."""
    if not isinstance(pipeline.model, Linear):
        return pipeline
    weights = tuple((f, w) for f, w in pipeline.model.weights if w != 0.0)
    if len(weights) == len(pipeline.model.weights):
        return pipeline
    model = Linear(weights, pipeline.model.intercept, pipeline.model.link)
    return slim_pipeline(ModelPipeline(pipeline.featurizers, model, pipeline.output))


# ---------------------------------------------------------------------------
# Predicate pushdown
# ---------------------------------------------------------------------------


def _and(conjs: list[ScalarExpr]) -> ScalarExpr:
    deduped: list[ScalarExpr] = []
    for c in conjs:
        if c not in deduped:
            deduped.append(c)
    return deduped[0] if len(deduped) == 1 else And(tuple(deduped))


def push_predicates(plan: PlanNode, catalog: Catalog,
                    notes: list[str] | None = None) -> PlanNode:
    """Sink filter conjuncts toward scans; derive filters implied by trees.

    Single-side conjuncts move below joins, filters above unions are copied
    into every branch, and conjuncts over model outputs stay above their
    Predict.  When every leaf satisfying a post-Predict filter lies under a
    common chain of split conditions on direct input columns, those
    conditions are derived and pushed as data filters.
    """

    def fn(node: PlanNode):
        if isinstance(node, Filter):
            return _sink_filter(node, catalog)
        return None

    # Sink first so output-column filters sit directly above their Predict,
    # then derive tree-implied conditions and sink those toward the scans.
    plan = transform_bottom_up(plan, fn)
    derived = _derive_tree_filters(plan, catalog, notes)
    if derived is not plan:
        plan = transform_bottom_up(derived, fn)
    return plan


def _sink_filter(node: Filter, catalog: Catalog) -> PlanNode:
    child = node.child
    conjs = conjuncts(node.predicate)
    if isinstance(child, Filter):
        merged = Filter(child.child, _and(conjuncts(child.predicate) + conjs))
        return _sink_filter(merged, catalog)
    if isinstance(child, Join):
        left_schema = output_schema(child.left, catalog)
        right_schema = output_schema(child.right, catalog)
        _, rename = join_output_columns(left_schema, right_schema)
        inverse = {v: k for k, v in rename.items()}
        left_conjs, right_conjs, residual = [], [], []
        for c in conjs:
            cols = expr_columns(c)
            if cols and all(left_schema.has(x) for x in cols):
                left_conjs.append(c)
            elif cols and all(x in inverse and not left_schema.has(x) for x in cols):
                right_conjs.append(_rename_expr(c, inverse))
            else:
                residual.append(c)
        if not left_conjs and not right_conjs:
            return node
        left = child.left
        right = child.right
        if left_conjs:
            left = _sink_filter(Filter(left, _and(left_conjs)), catalog)
        if right_conjs:
            right = _sink_filter(Filter(right, _and(right_conjs)), catalog)
        out: PlanNode = Join(left, right, child.keys)
        if residual:
            out = Filter(out, _and(residual))
        return out
    if isinstance(child, UnionAll):
        branches = tuple(
            _sink_filter(Filter(b, node.predicate), catalog) for b in child.branches
        )
        return UnionAll(branches)
    if isinstance(child, Project):
        mapping: dict[str, str] = {}
        for name, expr in child.columns:
            if isinstance(expr, ColumnRef):
                mapping[name] = expr.name
        pushable, residual = [], []
        for c in conjs:
            cols = expr_columns(c)
            if cols and all(x in mapping for x in cols):
                pushable.append(_rename_expr(c, mapping))
            else:
                residual.append(c)
        if not pushable:
            return node
        inner = _sink_filter(Filter(child.child, _and(pushable)), catalog)
        out = Project(inner, child.columns)
        if residual:
            out = Filter(out, _and(residual))
        return out
    if isinstance(child, (Predict, TensorEval)):
        outputs = set(child.outputs)
        below, above = [], []
        for c in conjs:
            (below if not (expr_columns(c) & outputs) else above).append(c)
        if not below:
            return node
        inner = _sink_filter(Filter(child.child, _and(below)), catalog)
        out = child.with_children((inner,))
        if above:
            out = Filter(out, _and(above))
        return out
    return node


def _rename_expr(expr: ScalarExpr, mapping: dict[str, str]) -> ScalarExpr:
    if isinstance(expr, ColumnRef):
        return ColumnRef(mapping.get(expr.name, expr.name))
    if isinstance(expr, Literal):
        return expr
    if isinstance(expr, Compare):
        return Compare(expr.op, _rename_expr(expr.left, mapping),
                       _rename_expr(expr.right, mapping))
    if isinstance(expr, And):
        return And(tuple(_rename_expr(i, mapping) for i in expr.items))
    if isinstance(expr, InList):
        return InList(_rename_expr(expr.item, mapping), expr.values)
    if isinstance(expr, Or):
        return Or(tuple(_rename_expr(i, mapping) for i in expr.items))
    if isinstance(expr, Not):
        return Not(_rename_expr(expr.item, mapping))
    if isinstance(expr, Arith):
        return Arith(expr.op, _rename_expr(expr.left, mapping),
                     _rename_expr(expr.right, mapping))
    if isinstance(expr, CaseWhen):
        return CaseWhen(
            tuple((_rename_expr(c, mapping), _rename_expr(r, mapping))
                  for c, r in expr.whens),
            _rename_expr(expr.default, mapping),
        )
    return expr


def _leaf_passes(leaf: Leaf, output_mode: str, atoms: list) -> bool:
    if output_mode == "label":
        value = float(max(range(len(leaf.values)), key=lambda i: (leaf.values[i], -i)))
    else:
        value = leaf.values[0]
    for op, lit in atoms:
        ok = {
            "=": value == lit, "!=": value != lit, "<": value < lit,
            "<=": value <= lit, ">": value > lit, ">=": value >= lit,
        }[op]
        if not ok:
            return False
    return True


def _derive_tree_filters(plan: PlanNode, catalog: Catalog,
                         notes: list[str] | None) -> PlanNode:
    def fn(node: PlanNode):
        if not (isinstance(node, Filter) and isinstance(node.child, Predict)):
            return None
        predict = node.child
        pipeline = predict.pipeline
        if not isinstance(pipeline, ModelPipeline) or not isinstance(
            pipeline.model, DecisionTree
        ):
            return None
        out_col = predict.outputs[0] if len(predict.outputs) == 1 else None
        if out_col is None:
            return None
        atoms = []
        for c in conjuncts(node.predicate):
            if not (isinstance(c, Compare) and isinstance(c.right, Literal)
                    and isinstance(c.left, ColumnRef) and c.left.name == out_col
                    and not isinstance(c.right.value, str)):
                continue
            atoms.append((c.op, float(c.right.value)))
        if not atoms:
            return None
        producers = pipeline.feature_producers()
        binding = {n: col for (n, _), col in zip(pipeline.input_columns(), predict.inputs)}
        child_schema = output_schema(predict.child, catalog)

        conds: list[ScalarExpr] = []
        cur: TreeNode = pipeline.model.root
        while isinstance(cur, Split):
            left_pass = _any_pass(cur.left, pipeline.output, atoms)
            right_pass = _any_pass(cur.right, pipeline.output, atoms)
            if left_pass and right_pass:
                break
            if not left_pass and not right_pass:
                conds = [Literal(False)]
                break
            if cur.feature in producers:
                break  # condition lives in feature space, not expressible on a column
            col = binding.get(cur.feature, cur.feature)
            if child_schema.col(col).nullable:
                break  # a NULL would be mis-filtered; leave the work to the model
            lit = Literal(cur.threshold)
            if right_pass:
                conds.append(Compare(">", ColumnRef(col), lit))
                cur = cur.right
            else:
                conds.append(Compare("<=", ColumnRef(col), lit))
                cur = cur.left
        if not conds:
            return None
        existing = _filter_conjuncts_below(predict)
        fresh = [c for c in conds if c not in existing]
        if not fresh:
            return None
        if notes is not None:
            notes.append(
                "derived filter(s) from tree leaves: "
                + ", ".join(f"`{_render(c)}`" for c in fresh)
            )
        inner = Filter(predict.child, _and(fresh))
        return Filter(predict.with_children((inner,)), node.predicate)

    return transform_bottom_up(plan, fn)


def _render(expr) -> str:
    from .ir import render_expr

    return render_expr(expr)


def _any_pass(node: TreeNode, output_mode: str, atoms) -> bool:
    if isinstance(node, Leaf):
        return _leaf_passes(node, output_mode, atoms)
    return _any_pass(node.left, output_mode, atoms) or _any_pass(
        node.right, output_mode, atoms
    )


def _filter_conjuncts_below(predict: Predict) -> list[ScalarExpr]:
    out: list[ScalarExpr] = []
    cur = predict.child
    while isinstance(cur, Filter):
        out.extend(conjuncts(cur.predicate))
        cur = cur.child
    return out


# ---------------------------------------------------------------------------
# Projection pushdown
# ---------------------------------------------------------------------------


def projection_pushdown(plan: PlanNode, catalog: Catalog, ctx=None) -> PlanNode:
    """Slim models (zero weights, dead featurizers) and narrow column flow.

    After rebinding the Predicts, scans are wrapped in Projects keeping only
    the columns some consumer needs; results agree with the input plan within
    float tolerance (dot products lose their zero terms).
    """

    def slim(node: PlanNode):
        if not isinstance(node, Predict) or not isinstance(node.pipeline, ModelPipeline):
            return None
        pipeline = drop_zero_weights(slim_pipeline(node.pipeline))
        if pipeline is node.pipeline:
            return None
        binding = {n: col for (n, _), col
                   in zip(node.pipeline.input_columns(), node.inputs)}
        name = node.model
        if ctx is not None:
            name = ctx.register(node.model, "slim", pipeline)
        inputs = tuple(binding[n] for n, _ in pipeline.input_columns())
        return Predict(node.child, name, pipeline, inputs, node.outputs)

    plan = transform_bottom_up(plan, slim)
    if isinstance(plan, Scan):
        return plan
    req = required_columns(plan, catalog)

    def narrow(node: PlanNode):
        children = list(node.children)
        changed = False
        for i, child in enumerate(children):
            if not isinstance(child, Scan):
                continue
            if isinstance(node, Project) and node.child is child:
                continue  # already projecting directly over this scan
            schema = output_schema(child, catalog)
            needed = req.get(id(child), set(schema.names))
            keep = tuple(n for n in schema.names if n in needed)
            if keep and len(keep) < len(schema.names):
                children[i] = Project(child, tuple((n, ColumnRef(n)) for n in keep))
                changed = True
        if changed:
            return node.with_children(tuple(children))
        return None

    plan = transform_bottom_up(plan, narrow)

    req = required_columns(plan, catalog)
    root = plan  # the root project defines the query output; never narrow it

    def narrow_projects(node: PlanNode):
        if node is root or not isinstance(node, Project) or isinstance(node.child, Scan):
            return None
        needed = req.get(id(node))
        if needed is None:
            return None
        keep = tuple((n, e) for n, e in node.columns if n in needed)
        if keep and len(keep) < len(node.columns):
            return Project(node.child, keep)
        return None

    return transform_bottom_up(plan, narrow_projects)


# ---------------------------------------------------------------------------
# Join elimination
# ---------------------------------------------------------------------------


def column_provenance(plan: PlanNode, catalog: Catalog) -> dict[str, tuple[str, str]]:
    """Output column -> originating (table, column), identity renames only."""
    if isinstance(plan, Scan):
        return {n: (plan.table, n) for n in catalog.table_schema(plan.table).names}
    if isinstance(plan, (Filter, Udf)):
        return column_provenance(plan.child, catalog)
    if isinstance(plan, Project):
        child = column_provenance(plan.child, catalog)
        out = {}
        for name, expr in plan.columns:
            if isinstance(expr, ColumnRef) and expr.name in child:
                out[name] = child[expr.name]
        return out
    if isinstance(plan, (Predict, TensorEval)):
        return column_provenance(plan.child, catalog)
    if isinstance(plan, Join):
        left = column_provenance(plan.left, catalog)
        right = column_provenance(plan.right, catalog)
        left_schema = output_schema(plan.left, catalog)
        right_schema = output_schema(plan.right, catalog)
        _, rename = join_output_columns(left_schema, right_schema)
        out = dict(left)
        for col, prov in right.items():
            out[rename[col]] = prov
        return out
    return {}


def eliminate_joins(plan: PlanNode, catalog: Catalog,
                    notes: list[str] | None = None) -> PlanNode:
    """Drop an inner join whose build side contributes nothing.

    Requires: no surviving right-side column consumed above, the join keys
    form a declared unique key of the right base table, and a declared
    foreign key from the probe side's origin guarantees exactly one match
    per row (FK source columns non-nullable).  The right side must be a bare
    scan (possibly narrowed), so no filtering can change cardinality.
    """
    req = required_columns(plan, catalog)

    def fn(node: PlanNode):
        if not isinstance(node, Join):
            return None
        right = node.right
        if isinstance(right, Project):
            if not all(isinstance(e, ColumnRef) and e.name == n for n, e in right.columns):
                return None
            right_base = right.child
        else:
            right_base = right
        if not isinstance(right_base, Scan):
            return None
        right_table = right_base.table
        left_schema = output_schema(node.left, catalog)
        right_schema = output_schema(right, catalog)
        _, rename = join_output_columns(left_schema, right_schema)
        consumed = req.get(id(node), set())
        right_out_names = set(rename.values())
        if consumed & right_out_names:
            return None
        rkeys = tuple(rk for _, rk in node.keys)
        if set(rkeys) not in [set(uk) for uk in catalog.unique_keys(right_table)]:
            return None
        prov = column_provenance(node.left, catalog)
        pairs = []
        origin_tables = set()
        for lk, rk in node.keys:
            p = prov.get(lk)
            if p is None:
                return None
            origin_tables.add(p[0])
            pairs.append((p, rk))
        if len(origin_tables) != 1:
            return None
        origin = next(iter(origin_tables))
        wanted = {(p[1], rk) for p, rk in pairs}
        for fk in catalog.foreign_keys(origin):
            if fk.ref_table != right_table:
                continue
            if set(zip(fk.columns, fk.ref_columns)) != wanted:
                continue
            origin_schema = catalog.table_schema(origin)
            if any(origin_schema.col(c).nullable for c in fk.columns):
                continue
            if notes is not None:
                notes.append(f"dropped join to {right_table} "
                             f"(keys {', '.join(rkeys)} unused above)")
            return node.left
        return None

    return transform_bottom_up(plan, fn)


# ---------------------------------------------------------------------------
# Model/query splitting
# ---------------------------------------------------------------------------


def split_model_query(plan: PlanNode, catalog: Catalog, config: RuleConfig,
                      ctx=None, notes: list[str] | None = None) -> PlanNode:
    """Partition a tree-model Predict at its root split into a two-branch union.

    The branches filter on `f <= t` / `f > t` (disjoint and exhaustive over
    non-null f) and run the left/right subtree models; each branch projects
    the columns consumed above so the union stays schema-identical.
    """
    req = required_columns(plan, catalog)

    def fn(node: PlanNode):
        if not isinstance(node, Predict) or not isinstance(node.pipeline, ModelPipeline):
            return None
        pipeline = node.pipeline
        if not isinstance(pipeline.model, DecisionTree):
            return None
        root = pipeline.model.root
        if not isinstance(root, Split):
            return None
        if root.feature in pipeline.feature_producers():
            return None  # splitting needs the raw column, not a featurizer output
        sizes = sorted([tree_node_count(root.left), tree_node_count(root.right)])
        ratio = sizes[1] / sizes[0]
        if ratio < config.split_gain_threshold:
            return None
        binding = {n: col for (n, _), col in zip(pipeline.input_columns(), node.inputs)}
        col = binding.get(root.feature, root.feature)
        child_schema = output_schema(node.child, catalog)
        if child_schema.col(col).nullable and config.null_policy == "error":
            if notes is not None:
                notes.append(
                    f"split on {col!r} skipped: column nullable under error policy "
                    "(a NULL row would escape both branches)"
                )
            return None
        out_schema = output_schema(node, catalog)
        consumed = req.get(id(node), set(out_schema.names))
        keep = tuple(n for n in out_schema.names if n in consumed or n in node.outputs)

        def branch(sub_root: TreeNode, cond: ScalarExpr, kind: str) -> PlanNode:
            sub_pipe = slim_pipeline(
                ModelPipeline(pipeline.featurizers, DecisionTree(sub_root),
                              pipeline.output)
            )
            name = node.model
            if ctx is not None:
                name = ctx.register(node.model, kind, sub_pipe)
            inputs = tuple(binding[n] for n, _ in sub_pipe.input_columns())
            p = Predict(Filter(node.child, cond), name, sub_pipe, inputs, node.outputs)
            return Project(p, tuple((n, ColumnRef(n)) for n in keep))

        lit = Literal(root.threshold)
        union = UnionAll((
            branch(root.left, Compare("<=", ColumnRef(col), lit), "left"),
            branch(root.right, Compare(">", ColumnRef(col), lit), "right"),
        ))
        if notes is not None:
            notes.append(
                f"split {node.model} at {col} <= {root.threshold!r} "
                f"(subtree sizes {sizes[1]}/{sizes[0]})"
            )
        return union

    return transform_bottom_up(plan, fn)


# ---------------------------------------------------------------------------
# Inlining and tensor translation (engine selection)
# ---------------------------------------------------------------------------


def inline_tree_expr(tree: DecisionTree, output_mode: str,
                     binding: dict[str, str]) -> ScalarExpr:
    """Nested CASE expression evaluating exactly like tree routing.

    Requires every split feature to be a direct input column; the expression
    compares the same float thresholds the tree does, so outputs are
    bit-identical.
    """

    def rec(node: TreeNode) -> ScalarExpr:
        if isinstance(node, Leaf):
            if output_mode == "label":
                idx = max(range(len(node.values)), key=lambda i: (node.values[i], -i))
                return Literal(float(idx))
            return Literal(float(node.values[0]))
        cond = Compare("<=", ColumnRef(binding.get(node.feature, node.feature)),
                       Literal(node.threshold))
        left = rec(node.left)
        right = rec(node.right)
        return CaseWhen(((cond, left),), right)

    return rec(tree.root)


def can_inline(pipeline: ModelPipeline, limit: int) -> bool:
    if not isinstance(pipeline.model, DecisionTree):
        return False
    if pipeline.model.node_count > limit:
        return False
    if pipeline.model.leaf_arity != 1 and pipeline.output != "label":
        return False
    producers = pipeline.feature_producers()
    return all(f not in producers for f in pipeline.model.features())


def select_engines(plan: PlanNode, catalog: Catalog, config: RuleConfig,
                   ctx=None, notes: list[str] | None = None) -> PlanNode:
    """Lower each remaining Predict: small scalar trees inline to CASE
    projections, everything else translates to a tensor graph."""
    from .tensor import translate_pipeline

    def fn(node: PlanNode):
        if not isinstance(node, Predict) or not isinstance(node.pipeline, ModelPipeline):
            return None
        pipeline = node.pipeline
        binding = {n: col for (n, _), col in zip(pipeline.input_columns(), node.inputs)}
        if config.enabled("inline_tree") and can_inline(pipeline, config.inline_node_limit):
            expr = inline_tree_expr(pipeline.model, pipeline.output, binding)
            child_schema = output_schema(node.child, catalog)
            cols = tuple((n, ColumnRef(n)) for n in child_schema.names)
            cols += ((node.outputs[0], expr),)
            if notes is not None:
                notes.append(f"inlined {node.model} as CASE "
                             f"({pipeline.model.node_count} nodes)")
            return Project(node.child, cols)
        if config.enabled("nn_translate"):
            tm = translate_pipeline(pipeline)
            name = node.model
            if ctx is not None:
                name = ctx.register(node.model, "nn", tm)
            bindings = tuple(
                b.with_column(binding[b.input]) for b in tm.bindings
            )
            if notes is not None:
                notes.append(f"translated {node.model} to a tensor graph "
                             f"({tm.graph.node_count()} nodes)")
            return TensorEval(node.child, name, tm.graph, bindings, node.outputs)
        return None

    return transform_bottom_up(plan, fn)


def fold_tensor_constants(plan: PlanNode, catalog: Catalog,
                          table_stats=None, ctx=None,
                          notes: list[str] | None = None) -> PlanNode:
    """const-fold tensor graphs whose bound columns have Constant domains."""
    from .tensor import TensorModel, const_fold

    domains = propagate_domains(plan, catalog, table_stats)

    def fn(node: PlanNode):
        if not isinstance(node, TensorEval):
            return None
        env = domains.get(id(node), {})
        live = {i.name for i in node.graph.input_nodes()}
        bindings = {}
        for b in node.bindings:
            if b.input not in live:
                continue
            d = env.get(b.column, TOP)
            if not isinstance(d, Constant):
                continue
            if b.kind == "category":
                if not isinstance(d.value, str):
                    continue
                idx = b.categories.index(d.value) if d.value in b.categories else -1
                bindings[b.input] = [[idx]]
            elif isinstance(d.value, float):
                bindings[b.input] = [[d.value]]
        if not bindings:
            return None
        folded = const_fold(node.graph, bindings)
        if folded.node_count() >= node.graph.node_count():
            return None
        keep_live = {i.name for i in folded.input_nodes()}
        new_bindings = tuple(b for b in node.bindings if b.input in keep_live)
        name = node.model
        if ctx is not None:
            name = ctx.register(node.model, "nn", TensorModel(
                folded, new_bindings, "scores"))
        if notes is not None:
            notes.append(
                f"folded constants into {node.model}: graph "
                f"{node.graph.node_count()} -> {folded.node_count()} nodes"
            )
        return TensorEval(node.child, name, folded, new_bindings, node.outputs)

    return transform_bottom_up(plan, fn)


# ---------------------------------------------------------------------------
# Scalar constant folding (cleanup after inlining)
# ---------------------------------------------------------------------------


def fold_expr_constants(expr: ScalarExpr) -> ScalarExpr:
    """Evaluate literal-only subexpressions; sound for 2-valued predicates.

    Returns the original object when nothing folds, so callers can detect
    change by identity.
    """
    if isinstance(expr, Compare):
        left = fold_expr_constants(expr.left)
        right = fold_expr_constants(expr.right)
        if isinstance(left, Literal) and isinstance(right, Literal):
            a, b = left.value, right.value
            if isinstance(a, str) != isinstance(b, str):
                if expr.op in ("=", "!="):
                    return Literal(expr.op != "=")
            else:
                an = float(a) if not isinstance(a, str) else a
                bn = float(b) if not isinstance(b, str) else b
                table = {"=": an == bn, "!=": an != bn, "<": an < bn,
                         "<=": an <= bn, ">": an > bn, ">=": an >= bn}
                return Literal(bool(table[expr.op]))
        if left is expr.left and right is expr.right:
            return expr
        return Compare(expr.op, left, right)
    if isinstance(expr, And):
        items = []
        changed = False
        for i in expr.items:
            f = fold_expr_constants(i)
            changed = changed or f is not i
            if isinstance(f, Literal) and f.value is True:
                changed = True
                continue
            if isinstance(f, Literal) and f.value is False:
                return Literal(False)
            items.append(f)
        if not changed:
            return expr
        if not items:
            return Literal(True)
        return items[0] if len(items) == 1 else And(tuple(items))
    if isinstance(expr, Or):
        items = []
        changed = False
        for i in expr.items:
            f = fold_expr_constants(i)
            changed = changed or f is not i
            if isinstance(f, Literal) and f.value is False:
                changed = True
                continue
            if isinstance(f, Literal) and f.value is True:
                return Literal(True)
            items.append(f)
        if not changed:
            return expr
        if not items:
            return Literal(False)
        return items[0] if len(items) == 1 else Or(tuple(items))
    if isinstance(expr, Not):
        f = fold_expr_constants(expr.item)
        if isinstance(f, Literal) and isinstance(f.value, bool):
            return Literal(not f.value)
        return expr if f is expr.item else Not(f)
    if isinstance(expr, InList):
        item = fold_expr_constants(expr.item)
        if isinstance(item, Literal):
            values = {v.value for v in expr.values}
            norm = item.value if isinstance(item.value, str) else float(item.value)
            return Literal(norm in values)
        return expr if item is expr.item else InList(item, expr.values)
    return expr


def _subst_refs(expr: ScalarExpr, defs: dict[str, ScalarExpr]) -> ScalarExpr:
    if isinstance(expr, ColumnRef) and expr.name in defs:
        return defs[expr.name]
    if isinstance(expr, Compare):
        return Compare(expr.op, _subst_refs(expr.left, defs), _subst_refs(expr.right, defs))
    if isinstance(expr, And):
        return And(tuple(_subst_refs(i, defs) for i in expr.items))
    if isinstance(expr, Or):
        return Or(tuple(_subst_refs(i, defs) for i in expr.items))
    if isinstance(expr, Not):
        return Not(_subst_refs(expr.item, defs))
    if isinstance(expr, InList):
        return InList(_subst_refs(expr.item, defs), expr.values)
    if isinstance(expr, Arith):
        return Arith(expr.op, _subst_refs(expr.left, defs), _subst_refs(expr.right, defs))
    if isinstance(expr, CaseWhen):
        return CaseWhen(
            tuple((_subst_refs(c, defs), _subst_refs(r, defs)) for c, r in expr.whens),
            _subst_refs(expr.default, defs),
        )
    return expr


def simplify_plan(plan: PlanNode) -> PlanNode:
    """Post-rewrite cleanup: merge stacked projections, fold filter constants.

    A filter over computed projection columns is rewritten only when the
    substituted predicate folds to a literal, so scalar expressions are
    never duplicated into the filter.
    """

    def fn(node: PlanNode):
        if isinstance(node, Project) and isinstance(node.child, Project):
            inner = dict(node.child.columns)
            merged = tuple(
                (name, _subst_refs(expr, inner)) for name, expr in node.columns
            )
            return Project(node.child.child, merged)
        if not isinstance(node, Filter):
            return None
        pred = fold_expr_constants(node.predicate)
        if isinstance(node.child, Project):
            defs = {
                name: expr for name, expr in node.child.columns
                if not isinstance(expr, ColumnRef)
            }
            if defs:
                folded = fold_expr_constants(_subst_refs(pred, defs))
                if isinstance(folded, Literal):
                    pred = folded
        if isinstance(pred, Literal) and pred.value is True:
            return node.child
        if pred is node.predicate:
            return None
        return Filter(node.child, pred)

    out = transform_bottom_up(plan, fn)
    while out is not plan:
        plan = out
        out = transform_bottom_up(plan, fn)
    return out


# ---------------------------------------------------------------------------
# Driver
# ---------------------------------------------------------------------------


class _Ctx:
    def __init__(self, catalog: Catalog, config: RuleConfig, table_stats):
        self.catalog = catalog
        self.config = config
        self.table_stats = table_stats
        self.traces: list[RuleTrace] = []
        self.registered: dict[str, object] = {}

    def register(self, base: str, kind: str, payload) -> str:
        name = self.catalog.register_derived(base, kind, payload)
        self.registered[name] = payload
        return name

    def trace(self, rule: str, before: PlanNode, after: PlanNode, notes: list[str]):
        if after is before and not notes:
            return
        self.traces.append(RuleTrace(
            rule=rule,
            detail="; ".join(notes) if notes else "rewrote plan",
            nodes_before=plan_node_count(before),
            nodes_after=plan_node_count(after),
            before=explain_plan(before, self.catalog),
            after=explain_plan(after, self.catalog),
        ))


def _apply_models_pass(plan: PlanNode, ctx: _Ctx) -> PlanNode:
    """Steps 2-4: propagate domains, prune trees, fold one-hot encoders."""
    config = ctx.config
    if not (config.enabled("prune_tree") or config.enabled("fold_onehot")):
        return plan
    domains = propagate_domains(plan, ctx.catalog, ctx.table_stats)
    prune_notes: list[str] = []
    fold_notes: list[str] = []

    def fn(node: PlanNode):
        if not isinstance(node, Predict) or not isinstance(node.pipeline, ModelPipeline):
            return None
        env = domains.get(id(node), {})
        if not env:
            return None
        pipeline = node.pipeline
        binding = {n: col for (n, _), col in zip(pipeline.input_columns(), node.inputs)}
        name = node.model
        child = node.child
        if config.enabled("prune_tree") and isinstance(
            pipeline.model, (DecisionTree, TreeEnsemble)
        ):
            fd = feature_domains(pipeline, env, binding)
            pruned = prune_tree(pipeline.model, fd)
            if pruned is UNREACHABLE:
                prune_notes.append(
                    f"{name}: domains are contradictory; branch is statically empty"
                )
                child = Filter(child, Literal(False))
                pruned = pipeline.model
            if pruned is not pipeline.model:
                before_n = pipeline.model.node_count
                pipeline = slim_pipeline(
                    ModelPipeline(pipeline.featurizers, pruned, pipeline.output)
                )
                name = ctx.register(name, "pruned", pipeline)
                prune_notes.append(
                    f"pruned {node.model}: {before_n} -> {pruned.node_count} tree nodes"
                )
        if config.enabled("fold_onehot"):
            folded, fnotes = fold_onehot(pipeline, env, binding)
            if folded is not pipeline:
                pipeline = folded
                name = ctx.register(name, "fold", pipeline)
            fold_notes.extend(fnotes)
        if pipeline is node.pipeline and child is node.child:
            return None
        inputs = tuple(binding[n] for n, _ in pipeline.input_columns())
        return Predict(child, name, pipeline, inputs, node.outputs)

    out = transform_bottom_up(plan, fn)
    ctx.trace("prune_tree", plan, out if prune_notes else plan, prune_notes)
    if fold_notes:
        ctx.trace("fold_onehot", plan, out, fold_notes)
    return out


def _run_sequence(plan: PlanNode, ctx: _Ctx, allow_split: bool) -> PlanNode:
    config = ctx.config
    if config.enabled("push_predicates"):
        notes: list[str] = []
        after = push_predicates(plan, ctx.catalog, notes)
        ctx.trace("push_predicates", plan, after, notes)
        plan = after
    plan = _apply_models_pass(plan, ctx)
    if config.enabled("projection_pushdown"):
        after = projection_pushdown(plan, ctx.catalog, ctx)
        ctx.trace("projection_pushdown", plan, after, [])
        plan = after
    if config.enabled("eliminate_joins"):
        notes = []
        after = eliminate_joins(plan, ctx.catalog, notes)
        ctx.trace("eliminate_joins", plan, after, notes)
        plan = after
    if allow_split and config.enabled("split_model_query"):
        notes = []
        after = split_model_query(plan, ctx.catalog, config, ctx, notes)
        ctx.trace("split_model_query", plan, after, notes)
        if after is not plan:
            plan = _run_sequence(after, ctx, allow_split=False)
    return plan


def normalize_union_tops(plan: PlanNode) -> PlanNode:
    """Distribute a root Project over a UnionAll into each branch.

    Keeps branch schemas identical and leaves the plan in the shape the SQL
    emitter can express (one SELECT per branch, no outer query).
    """
    changed = True
    while changed:
        changed = False
        if isinstance(plan, Project) and isinstance(plan.child, UnionAll):
            branches = tuple(Project(b, plan.columns) for b in plan.child.branches)
            plan = UnionAll(branches)
            changed = True
        elif isinstance(plan, Filter) and isinstance(plan.child, UnionAll):
            branches = tuple(Filter(b, plan.predicate) for b in plan.child.branches)
            plan = UnionAll(branches)
            changed = True
    return plan


def _sweep_registry(plan: PlanNode, ctx: _Ctx):
    referenced = set()
    for node in walk_preorder(plan):
        if isinstance(node, (Predict, TensorEval)):
            referenced.add(node.model)
    stale = set(ctx.registered) - referenced
    ctx.catalog.drop_models(stale)
    for name in stale:
        del ctx.registered[name]


def optimize(plan: PlanNode, catalog: Catalog, config: RuleConfig | None = None,
             table_stats: dict | None = None) -> OptimizeResult:
    """Run the fixed-order heuristic driver; output is bag-equivalent."""
    config = config or RuleConfig()
    ctx = _Ctx(catalog, config, table_stats)
    plan = _run_sequence(plan, ctx, allow_split=True)
    if config.enabled("inline_tree") or config.enabled("nn_translate"):
        notes: list[str] = []
        after = select_engines(plan, catalog, config, ctx, notes)
        ctx.trace("engine_selection", plan, after, notes)
        plan = after
    if config.enabled("const_fold"):
        notes = []
        after = fold_tensor_constants(plan, catalog, table_stats, ctx, notes)
        ctx.trace("const_fold", plan, after, notes)
        plan = after
    plan = normalize_union_tops(plan)
    plan = simplify_plan(plan)
    _sweep_registry(plan, ctx)
    return OptimizeResult(plan, ctx.traces, ctx.registered)
