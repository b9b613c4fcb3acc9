"""Evaluation plans for N-input conv_einsum expressions.

A plan is a full binary tree over the inputs. Leaves are input indices
``0..N-1``; the ``k``-th internal node (in execution order) gets id ``N + k``.
Trees are written as nested 2-tuples, e.g. ``((0, 1), 2)``, and encoded
canonically as strings such as ``"((00,01),02)"``.

Three planners are provided: :func:`left_to_right` (the left-deep baseline),
:func:`optimal` (exact dynamic programming over subsets of inputs) and
:func:`enumerate_all` (every tree, as a test oracle).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterator, Mapping, Sequence

from .cost import CostBreakdown, CostMode, pairwise_cost
from .errors import ConvModeError, PlanningError, ShapeError
from .kernels import ConvMode, PairwiseOp, flops_actual, pairwise_eval, sum_unique_modes
from .parser import Atom, ExpressionSpec, format_atom, format_subscripts, parse
from .tensor import DenseTensor, ShapeEnv, permute

__all__ = [
    "DEFAULT_MAX_INPUTS",
    "EvaluationPlan",
    "ExecutionResult",
    "PlanNode",
    "build_plan",
    "enumerate_all",
    "execute",
    "left_to_right",
    "optimal",
    "resolve_modes",
    "tree_encoding",
]

DEFAULT_MAX_INPUTS = 16
ENUMERATE_MAX_INPUTS = 6

Tree = "int | tuple[Tree, Tree]"


def resolve_modes(
    spec: ExpressionSpec,
    mode: "ConvMode | str | Mapping[Atom, ConvMode | str] | None" = None,
) -> dict[Atom, ConvMode]:
    """Assign a convolution mode to every convolution atom of ``spec``.

    ``None`` or ``"auto"`` selects Same for atoms shared by two inputs and
    Circular for atoms shared by three or more. A single mode applies to all
    atoms; a mapping sets modes per atom (unlisted atoms fall back to auto).
    Multi-way atoms only accept Circular.
    """
    counts = spec.occurrences()
    per_atom: Mapping = mode if isinstance(mode, Mapping) else {a: mode for a in spec.conv_atoms}
    unknown = set(per_atom) - spec.conv_atoms
    if unknown:
        raise ConvModeError(f"modes given for non-convolution atoms {sorted(unknown)}")
    modes = {}
    for atom in sorted(spec.conv_atoms):
        chosen = per_atom.get(atom)
        multi = counts[atom] >= 3
        if chosen is None or (isinstance(chosen, str) and chosen.lower() == "auto"):
            modes[atom] = ConvMode.CIRCULAR if multi else ConvMode.SAME
            continue
        chosen = ConvMode.parse(chosen)
        if multi and chosen is not ConvMode.CIRCULAR:
            raise ConvModeError(
                f"atom {format_atom(atom)!r} is convolved across {counts[atom]} inputs; "
                f"only circular mode is supported, got {chosen.value}"
            )
        modes[atom] = chosen
    return modes


def _multiway(spec: ExpressionSpec) -> frozenset[Atom]:
    counts = spec.occurrences()
    return frozenset(a for a in spec.conv_atoms if counts[a] >= 3)


def _check_multiway_dims(env: ShapeEnv, multiway: frozenset[Atom]) -> None:
    for atom in sorted(multiway):
        dims = env.atom_dims(atom)
        if len(set(dims)) > 1:
            raise ShapeError(
                f"multi-way circular convolution on {format_atom(atom)!r} needs equal dimensions, got {list(dims)}"
            )


# ---------------------------------------------------------------------------
# plan data model


@dataclass(frozen=True)
class PlanNode:
    """One pairwise step; ``left``/``right`` are input indices or earlier node ids."""

    left: int
    right: int
    op: PairwiseOp
    left_shape: tuple[int, ...]
    right_shape: tuple[int, ...]
    result_shape: tuple[int, ...]
    cost: CostBreakdown

    @property
    def result(self) -> tuple[Atom, ...]:
        return self.op.result


@dataclass(frozen=True)
class EvaluationPlan:
    spec: ExpressionSpec
    input_shapes: tuple[tuple[int, ...], ...]
    modes: Mapping[Atom, ConvMode]
    cost_mode: CostMode
    nodes: tuple[PlanNode, ...]
    total_cost: int
    peak_elems: int

    @property
    def num_inputs(self) -> int:
        return self.spec.num_inputs

    @property
    def result(self) -> tuple[Atom, ...]:
        return self.spec.output

    def tree(self) -> "Tree":
        """Nested-tuple form of the plan (a bare ``0`` for single-input plans)."""
        n = self.num_inputs
        built: dict[int, object] = {i: i for i in range(n)}
        for k, node in enumerate(self.nodes):
            built[n + k] = (built[node.left], built[node.right])
        return built[n + len(self.nodes) - 1] if self.nodes else 0

    def encoding(self) -> str:
        return tree_encoding(self.tree())

    def output_shape(self) -> tuple[int, ...]:
        if self.nodes:
            return self.nodes[-1].result_shape
        dims = dict(zip(self.spec.inputs[0], self.input_shapes[0]))
        return tuple(dims[a] for a in self.spec.output)

    def to_json(self) -> dict:
        return {
            "nodes": [
                {
                    "left": node.left,
                    "right": node.right,
                    "result": format_subscripts(node.result),
                    "cost": node.cost.total,
                }
                for node in self.nodes
            ],
            "total_cost": self.total_cost,
            "peak_elems": self.peak_elems,
        }

    @classmethod
    def from_json(
        cls,
        obj: dict,
        spec: ExpressionSpec | str,
        shapes: Sequence[Sequence[int]],
        mode=None,
        cost_mode: CostMode | str = CostMode.INFERENCE,
    ) -> "EvaluationPlan":
        """Rebuild a plan from its JSON form; node results and costs are re-derived and checked."""
        if isinstance(spec, str):
            spec = parse(spec)
        n = spec.num_inputs
        try:
            raw = [(int(node["left"]), int(node["right"])) for node in obj["nodes"]]
        except (KeyError, TypeError, ValueError) as exc:
            raise PlanningError(f"malformed plan JSON: {exc}") from None
        built: dict[int, object] = {i: i for i in range(n)}
        for k, (left, right) in enumerate(raw):
            if left not in built or right not in built:
                raise PlanningError(f"node {n + k} references an operand that is not yet available")
            built[n + k] = (built.pop(left), built.pop(right))
        tree = built[n + len(raw) - 1] if raw else 0
        plan = build_plan(spec, shapes, tree, mode, cost_mode)
        if [tuple(x) for x in raw] != [(nd.left, nd.right) for nd in plan.nodes]:
            raise PlanningError("plan JSON node order is not a post-order of its tree")
        for node, entry in zip(plan.nodes, obj["nodes"]):
            if "result" in entry and entry["result"] != format_subscripts(node.result):
                raise PlanningError(
                    f"node result {entry['result']!r} disagrees with derived {format_subscripts(node.result)!r}"
                )
        return plan


def tree_encoding(tree) -> str:
    """Canonical string of a tree: two-digit leaves, ``(left,right)`` for nodes."""
    if isinstance(tree, tuple):
        return f"({tree_encoding(tree[0])},{tree_encoding(tree[1])})"
    return f"{tree:02d}"


def _leaves(tree) -> list[int]:
    if isinstance(tree, tuple):
        if len(tree) != 2:
            raise PlanningError(f"plan trees are binary; got a node with {len(tree)} children")
        return _leaves(tree[0]) + _leaves(tree[1])
    if isinstance(tree, bool) or not isinstance(tree, int):
        raise PlanningError(f"invalid plan leaf {tree!r}")
    return [tree]


# ---------------------------------------------------------------------------
# plan construction


class _Context:
    """Per-expression data shared by the planners."""

    def __init__(self, spec, shapes, mode, cost_mode):
        if isinstance(spec, str):
            spec = parse(spec)
        self.spec = spec
        if isinstance(shapes, ShapeEnv):
            shapes = shapes.dims
        self.env = ShapeEnv.from_dims(spec, shapes)
        self.modes = resolve_modes(spec, mode)
        self.multiway = _multiway(spec)
        _check_multiway_dims(self.env, self.multiway)
        self.cost_mode = CostMode.parse(cost_mode)
        self.n = spec.num_inputs
        self.full = (1 << self.n) - 1
        self.output = set(spec.output)
        # bitmask of inputs carrying each atom
        self.carriers = {}
        for i, sub in enumerate(spec.inputs):
            for atom in sub:
                self.carriers[atom] = self.carriers.get(atom, 0) | (1 << i)

    def kept(self, atoms, mask: int) -> list[Atom]:
        """Atoms of a mask's union that survive: in the output or carried outside the mask."""
        outside = self.full & ~mask
        return [a for a in atoms if a in self.output or self.carriers[a] & outside]

    def join(self, lsubs, lshape, lmask, rsubs, rshape, rmask) -> tuple[PairwiseOp, tuple[int, ...]]:
        mask = lmask | rmask
        if mask == self.full:
            result = tuple(self.spec.output)
        else:
            lset = set(lsubs)
            result = tuple(self.kept(list(lsubs) + [a for a in rsubs if a not in lset], mask))
        shared = set(lsubs) & set(rsubs)
        modes = {a: self.modes[a] for a in sorted(shared & self.spec.conv_atoms)}
        op = PairwiseOp.build(lsubs, rsubs, result, modes, lshape, rshape, self.multiway)
        op.check_shapes(lshape, rshape)
        return op, op.result_shape(lshape, rshape)

    def leaf(self, i: int):
        return self.spec.inputs[i], self.env.dims[i], 1 << i


def build_plan(
    spec: ExpressionSpec | str,
    shapes,
    tree,
    mode=None,
    cost_mode: CostMode | str = CostMode.INFERENCE,
) -> EvaluationPlan:
    """Turn an explicit tree into an :class:`EvaluationPlan`, honouring child order.

    Intermediate results list the left operand's surviving atoms followed by
    the right operand's new ones; the root result is the expression output.
    """
    ctx = _Context(spec, shapes, mode, cost_mode)
    leaves = _leaves(tree)
    if sorted(leaves) != list(range(ctx.n)):
        raise PlanningError(f"plan leaves {sorted(leaves)} must be each input 0..{ctx.n - 1} exactly once")

    nodes: list[PlanNode] = []
    peak = 0

    def visit(t):
        nonlocal peak
        if not isinstance(t, tuple):
            return (t,) + ctx.leaf(t)
        lid, lsubs, lshape, lmask = visit(t[0])
        rid, rsubs, rshape, rmask = visit(t[1])
        op, shape = ctx.join(lsubs, lshape, lmask, rsubs, rshape, rmask)
        cost = pairwise_cost(op, (lshape, rshape), ctx.cost_mode)
        nodes.append(PlanNode(lid, rid, op, tuple(lshape), tuple(rshape), shape, cost))
        mask = lmask | rmask
        if mask != ctx.full:
            peak = max(peak, math.prod(shape))
        return ctx.n + len(nodes) - 1, op.result, shape, mask

    visit(tree)
    return EvaluationPlan(
        ctx.spec,
        ctx.env.dims,
        ctx.modes,
        ctx.cost_mode,
        tuple(nodes),
        sum(node.cost.total for node in nodes),
        peak,
    )


def left_to_right(spec, shapes, mode=None, cost_mode: CostMode | str = CostMode.INFERENCE) -> EvaluationPlan:
    """The left-deep plan ``((T0 T1) T2) ...`` in input order."""
    if isinstance(spec, str):
        spec = parse(spec)
    tree = 0
    for i in range(1, spec.num_inputs):
        tree = (tree, i)
    return build_plan(spec, shapes, tree, mode, cost_mode)


@dataclass
class _Entry:
    # minimal cost of the subset plus its Pareto frontier of (peak, encoding, tree)
    cost: int
    frontier: list = field(default_factory=list)


def _pareto_insert(frontier: list, peak: int, enc: str, tree) -> None:
    for p, e, _ in frontier:
        if p <= peak and e <= enc:
            return
    frontier[:] = [item for item in frontier if not (peak <= item[0] and enc <= item[1])]
    frontier.append((peak, enc, tree))


def optimal(
    spec,
    shapes,
    mode=None,
    cost_mode: CostMode | str = CostMode.INFERENCE,
    *,
    max_inputs: int = DEFAULT_MAX_INPUTS,
    cost_cap: bool = False,
) -> EvaluationPlan:
    """Minimum-cost plan over all full binary trees on the inputs.

    Exact dynamic programming over subsets: the best plan for a subset is the
    cheapest split into two disjoint non-empty parts, each solved optimally.
    Outer-product joins are allowed. Ties are broken by smaller peak
    intermediate size, then by the lexicographically smallest tree encoding.

    With ``cost_cap=True`` subsets whose best cost exceeds a cap are pruned,
    and the cap is raised geometrically until a full plan is found; the
    result is identical to the uncapped search.
    """
    ctx = _Context(spec, shapes, mode, cost_mode)
    if ctx.n > max_inputs:
        raise PlanningError(f"{ctx.n} inputs exceed the planner cap of {max_inputs}")
    if ctx.n == 1:
        return build_plan(ctx.spec, ctx.env, 0, ctx.modes, ctx.cost_mode)

    info = _subset_info(ctx)
    if cost_cap:
        cap = max(math.prod(d) for d in ctx.env.dims)
        while True:
            table = _subset_dp(ctx, info, cap)
            if ctx.full in table:
                break
            cap *= 8
    else:
        table = _subset_dp(ctx, info, None)
    best = min(table[ctx.full].frontier, key=lambda item: (item[0], item[1]))
    return build_plan(ctx.spec, ctx.env, best[2], ctx.modes, ctx.cost_mode)


def _subset_info(ctx: _Context) -> dict[int, tuple]:
    """``mask -> (surviving atoms, their dims, element count)``, independent of tree shape."""
    info = {}
    for i in range(ctx.n):
        sub, dims, _ = ctx.leaf(i)
        info[1 << i] = (tuple(sub), tuple(dims), math.prod(dims))
    for mask in sorted(range(1, ctx.full + 1), key=lambda m: bin(m).count("1")):
        if mask in info:
            continue
        low = mask & -mask
        rest = mask ^ low
        (ls, ld, _), (rs, rd, _) = info[low], info[rest]
        op, shape = ctx.join(ls, ld, low, rs, rd, rest)
        info[mask] = (op.result, shape, math.prod(shape))
    return info


def _subset_dp(ctx: _Context, info: dict, cap: int | None) -> dict[int, _Entry]:
    table: dict[int, _Entry] = {}
    for i in range(ctx.n):
        table[1 << i] = _Entry(0, [(0, f"{i:02d}", i)])
    masks = sorted(range(1, ctx.full + 1), key=lambda m: bin(m).count("1"))
    for mask in masks:
        if mask & (mask - 1) == 0:
            continue
        low = mask & -mask
        candidates = []
        best_cost = None
        sub = (mask - 1) & mask
        while sub:
            if sub & low:
                other = mask ^ sub
                le, re = table.get(sub), table.get(other)
                if le is not None and re is not None:
                    ls, ld, _ = info[sub]
                    rs, rd, _ = info[other]
                    op, _ = ctx.join(ls, ld, sub, rs, rd, other)
                    cost = le.cost + re.cost + pairwise_cost(op, (ld, rd), ctx.cost_mode).total
                    if (cap is None or cost <= cap) and (best_cost is None or cost <= best_cost):
                        if best_cost is None or cost < best_cost:
                            best_cost = cost
                            candidates = []
                        candidates.append((sub, other))
            sub = (sub - 1) & mask
        if best_cost is None:
            continue
        size = info[mask][2] if mask != ctx.full else 0
        entry = _Entry(best_cost)
        for left, right in candidates:
            for lp, lenc, ltree in table[left].frontier:
                for rp, renc, rtree in table[right].frontier:
                    _pareto_insert(entry.frontier, max(lp, rp, size), f"({lenc},{renc})", (ltree, rtree))
        table[mask] = entry
    return table


def _all_trees(n: int) -> Iterator:
    """Every unordered full binary tree with leaves ``0..n-1``, each exactly once."""

    def insert(tree, leaf):
        yield (tree, leaf)
        if isinstance(tree, tuple):
            for sub in insert(tree[0], leaf):
                yield (sub, tree[1])
            for sub in insert(tree[1], leaf):
                yield (tree[0], sub)

    def grow(k):
        if k == 1:
            yield 0
            return
        for tree in grow(k - 1):
            yield from insert(tree, k - 1)

    yield from grow(n)


def enumerate_all(
    spec, shapes, mode=None, cost_mode: CostMode | str = CostMode.INFERENCE
) -> list[tuple[EvaluationPlan, int]]:
    """Every plan over the inputs with its total cost; ``(2N-3)!!`` plans for ``N >= 2``."""
    ctx = _Context(spec, shapes, mode, cost_mode)
    if ctx.n > ENUMERATE_MAX_INPUTS:
        raise PlanningError(f"enumeration supports at most {ENUMERATE_MAX_INPUTS} inputs, got {ctx.n}")
    plans = []
    for tree in _all_trees(ctx.n):
        plan = build_plan(ctx.spec, ctx.env, tree, ctx.modes, ctx.cost_mode)
        plans.append((plan, plan.total_cost))
    return plans


# ---------------------------------------------------------------------------
# execution


@dataclass(frozen=True)
class ExecutionResult:
    tensor: DenseTensor
    flops: int
    peak_elems: int


def execute(plan: EvaluationPlan, tensors: Sequence[DenseTensor]) -> ExecutionResult:
    """Run ``plan`` node by node on ``tensors``.

    Returns the output together with the number of multiplications the
    kernels performed and the largest non-output intermediate observed.
    """
    tensors = [t if isinstance(t, DenseTensor) else DenseTensor(t) for t in tensors]
    if len(tensors) != plan.num_inputs:
        raise ShapeError(f"plan expects {plan.num_inputs} tensors, got {len(tensors)}")
    for i, (t, shape) in enumerate(zip(tensors, plan.input_shapes)):
        if t.shape != shape:
            raise ShapeError(f"tensor {i} has shape {list(t.shape)}, plan was built for {list(shape)}")

    spec = plan.spec
    if not plan.nodes:
        reduced, subs = sum_unique_modes(tensors[0], spec.inputs[0], spec.output)
        order = [subs.index(a) for a in spec.output]
        out = reduced if order == list(range(len(order))) else permute(reduced, order)
        return ExecutionResult(out, 0, 0)

    values: dict[int, DenseTensor] = dict(enumerate(tensors))
    n = plan.num_inputs
    flops = 0
    peak = 0
    for k, node in enumerate(plan.nodes):
        a, b = values.pop(node.left), values.pop(node.right)
        out = pairwise_eval(a, b, node.op)
        flops += flops_actual(node.op, (a.shape, b.shape))
        values[n + k] = out
        if k != len(plan.nodes) - 1:
            peak = max(peak, out.size)
    return ExecutionResult(values[n + len(plan.nodes) - 1], flops, peak)
