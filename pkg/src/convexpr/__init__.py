"""Parse, plan and evaluate conv_einsum expressions.

conv_einsum extends einsum notation with convolution atoms, so a whole
tensorized convolutional layer (input tensor plus factorized kernel) is one
multilinear expression. This package finds the pairwise evaluation order that
minimises multiplications and executes it exactly.

>>> from convexpr import parse, optimal
>>> plan = optimal(parse("ij,jk,kl->il"), [[2, 3], [3, 4], [4, 5]])
>>> plan.encoding(), plan.total_cost
('((00,01),02)', 64)
"""

from .cost import CostBreakdown, CostMode, pairwise_cost, plan_cost
from .errors import ConvExprError, ConvModeError, LayerError, ParseError, PlanningError, ShapeError
from .kernels import ConvMode, PairwiseOp, flops_actual, merge_like_modes, pairwise_eval, pairwise_op, sum_unique_modes
from .layers import (
    LayerKind,
    LayerSpec,
    expression,
    param_count,
    rank_for_compression,
    resnet34_cp_blocks,
    theorem_reduced_plan,
)
from .parser import AtomClass, ExpressionSpec, classify, parse, render
from .sequencer import (
    EvaluationPlan,
    ExecutionResult,
    build_plan,
    enumerate_all,
    execute,
    left_to_right,
    optimal,
    resolve_modes,
)
from .tensor import DenseTensor, ShapeEnv, fill_random, permute, reshape

__version__ = "0.1.0"

__all__ = [
    "AtomClass",
    "ConvExprError",
    "ConvMode",
    "ConvModeError",
    "CostBreakdown",
    "CostMode",
    "DenseTensor",
    "EvaluationPlan",
    "ExecutionResult",
    "ExpressionSpec",
    "LayerError",
    "LayerKind",
    "LayerSpec",
    "PairwiseOp",
    "ParseError",
    "PlanningError",
    "ShapeEnv",
    "ShapeError",
    "build_plan",
    "classify",
    "enumerate_all",
    "execute",
    "expression",
    "fill_random",
    "flops_actual",
    "left_to_right",
    "merge_like_modes",
    "optimal",
    "pairwise_cost",
    "pairwise_eval",
    "pairwise_op",
    "param_count",
    "parse",
    "permute",
    "plan_cost",
    "rank_for_compression",
    "render",
    "reshape",
    "resnet34_cp_blocks",
    "resolve_modes",
    "sum_unique_modes",
    "theorem_reduced_plan",
]
