"""Multiplication-count cost model for pairwise operations and whole plans.

Only multiplications are counted. A pairwise op with loop extent ``F`` (the
product of its batch, contraction and both operands' free dimensions) and
convolution atoms ``c`` with feature length ``X_c``, filter length ``L_c``
and output length ``X'_c`` costs::

    forward = F * prod(X_c * L_c)
    g1      = F * prod(X'_c * L_c)     # backward term for the left operand
    g2      = F * prod(X_c * X'_c)     # backward term for the right operand

The convolution factor ignores padding, so it is an upper bound on what the
direct kernel actually performs. All arithmetic uses Python integers, which
cannot overflow.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass
from typing import TYPE_CHECKING, Sequence

from .kernels import PairwiseOp

if TYPE_CHECKING:
    from .sequencer import EvaluationPlan

__all__ = ["CostBreakdown", "CostMode", "pairwise_cost", "plan_cost"]


class CostMode(enum.Enum):
    INFERENCE = "inference"
    TRAINING = "training"

    @classmethod
    def parse(cls, value: "CostMode | str") -> "CostMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown cost mode {value!r}") from None


@dataclass(frozen=True)
class CostBreakdown:
    forward: int
    g1: int = 0
    g2: int = 0

    @property
    def total(self) -> int:
        return self.forward + self.g1 + self.g2

    def to_json(self) -> dict:
        return {"forward": self.forward, "g1": self.g1, "g2": self.g2, "total": self.total}


def pairwise_cost(
    op: PairwiseOp,
    shapes: Sequence[Sequence[int]],
    mode: CostMode | str = CostMode.INFERENCE,
) -> CostBreakdown:
    """Predicted multiplications of ``op`` on operands of the given shapes.

    In inference mode ``g1`` and ``g2`` are zero, so ``total == forward``.
    """
    mode = CostMode.parse(mode)
    left_shape, right_shape = shapes
    op.check_shapes(left_shape, right_shape)
    extent = op.loop_extent(left_shape, right_shape)
    forward = g1 = g2 = extent
    for feat, filt, out in op.conv_geometry(left_shape, right_shape).values():
        forward *= feat * filt
        g1 *= out * filt
        g2 *= feat * out
    if mode is CostMode.INFERENCE:
        return CostBreakdown(forward)
    return CostBreakdown(forward, g1, g2)


def plan_cost(
    plan: "EvaluationPlan",
    shapes: Sequence[Sequence[int]] | None = None,
    mode: CostMode | str | None = None,
) -> int:
    """Total predicted multiplications of ``plan``.

    With ``shapes`` or ``mode`` given, the plan's tree is re-evaluated under
    those input shapes and cost mode; otherwise the plan's own are used.
    """
    if shapes is not None or mode is not None:
        from .sequencer import build_plan

        plan = build_plan(
            plan.spec,
            plan.input_shapes if shapes is None else shapes,
            plan.tree(),
            plan.modes,
            plan.cost_mode if mode is None else mode,
        )
    total = 0
    for node in plan.nodes:
        total += pairwise_cost(node.op, (node.left_shape, node.right_shape), plan.cost_mode).total
    return total
