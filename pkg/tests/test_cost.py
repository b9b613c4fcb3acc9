import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from convexpr.cost import CostBreakdown, CostMode, pairwise_cost, plan_cost
from convexpr.kernels import ConvMode, PairwiseOp, flops_actual, pairwise_op
from convexpr.parser import parse
from convexpr.sequencer import build_plan, left_to_right

from support import Chooser, random_pairwise


def cost(expr, a, b, mode="same", cost_mode="inference"):
    return pairwise_cost(pairwise_op(expr, a, b, mode), (a, b), cost_mode)


def test_contraction_example():
    assert cost("abc,ade->bcde", [2, 3, 4], [2, 5, 6]).forward == 720


def test_outer_example():
    assert cost("abc,def->abcdef", [2, 2, 2], [2, 2, 2]).forward == 64


def test_single_conv_atom_training_terms():
    B, S, T, X, L = 2, 3, 4, 9, 3
    for mode in ConvMode:
        Xp = {"full": X + L - 1, "same": X, "valid": X - L + 1, "circular": X}[mode.value]
        c = cost("bsh,tsh->bth|h", [B, S, X], [T, S, L], mode, "training")
        assert c.forward == B * T * S * X * L
        assert c.g1 == B * T * S * Xp * L
        assert c.g2 == B * T * S * X * Xp
        assert c.total == c.forward + c.g1 + c.g2


def test_inference_total_is_forward():
    c = cost("bsh,tsh->bth|h", [2, 3, 9], [4, 3, 3])
    assert c == CostBreakdown(c.forward) and c.total == c.forward


def test_huge_values_are_exact():
    c = cost("ab,bc->ac", [10**9, 10**9], [10**9, 10**9])
    assert c.forward == 10**27


def test_self_contraction_excluded_from_extent():
    # "e" is summed before the product and costs no multiplications
    assert cost("abe,bc->ac", [2, 3, 7], [3, 4]).forward == 24


def test_pass_through_conv_atom_counts_as_free():
    op = PairwiseOp.build("xa", "ab", "xb", {}, [5, 2], [2, 3])
    assert pairwise_cost(op, ([5, 2], [2, 3])).forward == 30


def test_plan_cost_examples():
    spec = parse("ij,jk,kl->il")
    dims = [[2, 3], [3, 4], [4, 5]]
    assert plan_cost(build_plan(spec, dims, ((0, 1), 2))) == 64
    assert plan_cost(build_plan(spec, dims, (0, (1, 2)))) == 90
    single = build_plan(parse("ij,jk->ik"), [[2, 3], [3, 4]], (0, 1))
    assert plan_cost(single) == pairwise_cost(single.nodes[0].op, ([2, 3], [3, 4])).total


def test_plan_cost_reevaluates_under_new_shapes_and_mode():
    spec = parse("ij,jk,kl->il")
    plan = left_to_right(spec, [[2, 3], [3, 4], [4, 5]])
    assert plan_cost(plan, [[1, 3], [3, 4], [4, 5]]) == 1 * 3 * 4 + 1 * 4 * 5
    assert plan_cost(plan, mode="training") == 3 * 64


def test_cost_mode_parse():
    assert CostMode.parse("TRAINING") is CostMode.TRAINING
    with pytest.raises(ValueError):
        CostMode.parse("backward")


@st.composite
def pairwise_problems(draw, modes=None):
    return random_pairwise(Chooser(draw=draw), max_dim=6, budget=10**9, modes=modes)


@settings(max_examples=150, deadline=None)
@given(pairwise_problems())
def test_training_without_conv_is_three_forward(problem):
    # conv atoms become batch atoms once both sides share their length
    a, b, out, sa, sb, modes = problem
    sb = list(sb)
    for atom in modes:
        sb[b.index(atom)] = sa[a.index(atom)]
    op = PairwiseOp.build(a, b, out, {}, sa, sb)
    c = pairwise_cost(op, (sa, sb), "training")
    assert c.total == 3 * c.forward


def test_training_pure_contraction_matches_three_einsum_terms():
    # forward ij,jk->ik; grads ik,jk->ij and ij,ik->jk each cost I*J*K
    c = cost("ij,jk->ik", [2, 3], [3, 4], cost_mode="training")
    assert (c.forward, c.g1, c.g2) == (24, 24, 24)


@settings(max_examples=200, deadline=None)
@given(pairwise_problems())
def test_prediction_bounds_actual(problem):
    a, b, out, sa, sb, modes = problem
    op = PairwiseOp.build(a, b, out, modes, sa, sb)
    predicted = pairwise_cost(op, (sa, sb)).forward
    actual = flops_actual(op, (sa, sb))
    assert actual <= predicted
    if all(m in (ConvMode.FULL, ConvMode.CIRCULAR) for m in modes.values()):
        assert actual == predicted


@settings(max_examples=200, deadline=None)
@given(
    pairwise_problems(modes=[ConvMode.FULL, ConvMode.SAME, ConvMode.CIRCULAR, ConvMode.VALID]),
    st.integers(0, 20),
    st.integers(1, 3),
)
def test_monotone_in_every_dimension(problem, which, bump):
    a, b, out, sa, sb, modes = problem
    axes = [(0, i) for i in range(len(a))] + [(1, i) for i in range(len(b))]
    side, i = axes[which % len(axes)]
    atom = (a, b)[side][i]
    grown = [list(sa), list(sb)]
    grown[side][i] += bump
    if atom not in modes:
        other = b if side == 0 else a
        if atom in other:
            grown[1 - side][other.index(atom)] += bump
    op0 = PairwiseOp.build(a, b, out, modes, sa, sb)
    op1 = PairwiseOp.build(a, b, out, modes, *grown)
    c0 = pairwise_cost(op0, (sa, sb), "training")
    c1 = pairwise_cost(op1, grown, "training")
    assert c1.forward >= c0.forward
    if all(m is not ConvMode.VALID for m in modes.values()):
        assert c1.g1 >= c0.g1 and c1.g2 >= c0.g2 and c1.total >= c0.total


def test_valid_mode_gradient_term_can_shrink():
    # a longer filter shortens the Valid output, so g1 = F*X'*L drops from 9 to 8
    small = cost("x,x->x|x", [5], [3], "valid", "training")
    large = cost("x,x->x|x", [5], [4], "valid", "training")
    assert (small.g1, large.g1) == (9, 8)
    assert large.forward > small.forward


@settings(max_examples=200, deadline=None)
@given(st.data())
def test_contraction_cost_matches_product_formula(data):
    # no batch, no conv, no private summed atoms: forward = prod(left) * prod(right dims not shared)
    n_left = data.draw(st.integers(1, 4))
    n_right = data.draw(st.integers(0, 3))
    n_shared = data.draw(st.integers(0, n_left))
    names = "abcdefgh"
    left = list(names[:n_left])
    shared = left[:n_shared]
    right_only = list(names[n_left : n_left + n_right])
    right = data.draw(st.permutations(shared + right_only)) if shared + right_only else []
    if not right:
        return
    dims = {x: data.draw(st.integers(1, 6)) for x in left + right_only}
    out = [x for x in left + right_only if x not in shared]
    op = PairwiseOp(tuple(left), tuple(right), tuple(out))
    sa, sb = [dims[x] for x in left], [dims[x] for x in right]
    expected = math.prod(sa) * math.prod(dims[x] for x in right if x not in left)
    assert pairwise_cost(op, (sa, sb)).forward == expected
