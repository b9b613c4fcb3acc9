"""Exact evaluation of a single two-input conv_einsum operation.

Every pairwise operation is reduced to one canonical grouped convolution::

    Y[g, p, q, n...] = sum_k  A[g, k, p, x...] (*) B[g, k, q, x...]

where ``g`` merges all batch atoms, ``k`` all contraction atoms, ``p``/``q``
the free atoms of each operand, and each trailing axis is one convolution
atom. Atoms private to one operand and absent from the result are summed out
beforehand, and the merged axes are split back afterwards. The convolution
core is a direct shift-and-accumulate loop over filter taps (no FFT), so its
multiplication count is known exactly; see :func:`flops_actual`.
"""

from __future__ import annotations

import enum
import itertools
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .errors import ShapeError
from .parser import Atom, AtomClass, format_atom, format_subscripts, parse
from .tensor import DenseTensor, permute, reshape

__all__ = [
    "ConvMode",
    "MergeRecord",
    "PairwiseOp",
    "conv_pairs",
    "flops_actual",
    "merge_like_modes",
    "output_dim",
    "pairwise_eval",
    "pairwise_op",
    "sum_unique_modes",
]


class ConvMode(enum.Enum):
    FULL = "full"
    SAME = "same"
    VALID = "valid"
    CIRCULAR = "circular"

    @classmethod
    def parse(cls, value: "ConvMode | str") -> "ConvMode":
        if isinstance(value, cls):
            return value
        try:
            return cls(str(value).lower())
        except ValueError:
            raise ValueError(f"unknown convolution mode {value!r}") from None


def output_dim(mode: ConvMode, feature: int, filt: int) -> int:
    """Length of a 1-D convolution of a length-``feature`` signal with a length-``filt`` filter."""
    if mode is ConvMode.FULL:
        return feature + filt - 1
    if mode is ConvMode.VALID:
        if filt > feature:
            raise ShapeError(f"valid convolution needs feature ({feature}) >= filter ({filt})")
        return feature - filt + 1
    return feature


def same_offset(filt: int) -> int:
    return (filt - 1) // 2


def conv_pairs(mode: ConvMode, feature: int, filt: int) -> int:
    """Number of (output, tap) pairs the direct loop multiplies for one conv atom."""
    if mode in (ConvMode.FULL, ConvMode.CIRCULAR):
        return feature * filt
    if mode is ConvMode.VALID:
        return max(0, feature - filt + 1) * filt
    off = same_offset(filt)
    return sum(max(0, min(k + feature, off + feature) - max(k, off)) for k in range(filt))


@dataclass(frozen=True)
class PairwiseOp:
    """One two-operand node of an evaluation plan.

    ``modes`` lists the atoms convolved at this node; ``feature`` records for
    each of them which operand (0 = left, 1 = right) supplies the feature
    signal, the other supplying the filter. Atoms in ``multiway`` belong to a
    convolution shared by three or more inputs of the enclosing expression
    and therefore require equal dimensions on both operands.
    """

    left: tuple[Atom, ...]
    right: tuple[Atom, ...]
    result: tuple[Atom, ...]
    modes: Mapping[Atom, ConvMode] = field(default_factory=dict)
    feature: Mapping[Atom, int] = field(default_factory=dict)
    multiway: frozenset[Atom] = frozenset()

    def __post_init__(self):
        both = set(self.left) & set(self.right)
        avail = set(self.left) | set(self.right)
        for name, sub in (("left", self.left), ("right", self.right), ("result", self.result)):
            if len(set(sub)) != len(sub):
                raise ValueError(f"{name} subscripts repeat an atom: {format_subscripts(sub)}")
        if not set(self.result) <= avail:
            extra = set(self.result) - avail
            raise ValueError(f"result atoms {sorted(extra)} absent from both operands")
        for atom in self.modes:
            if atom not in both or atom not in self.result:
                raise ValueError(
                    f"convolution atom {format_atom(atom)!r} must be in both operands and the result"
                )
        if set(self.feature) != set(self.modes):
            raise ValueError("feature side must be given for exactly the convolved atoms")

    @classmethod
    def build(
        cls,
        left: Sequence[Atom],
        right: Sequence[Atom],
        result: Sequence[Atom],
        modes: Mapping[Atom, ConvMode],
        left_shape: Sequence[int],
        right_shape: Sequence[int],
        multiway: frozenset[Atom] = frozenset(),
    ) -> "PairwiseOp":
        """Create an op choosing, per convolved atom, the larger-dimension operand as feature.

        Ties go to the left operand.
        """
        left, right = tuple(left), tuple(right)
        feature = {}
        for atom in modes:
            dl = left_shape[left.index(atom)]
            dr = right_shape[right.index(atom)]
            feature[atom] = 0 if dl >= dr else 1
        return cls(left, right, tuple(result), dict(modes), feature, frozenset(multiway) & set(modes))

    def classes(self) -> dict[Atom, AtomClass]:
        """Pairwise category of every atom of either operand."""
        lset, rset, out = set(self.left), set(self.right), set(self.result)
        classes = {}
        for atom in self.left + tuple(a for a in self.right if a not in lset):
            if atom in self.modes:
                classes[atom] = AtomClass.CONVOLUTION
            elif atom in lset and atom in rset:
                classes[atom] = AtomClass.BATCH if atom in out else AtomClass.CONTRACTION
            else:
                classes[atom] = AtomClass.FREE if atom in out else AtomClass.SELF_CONTRACTION
        return classes

    def __str__(self) -> str:
        text = f"{format_subscripts(self.left)},{format_subscripts(self.right)}->{format_subscripts(self.result)}"
        if self.modes:
            text += "|" + format_subscripts(a for a in self.result if a in self.modes)
        return text

    # -- shape bookkeeping -------------------------------------------------

    def check_shapes(self, left_shape: Sequence[int], right_shape: Sequence[int]) -> None:
        if len(left_shape) != len(self.left) or len(right_shape) != len(self.right):
            raise ShapeError(
                f"operand ranks {len(left_shape)},{len(right_shape)} do not match "
                f"subscripts {format_subscripts(self.left)},{format_subscripts(self.right)}"
            )
        ldims = dict(zip(self.left, left_shape))
        rdims = dict(zip(self.right, right_shape))
        for atom in set(ldims) & set(rdims):
            dl, dr = ldims[atom], rdims[atom]
            if atom not in self.modes:
                if dl != dr:
                    raise ShapeError(f"atom {format_atom(atom)!r} has dimension {dl} on the left but {dr} on the right")
                continue
            feat, filt = (dl, dr) if self.feature[atom] == 0 else (dr, dl)
            if self.modes[atom] is ConvMode.VALID and filt > feat:
                raise ShapeError(
                    f"valid convolution on {format_atom(atom)!r}: filter {filt} longer than feature {feat}"
                )
            if atom in self.multiway and dl != dr:
                raise ShapeError(
                    f"multi-way circular convolution on {format_atom(atom)!r} needs equal dimensions, got {dl} and {dr}"
                )

    def conv_geometry(self, left_shape, right_shape) -> dict[Atom, tuple[int, int, int]]:
        """``atom -> (feature dim, filter dim, output dim)`` for each convolved atom."""
        ldims = dict(zip(self.left, left_shape))
        rdims = dict(zip(self.right, right_shape))
        geo = {}
        for atom, mode in self.modes.items():
            feat, filt = (ldims[atom], rdims[atom]) if self.feature[atom] == 0 else (rdims[atom], ldims[atom])
            geo[atom] = (feat, filt, output_dim(mode, feat, filt))
        return geo

    def result_shape(self, left_shape, right_shape) -> tuple[int, ...]:
        dims = dict(zip(self.right, right_shape))
        dims.update(zip(self.left, left_shape))
        for atom, (_, _, out) in self.conv_geometry(left_shape, right_shape).items():
            dims[atom] = out
        return tuple(dims[a] for a in self.result)

    def loop_extent(self, left_shape, right_shape) -> int:
        """Product of batch, contraction and free dimensions of both operands."""
        ldims = dict(zip(self.left, left_shape))
        rdims = dict(zip(self.right, right_shape))
        extent = 1
        for atom, cls in self.classes().items():
            if cls in (AtomClass.CONVOLUTION, AtomClass.SELF_CONTRACTION):
                continue
            extent *= ldims[atom] if atom in ldims else rdims[atom]
        return extent


def pairwise_op(
    expr: str,
    left_shape: Sequence[int],
    right_shape: Sequence[int],
    mode: ConvMode | str = ConvMode.SAME,
) -> PairwiseOp:
    """Build a :class:`PairwiseOp` from a two-input conv_einsum string."""
    spec = parse(expr)
    if spec.num_inputs != 2:
        raise ValueError(f"pairwise expression needs exactly two inputs, got {spec.num_inputs}")
    mode = ConvMode.parse(mode)
    return PairwiseOp.build(
        spec.inputs[0],
        spec.inputs[1],
        spec.output,
        {a: mode for a in spec.conv_atoms},
        left_shape,
        right_shape,
    )


# ---------------------------------------------------------------------------
# preprocessing


def sum_unique_modes(
    t: DenseTensor, subs: Sequence[Atom], keep
) -> tuple[DenseTensor, tuple[Atom, ...]]:
    """Sum out every axis whose atom is not in ``keep``.

    Surviving atoms keep their relative order.
    """
    subs = tuple(subs)
    keep = set(keep)
    if not keep <= set(subs):
        missing = sorted(keep - set(subs))
        raise ValueError(f"keep references atoms absent from subscripts: {missing}")
    drop = tuple(i for i, a in enumerate(subs) if a not in keep)
    if not drop:
        return t, subs
    summed = np.sum(t.array, axis=drop)
    return DenseTensor._wrap(np.asarray(summed)), tuple(a for a in subs if a in keep)


_MERGE_ORDER = (AtomClass.BATCH, AtomClass.CONTRACTION, AtomClass.FREE)


@dataclass(frozen=True)
class MergeRecord:
    """How :func:`merge_like_modes` grouped axes.

    ``groups`` holds one ``(class, atoms, dims)`` entry per merged axis in
    axis order; convolution atoms each get their own single-atom group.
    """

    groups: tuple[tuple[AtomClass, tuple[Atom, ...], tuple[int, ...]], ...]

    def group(self, cls: AtomClass) -> tuple[tuple[Atom, ...], tuple[int, ...]]:
        atoms, dims = [], []
        for c, a, d in self.groups:
            if c is cls:
                atoms.extend(a)
                dims.extend(d)
        return tuple(atoms), tuple(dims)

    def extent(self, cls: AtomClass) -> int:
        return math.prod(self.group(cls)[1])


def merge_like_modes(
    t: DenseTensor, subs: Sequence[Atom], classmap: Mapping[Atom, AtomClass]
) -> tuple[DenseTensor, tuple[tuple[Atom, ...], ...], MergeRecord]:
    """Permute into ``batch | contraction | free | conv...`` and fuse each non-conv class.

    Batch, contraction and convolution atoms are ordered by name so two
    operands merged independently agree on their shared axes; free atoms keep
    their original relative order. Returns the merged tensor, its compound
    subscripts (one tuple of atoms per axis) and the record needed to undo it.
    """
    subs = tuple(subs)
    dims = dict(zip(subs, t.shape))
    for atom in subs:
        if classmap[atom] is AtomClass.SELF_CONTRACTION:
            raise ValueError(f"atom {format_atom(atom)!r} must be summed out before merging")
    ordered: list[Atom] = []
    groups = []
    for cls in _MERGE_ORDER:
        members = [a for a in subs if classmap[a] is cls]
        if cls is not AtomClass.FREE:
            members.sort()
        if members:
            ordered.extend(members)
            groups.append((cls, tuple(members), tuple(dims[a] for a in members)))
    for atom in sorted(a for a in subs if classmap[a] is AtomClass.CONVOLUTION):
        ordered.append(atom)
        groups.append((AtomClass.CONVOLUTION, (atom,), (dims[atom],)))
    order = [subs.index(a) for a in ordered]
    moved = t if order == list(range(len(subs))) else permute(t, order)
    new_shape = [math.prod(g[2]) for g in groups]
    merged = moved if list(moved.shape) == new_shape else reshape(moved, new_shape)
    return merged, tuple(g[1] for g in groups), MergeRecord(tuple(groups))


# ---------------------------------------------------------------------------
# evaluation


def _max_workers() -> int:
    try:
        return max(1, int(os.environ.get("CONVEXPR_THREADS", "1")))
    except ValueError:
        return 1


def _tap_window(mode: ConvMode, feat: int, filt: int, k: int):
    """Output slice and feature slice touched by filter tap ``k`` (None if empty)."""
    if mode is ConvMode.FULL:
        return slice(k, k + feat), slice(0, feat)
    if mode is ConvMode.VALID:
        n = feat - filt + 1
        return slice(0, n), slice(k, k + n)
    if mode is ConvMode.CIRCULAR:
        return slice(0, feat), slice(0, feat)
    off = same_offset(filt)
    lo, hi = max(k, off), min(k + feat, off + feat)
    if hi <= lo:
        return None
    return slice(lo - off, hi - off), slice(lo - k, hi - k)


def _grouped_direct_conv(a: np.ndarray, b: np.ndarray, convs) -> np.ndarray:
    """Direct grouped convolution core.

    ``a``: ``[G, K, P, c...]``, ``b``: ``[G, K, Q, c...]``; ``convs`` holds one
    ``(mode, feature_side)`` per trailing axis. Returns ``[G, P, Q, out...]``.
    """
    G, K, P = a.shape[:3]
    Q = b.shape[2]
    geo = []
    for c, (mode, side) in enumerate(convs):
        da, db = a.shape[3 + c], b.shape[3 + c]
        feat, filt = (da, db) if side == 0 else (db, da)
        geo.append((mode, side, feat, filt, output_dim(mode, feat, filt)))
    out = np.zeros((G, P, Q) + tuple(g[4] for g in geo))
    if not geo:
        out[...] = np.matmul(a.transpose(0, 2, 1), b)
        return out

    a_feat = [c for c, g in enumerate(geo) if g[1] == 0]
    b_feat = [c for c, g in enumerate(geo) if g[1] == 1]
    # result axes after matmul: G, P, a-feature convs, Q, b-feature convs
    pos = {c: 2 + i for i, c in enumerate(a_feat)}
    q_axis = 2 + len(a_feat)
    pos.update({c: q_axis + 1 + i for i, c in enumerate(b_feat)})
    back = [0, 1, q_axis] + [pos[c] for c in range(len(geo))]

    for taps in itertools.product(*(range(g[3]) for g in geo)):
        ia = [slice(None)] * 3
        ib = [slice(None)] * 3
        io = [slice(None)] * 3
        src_a, src_b = a, b
        empty = False
        for c, ((mode, side, feat, filt, _), k) in enumerate(zip(geo, taps)):
            window = _tap_window(mode, feat, filt, k)
            if window is None:
                empty = True
                break
            out_sl, feat_sl = window
            io.append(out_sl)
            if mode is ConvMode.CIRCULAR and k:
                if side == 0:
                    src_a = np.roll(src_a, k, axis=3 + c)
                else:
                    src_b = np.roll(src_b, k, axis=3 + c)
            if side == 0:
                ia.append(feat_sl)
                ib.append(k)
            else:
                ia.append(k)
                ib.append(feat_sl)
        if empty:
            continue
        sa = src_a[tuple(ia)]
        sb = src_b[tuple(ib)]
        na, nb = sa.shape[3:], sb.shape[3:]
        prod = np.matmul(sa.reshape(G, K, -1).transpose(0, 2, 1), sb.reshape(G, K, -1))
        prod = prod.reshape((G, P) + na + (Q,) + nb).transpose(back)
        out[tuple(io)] += prod
    return out


def _run_core(a: np.ndarray, b: np.ndarray, convs) -> np.ndarray:
    workers = min(_max_workers(), a.shape[0])
    if workers <= 1:
        return _grouped_direct_conv(a, b, convs)
    chunks = np.array_split(np.arange(a.shape[0]), workers)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        parts = pool.map(lambda idx: _grouped_direct_conv(a[idx], b[idx], convs), chunks)
        return np.concatenate(list(parts), axis=0)


def pairwise_eval(a: DenseTensor, b: DenseTensor, op: PairwiseOp) -> DenseTensor:
    """Evaluate ``op`` on ``a`` (left) and ``b`` (right) exactly."""
    op.check_shapes(a.shape, b.shape)
    classes = op.classes()

    a1, la = sum_unique_modes(a, op.left, [x for x in op.left if classes[x] is not AtomClass.SELF_CONTRACTION])
    b1, lb = sum_unique_modes(b, op.right, [x for x in op.right if classes[x] is not AtomClass.SELF_CONTRACTION])
    am, _, rec_a = merge_like_modes(a1, la, classes)
    bm, _, rec_b = merge_like_modes(b1, lb, classes)

    conv_atoms, _ = rec_a.group(AtomClass.CONVOLUTION)
    conv_a = rec_a.group(AtomClass.CONVOLUTION)[1]
    conv_b = rec_b.group(AtomClass.CONVOLUTION)[1]
    G = rec_a.extent(AtomClass.BATCH)
    K = rec_a.extent(AtomClass.CONTRACTION)
    A = am.array.reshape((G, K, rec_a.extent(AtomClass.FREE)) + conv_a)
    B = bm.array.reshape((G, K, rec_b.extent(AtomClass.FREE)) + conv_b)

    Y = _run_core(A, B, [(op.modes[c], op.feature[c]) for c in conv_atoms])

    batch_atoms, batch_dims = rec_a.group(AtomClass.BATCH)
    free_a, free_a_dims = rec_a.group(AtomClass.FREE)
    free_b, free_b_dims = rec_b.group(AtomClass.FREE)
    subs = batch_atoms + free_a + free_b + conv_atoms
    y = DenseTensor._wrap(Y.reshape(batch_dims + free_a_dims + free_b_dims + Y.shape[3:]))
    order = [subs.index(x) for x in op.result]
    return y if order == list(range(len(order))) else permute(y, order)


def flops_actual(op: PairwiseOp, shapes: Sequence[Sequence[int]]) -> int:
    """Exact number of scalar multiplications :func:`pairwise_eval` performs for ``op``.

    Pre-summation of private atoms costs additions only and is not counted.
    """
    left_shape, right_shape = shapes
    op.check_shapes(left_shape, right_shape)
    count = op.loop_extent(left_shape, right_shape)
    for atom, (feat, filt, _) in op.conv_geometry(left_shape, right_shape).items():
        count *= conv_pairs(op.modes[atom], feat, filt)
    return count
