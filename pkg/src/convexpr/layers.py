"""Tensorized convolutional layers as conv_einsum expressions.

Each :class:`LayerSpec` describes one layer: input channels ``S``, output
channels ``T``, spatial filter ``H x W``, feature map ``Hp x Wp`` and batch
``B``. Reshaped kinds (RCP, RTK, RTT, RTR, BT, HT) split the channels into
``M`` factors, ``T = prod(T_m)`` and ``S = prod(S_m)``. Input 0 of every
expression is the feature tensor; the remaining inputs are kernel factors.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, replace

from .errors import LayerError
from .parser import ExpressionSpec, parse
from .sequencer import EvaluationPlan, build_plan
from .tensor import ShapeEnv

__all__ = [
    "LayerKind",
    "LayerSpec",
    "expression",
    "expression_string",
    "param_count",
    "rank_for_compression",
    "rank_count",
    "resnet34_cp_blocks",
    "theorem_reduced_plan",
]


class LayerKind(enum.Enum):
    STANDARD = "standard"
    CP = "cp"
    RCP = "rcp"
    TK = "tk"
    RTK = "rtk"
    TT = "tt"
    RTT = "rtt"
    TR = "tr"
    RTR = "rtr"
    BT = "bt"
    HT = "ht"
    INTERLEAVED_GROUP = "interleaved_group"
    SEPARABLE_DEPTHWISE = "separable_depthwise"

    @classmethod
    def parse(cls, value: "LayerKind | str") -> "LayerKind":
        if isinstance(value, cls):
            return value
        key = str(value).lower().replace("-", "").replace("_", "")
        aliases = {"interleaved": cls.INTERLEAVED_GROUP, "separable": cls.SEPARABLE_DEPTHWISE}
        if key in aliases:
            return aliases[key]
        for kind in cls:
            if kind.value.replace("_", "") == key:
                return kind
        raise LayerError(f"unknown layer kind {value!r}")

    @property
    def reshaped(self) -> bool:
        return self in _RESHAPED


_RESHAPED = {LayerKind.RCP, LayerKind.RTK, LayerKind.RTT, LayerKind.RTR, LayerKind.BT, LayerKind.HT}
# Interleaved group layers split both channel counts into (groups, per-group) pairs.
_TWO_FACTOR = {LayerKind.INTERLEAVED_GROUP}


@dataclass(frozen=True)
class LayerSpec:
    """Dimensions of one tensorized layer.

    ``t_factors``/``s_factors`` hold a single entry for plain kinds, ``M``
    entries for reshaped kinds and ``(groups, per-group)`` for interleaved
    group layers. ``rank`` is an int (used for every rank of the kind) or a
    tuple with one entry per rank; see :func:`rank_count`.
    """

    kind: LayerKind
    t_factors: tuple[int, ...]
    s_factors: tuple[int, ...]
    H: int = 3
    W: int = 3
    Hp: int = 32
    Wp: int = 32
    B: int = 1
    rank: int | tuple[int, ...] | None = None
    name: str = ""

    def __post_init__(self):
        object.__setattr__(self, "kind", LayerKind.parse(self.kind))
        object.__setattr__(self, "t_factors", _factors(self.t_factors, "T"))
        object.__setattr__(self, "s_factors", _factors(self.s_factors, "S"))
        if isinstance(self.rank, (list, tuple)):
            object.__setattr__(self, "rank", tuple(int(r) for r in self.rank))
        for name in ("H", "W", "Hp", "Wp", "B"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int) or value < 1:
                raise LayerError(f"{name} must be a positive integer, got {value!r}")
        self._validate()

    def _validate(self) -> None:
        kind = self.kind
        mt, ms = len(self.t_factors), len(self.s_factors)
        if kind.reshaped:
            if mt != ms:
                raise LayerError(f"{kind.value} needs as many T factors as S factors, got {mt} and {ms}")
            if kind is LayerKind.HT and mt != 3:
                raise LayerError(f"ht is defined for exactly 3 reshape factors, got {mt}")
        elif kind in _TWO_FACTOR:
            if mt != 2 or ms != 2:
                raise LayerError("interleaved_group needs T=[groups, per-group] and S=[groups, per-group]")
            if (self.H, self.W) != (self.Hp, self.Wp):
                raise LayerError(
                    "interleaved_group convolves h,w across three inputs (circular), so H,W must equal Hp,Wp"
                )
        elif mt != 1 or ms != 1:
            raise LayerError(f"{kind.value} takes a single T and S, got {mt} and {ms} factors")
        if kind is LayerKind.SEPARABLE_DEPTHWISE and self.T != self.S:
            raise LayerError(f"separable_depthwise keeps the channel count, so T must equal S ({self.T} != {self.S})")
        needed = rank_count(kind, self.M)
        if needed == 0:
            if self.rank is not None:
                raise LayerError(f"{kind.value} takes no rank")
            return
        if self.rank is None:
            raise LayerError(f"{kind.value} needs a rank")
        ranks = self.ranks
        if len(ranks) != needed:
            raise LayerError(f"{kind.value} with M={self.M} needs {needed} ranks, got {len(ranks)}")
        if any(r < 1 for r in ranks):
            raise LayerError(f"ranks must be positive, got {list(ranks)}")

    @property
    def T(self) -> int:
        return math.prod(self.t_factors)

    @property
    def S(self) -> int:
        return math.prod(self.s_factors)

    @property
    def M(self) -> int:
        return len(self.t_factors)

    @property
    def ranks(self) -> tuple[int, ...]:
        """The rank tuple with uniform ranks expanded; empty for rank-free kinds."""
        needed = rank_count(self.kind, self.M)
        if needed == 0 or self.rank is None:
            return ()
        if isinstance(self.rank, tuple):
            return self.rank
        return (int(self.rank),) * needed

    def with_rank(self, rank) -> "LayerSpec":
        return replace(self, rank=rank)

    # -- JSON descriptor -----------------------------------------------------

    @classmethod
    def from_json(cls, obj: dict, kind: "LayerKind | str | None" = None) -> "LayerSpec":
        """Build from ``{"kind", "T", "S", "H", "W", "Hp", "Wp", "B", "rank"}``.

        ``T``/``S`` may be integers or factor lists; ``kind`` overrides the
        descriptor's own.
        """
        if not isinstance(obj, dict):
            raise LayerError("layer descriptor must be a JSON object")
        kind = kind if kind is not None else obj.get("kind")
        if kind is None:
            raise LayerError("layer descriptor has no kind")
        known = {"kind", "T", "S", "H", "W", "Hp", "Wp", "B", "rank", "name"}
        extra = set(obj) - known
        if extra:
            raise LayerError(f"unknown descriptor fields {sorted(extra)}")
        kind = LayerKind.parse(kind)
        if "S" not in obj:
            raise LayerError("layer descriptor needs S")
        t = obj.get("T", obj["S"] if kind is LayerKind.SEPARABLE_DEPTHWISE else None)
        if t is None:
            raise LayerError("layer descriptor needs T")
        fields = {k: obj[k] for k in ("H", "W", "Hp", "Wp", "B", "rank", "name") if k in obj}
        return cls(kind, t, obj["S"], **fields)

    def to_json(self) -> dict:
        obj = {
            "kind": self.kind.value,
            "T": list(self.t_factors),
            "S": list(self.s_factors),
            "H": self.H,
            "W": self.W,
            "Hp": self.Hp,
            "Wp": self.Wp,
            "B": self.B,
        }
        if self.rank is not None:
            obj["rank"] = list(self.rank) if isinstance(self.rank, tuple) else self.rank
        if self.name:
            obj["name"] = self.name
        return obj


def _factors(value, label: str) -> tuple[int, ...]:
    if isinstance(value, (list, tuple)):
        factors = tuple(value)
    else:
        factors = (value,)
    if not factors:
        raise LayerError(f"{label} needs at least one factor")
    for f in factors:
        if isinstance(f, bool) or not isinstance(f, int) or f < 1:
            raise LayerError(f"{label} factors must be positive integers, got {list(factors)}")
    return factors


def rank_count(kind: LayerKind | str, M: int = 1) -> int:
    """Number of independent ranks of a layer kind with ``M`` reshape factors."""
    kind = LayerKind.parse(kind)
    return {
        LayerKind.STANDARD: 0,
        LayerKind.INTERLEAVED_GROUP: 0,
        LayerKind.SEPARABLE_DEPTHWISE: 0,
        LayerKind.CP: 1,
        LayerKind.RCP: 1,
        LayerKind.TK: 2,
        LayerKind.TT: 3,
        LayerKind.TR: 4,
        LayerKind.RTK: M + 1,
        LayerKind.RTT: M,
        LayerKind.RTR: M + 1,
        LayerKind.BT: M + 2,
        LayerKind.HT: 6,
    }[kind]


# ---------------------------------------------------------------------------
# expressions


def _subs(*atoms: str) -> str:
    return "".join(a if len(a) == 1 else f"({a})" for a in atoms)


def _layer_terms(layer: LayerSpec) -> tuple[list[tuple[str, list[int]]], str]:
    """``([(subscripts, shape), ...], output subscripts)`` with input 0 the features."""
    k, B, H, W, Hp, Wp = layer.kind, layer.B, layer.H, layer.W, layer.Hp, layer.Wp
    T, S = layer.T, layer.S
    r = layer.ranks
    L = LayerKind

    if k in (L.STANDARD, L.CP, L.TK, L.TT, L.TR):
        x = ("bshw", [B, S, Hp, Wp])
        if k is L.STANDARD:
            factors = [("tshw", [T, S, H, W])]
        elif k is L.CP:
            factors = [("rt", [r[0], T]), ("rs", [r[0], S]), ("rh", [r[0], H]), ("rw", [r[0], W])]
        elif k is L.TK:
            factors = [("(r1)t", [r[0], T]), ("(r2)s", [r[1], S]), ("(r1)(r2)hw", [r[0], r[1], H, W])]
        elif k is L.TT:
            factors = [
                ("(r1)t", [r[0], T]),
                ("(r1)(r2)h", [r[0], r[1], H]),
                ("(r2)(r3)w", [r[1], r[2], W]),
                ("(r3)s", [r[2], S]),
            ]
        else:
            factors = [
                ("(r0)(r1)t", [r[0], r[1], T]),
                ("(r1)(r2)h", [r[1], r[2], H]),
                ("(r2)(r3)w", [r[2], r[3], W]),
                ("(r3)(r0)s", [r[3], r[0], S]),
            ]
        return [x] + factors, "bthw"

    if k is L.INTERLEAVED_GROUP:
        (n, tp), (m, sp) = layer.t_factors, layer.s_factors
        return [
            ("bmshw", [B, m, sp, Hp, Wp]),
            ("nmhw", [n, m, H, W]),
            ("tshw", [tp, sp, H, W]),
        ], "bnthw"

    if k is L.SEPARABLE_DEPTHWISE:
        return [("bshw", [B, S, Hp, Wp]), ("sh", [S, H]), ("sw", [S, W])], "bshw"

    M = layer.M
    ts, ss = layer.t_factors, layer.s_factors
    t = [f"t{m}" for m in range(1, M + 1)]
    s = [f"s{m}" for m in range(1, M + 1)]
    x = (_subs("b", *s, "h", "w"), [B, *ss, Hp, Wp])
    out = _subs("b", *t, "h", "w")
    terms = [x]
    if k is L.RCP:
        R = r[0]
        terms += [(_subs("r", t[m], s[m]), [R, ts[m], ss[m]]) for m in range(M)]
        terms.append(("rhw", [R, H, W]))
    elif k is L.RTK:
        terms += [(_subs(f"r{m + 1}", t[m], s[m]), [r[m + 1], ts[m], ss[m]]) for m in range(M)]
        terms.append(("(r0)hw", [r[0], H, W]))
        terms.append((_subs(*(f"r{m}" for m in range(M + 1))), list(r)))
    elif k is L.RTT:
        for m in range(M):
            if m == 0:
                terms.append((_subs("r1", t[0], s[0]), [r[0], ts[0], ss[0]]))
            else:
                terms.append((_subs(f"r{m}", f"r{m + 1}", t[m], s[m]), [r[m - 1], r[m], ts[m], ss[m]]))
        terms.append((_subs(f"r{M}", "h", "w"), [r[M - 1], H, W]))
    elif k is L.RTR:
        terms += [
            (_subs(f"r{m}", f"r{m + 1}", t[m], s[m]), [r[m], r[m + 1], ts[m], ss[m]]) for m in range(M)
        ]
        terms.append((_subs(f"r{M}", "r0", "h", "w"), [r[M], r[0], H, W]))
    elif k is L.BT:
        # ranks: (blocks, R0, R1..RM)
        blocks, core = r[0], r[1:]
        terms += [
            (_subs("r", f"r{m + 1}", t[m], s[m]), [blocks, core[m + 1], ts[m], ss[m]]) for m in range(M)
        ]
        terms.append((_subs("r", "r0", "h", "w"), [blocks, core[0], H, W]))
        terms.append((_subs("r", *(f"r{m}" for m in range(1, M + 1)), "r0"), [blocks, *core[1:], core[0]]))
    elif k is L.HT:
        # ranks: (R0, R1, R2, R3, R4, R5); leaves r1..r3 and r0, internal nodes r4, r5
        terms += [(_subs(f"r{m + 1}", t[m], s[m]), [r[m + 1], ts[m], ss[m]]) for m in range(3)]
        terms.append(("(r0)hw", [r[0], H, W]))
        terms.append(("(r1)(r2)(r4)", [r[1], r[2], r[4]]))
        terms.append(("(r3)(r0)(r5)", [r[3], r[0], r[5]]))
        terms.append(("(r4)(r5)", [r[4], r[5]]))
    return terms, out


def expression(layer: LayerSpec) -> tuple[ExpressionSpec, ShapeEnv]:
    """The layer's conv_einsum expression (convolving ``h`` and ``w``) with its input shapes."""
    terms, out = _layer_terms(layer)
    spec = parse(",".join(sub for sub, _ in terms) + "->" + out + "|hw")
    return spec, ShapeEnv.from_dims(spec, [shape for _, shape in terms])


def expression_string(layer: LayerSpec) -> str:
    return str(expression(layer)[0])


def param_count(layer: LayerSpec) -> int:
    """Number of kernel parameters: the element count of every factor (all inputs but the features)."""
    terms, _ = _layer_terms(layer)
    return sum(math.prod(shape) for _, shape in terms[1:])


def rank_for_compression(layer: LayerSpec, cr: float) -> int:
    """Largest uniform rank whose parameter count is at most ``cr * T*S*H*W`` (at least 1).

    The parameter count grows monotonically with the rank, so the answer is
    found by doubling followed by bisection.
    """
    if rank_count(layer.kind, layer.M) == 0:
        raise LayerError(f"{layer.kind.value} has no rank to solve for")
    if not (0 < cr <= 1):
        raise LayerError(f"compression rate must be in (0, 1], got {cr}")
    budget = cr * layer.T * layer.S * layer.H * layer.W

    def fits(rank: int) -> bool:
        return param_count(layer.with_rank(rank)) <= budget

    if not fits(1):
        return 1
    lo, hi = 1, 2
    while fits(hi):
        lo, hi = hi, hi * 2
    # invariant: fits(lo) and not fits(hi)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if fits(mid):
            lo = mid
        else:
            hi = mid
    return lo


def theorem_reduced_plan(layer: LayerSpec, cost_mode="inference") -> EvaluationPlan:
    """Plan that first rebuilds the full kernel from its factors, then convolves it with the input.

    RCP: chain ``W1..WM`` over the shared rank, contract with the spatial
    factor ``W0``, then convolve with ``X``. RTK: start from the core, absorb
    ``W1..WM`` and ``W0`` in turn, then convolve with ``X``.
    """
    M = layer.M
    if layer.kind is LayerKind.RCP:
        tree = 1
        for m in range(2, M + 1):
            tree = (tree, m)
        tree = ((tree, M + 1), 0)
    elif layer.kind is LayerKind.RTK:
        tree = M + 2
        for m in range(1, M + 2):
            tree = (tree, m)
        tree = (tree, 0)
    else:
        raise LayerError(f"reduced plan is defined for rcp and rtk layers, not {layer.kind.value}")
    spec, env = expression(layer)
    return build_plan(spec, env, tree, None, cost_mode)


_RESNET34_BLOCKS = (
    # name, S, T, H=W, Hp=Wp
    ("conv1", 3, 64, 7, 112),
    ("conv2_x", 64, 64, 3, 56),
    ("conv3_x", 128, 128, 3, 28),
    ("conv4_x", 256, 256, 3, 14),
    ("conv5_x", 512, 512, 3, 7),
)


def resnet34_cp_blocks(batch: int = 128, cr: float = 1.0) -> list[LayerSpec]:
    """CP layers for the five ResNet-34 stages, each ranked to compression rate ``cr``."""
    if isinstance(batch, bool) or not isinstance(batch, int) or batch < 1:
        raise LayerError(f"batch must be a positive integer, got {batch!r}")
    blocks = []
    for name, s, t, k, p in _RESNET34_BLOCKS:
        layer = LayerSpec(LayerKind.CP, t, s, k, k, p, p, batch, 1, name)
        blocks.append(layer.with_rank(rank_for_compression(layer, cr)))
    return blocks
