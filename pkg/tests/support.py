"""Independent oracles and random problem generators shared by the tests.

Nothing here calls into the kernels or the cost model: the oracles evaluate
the defining nested sums directly with Python loops, and the closed forms are
written out by hand from the structure of the layer expressions.
"""

from __future__ import annotations

import itertools
import math
import random

import numpy as np

from convexpr.kernels import ConvMode
from convexpr.parser import ExpressionSpec

MODES = [ConvMode.FULL, ConvMode.SAME, ConvMode.VALID, ConvMode.CIRCULAR]


# ---------------------------------------------------------------------------
# nested-loop oracle for one pairwise operation


def conv_out_len(mode, feat, filt):
    return {
        ConvMode.FULL: feat + filt - 1,
        ConvMode.SAME: feat,
        ConvMode.VALID: feat - filt + 1,
        ConvMode.CIRCULAR: feat,
    }[mode]


def feature_index(mode, n, k, feat, filt):
    """Feature position multiplied by filter tap ``k`` for output ``n`` (None if padding)."""
    if mode is ConvMode.FULL:
        m = n - k
    elif mode is ConvMode.SAME:
        m = n + (filt - 1) // 2 - k
    elif mode is ConvMode.VALID:
        m = n + k
    else:
        return (n - k) % feat
    return m if 0 <= m < feat else None


def oracle_pairwise(a, a_subs, b, b_subs, out_subs, modes, feature):
    """Direct evaluation of the defining sum, one scalar term at a time.

    Returns ``(result array, number of scalar products with both factors in range)``.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    adims = dict(zip(a_subs, a.shape))
    bdims = dict(zip(b_subs, b.shape))
    conv = {}
    for atom, mode in modes.items():
        feat, filt = (adims[atom], bdims[atom]) if feature[atom] == 0 else (bdims[atom], adims[atom])
        conv[atom] = (mode, feat, filt)
    out_shape = []
    for atom in out_subs:
        if atom in conv:
            mode, feat, filt = conv[atom]
            out_shape.append(conv_out_len(mode, feat, filt))
        else:
            out_shape.append(adims.get(atom, bdims.get(atom)))
    summed = [x for x in dict.fromkeys(list(a_subs) + list(b_subs)) if x not in out_subs]
    sum_dims = [adims.get(x, bdims.get(x)) for x in summed]
    conv_atoms = sorted(conv)
    taps = [range(conv[c][2]) for c in conv_atoms]

    result = np.zeros(out_shape)
    products = 0
    for oidx in itertools.product(*(range(d) for d in out_shape)):
        env = dict(zip(out_subs, oidx))
        total = 0.0
        for sidx in itertools.product(*(range(d) for d in sum_dims)):
            env.update(zip(summed, sidx))
            for kidx in itertools.product(*taps):
                ai, bi = {}, {}
                ok = True
                for c, k in zip(conv_atoms, kidx):
                    mode, feat, filt = conv[c]
                    m = feature_index(mode, env[c], k, feat, filt)
                    if m is None:
                        ok = False
                        break
                    if feature[c] == 0:
                        ai[c], bi[c] = m, k
                    else:
                        ai[c], bi[c] = k, m
                if not ok:
                    continue
                av = a[tuple(ai.get(x, env.get(x)) for x in a_subs)]
                bv = b[tuple(bi.get(x, env.get(x)) for x in b_subs)]
                total += av * bv
                products += 1
        result[oidx] = total
    return result, products


# ---------------------------------------------------------------------------
# random problems


class Chooser:
    """Uniform integer choices from either a ``random.Random`` or a hypothesis ``draw``."""

    def __init__(self, rng=None, draw=None):
        self.rng, self.draw = rng, draw

    def int(self, lo, hi):
        if self.draw is not None:
            from hypothesis import strategies as st

            return self.draw(st.integers(lo, hi))
        return self.rng.randint(lo, hi)

    def perm(self, items):
        items = list(items)
        for i in range(len(items) - 1, 0, -1):
            j = self.int(0, i)
            items[i], items[j] = items[j], items[i]
        return items

    def pick(self, items):
        return items[self.int(0, len(items) - 1)]


ATOM_NAMES = "abcdefghijklmnopqrstuvwxyz"


def random_problem(ch: Chooser, max_inputs=5, max_dim=6, min_inputs=1, max_atoms=7, conv_odds=3):
    """A random valid expression with shapes and per-atom modes.

    Returns ``(spec, dims, modes)``. Multi-way convolution atoms get a single
    dimension and Circular mode; 2-way ones get independent dimensions per
    carrier and any mode.
    """
    n = ch.int(min_inputs, max_inputs)
    inputs = [[] for _ in range(n)]
    output = []
    conv = set()
    n_atoms = ch.int(1, max_atoms)
    names = ch.perm(ATOM_NAMES)[:n_atoms]
    for name in names:
        c = ch.int(1, n)
        carriers = sorted(ch.perm(range(n))[:c])
        is_conv = c >= 2 and conv_odds and ch.int(0, conv_odds) == 0
        in_out = is_conv or ch.int(0, 1) == 1
        for i in carriers:
            inputs[i].append(name)
        if in_out:
            output.append(name)
        if is_conv:
            conv.add(name)
    spare = [x for x in ATOM_NAMES if x not in names]
    for sub in inputs:
        if not sub:
            name = spare.pop()
            sub.append(name)
            output.append(name)
    inputs = [ch.perm(sub) for sub in inputs]
    output = ch.perm(output)
    spec = ExpressionSpec.from_parts(inputs, output, conv)

    counts = spec.occurrences()
    common = {}
    per_carrier = {}
    for atom in spec.atoms():
        if atom in conv and counts[atom] == 2:
            per_carrier[atom] = {i: ch.int(1, max_dim) for i in spec.carriers(atom)}
        else:
            common[atom] = ch.int(1, max_dim)
    dims = [
        [per_carrier[a][i] if a in per_carrier else common[a] for a in sub] for i, sub in enumerate(spec.inputs)
    ]
    modes = {a: (ConvMode.CIRCULAR if counts[a] >= 3 else ch.pick(MODES)) for a in sorted(conv)}
    return spec, dims, modes


def random_pairwise(ch: Chooser, max_dim=5, budget=10_000, modes=None):
    """A random two-operand problem whose oracle work stays within ``budget``.

    Returns ``(a_subs, b_subs, out_subs, a_shape, b_shape, modes_by_atom)``.
    Every atom class can occur; ``modes`` restricts the convolution modes drawn.
    """
    kinds = ["batch", "contraction", "free_a", "free_b", "self_a", "self_b", "conv"]
    modes = modes or MODES
    while True:
        n_atoms = ch.int(1, 6)
        names = ch.perm(ATOM_NAMES)[:n_atoms]
        a, b, out = [], [], []
        adims, bdims = {}, {}
        conv_modes = {}
        for name in names:
            kind = ch.pick(kinds)
            d = ch.int(1, max_dim)
            if kind in ("batch", "contraction", "conv"):
                a.append(name)
                b.append(name)
                adims[name] = d
                bdims[name] = ch.int(1, max_dim) if kind == "conv" else d
                if kind != "contraction":
                    out.append(name)
                if kind == "conv":
                    conv_modes[name] = ch.pick(modes)
            elif kind.endswith("_a"):
                a.append(name)
                adims[name] = d
                if kind == "free_a":
                    out.append(name)
            else:
                b.append(name)
                bdims[name] = d
                if kind == "free_b":
                    out.append(name)
        if not a or not b:
            continue
        a, b, out = ch.perm(a), ch.perm(b), ch.perm(out)
        work = 1
        for x in set(a) | set(b):
            if x in conv_modes:
                feat, filt = max(adims[x], bdims[x]), min(adims[x], bdims[x])
                work *= conv_out_len(conv_modes[x], feat, filt) * filt
            else:
                work *= adims.get(x, bdims.get(x))
        if work <= budget:
            return a, b, out, [adims[x] for x in a], [bdims[x] for x in b], conv_modes


# ---------------------------------------------------------------------------
# closed forms for the reduced layer paths


def rcp_naive(B, R, S, T, H, W, Hp, Wp):
    """Left-to-right multiplications of an RCP layer with factor lists ``S``, ``T``."""
    M = len(S)
    U = [math.prod(S[k:]) * math.prod(T[: k + 1]) for k in range(M)]
    return B * R * Hp * Wp * (sum(U) + math.prod(T) * H * W)


def rcp_reduced(B, R, S, T, H, W, Hp, Wp):
    M = len(S)
    V = [math.prod(S[i] * T[i] for i in range(k + 1)) for k in range(M)]
    s, t = math.prod(S), math.prod(T)
    return R * sum(V[1:]) + R * s * t * H * W + B * s * t * H * W * Hp * Wp


def rtk_naive(B, R, S, T, H, W, Hp, Wp):
    """``R = (R0, R1, ..., RM)``."""
    M = len(S)
    U = [math.prod(S[k:]) * math.prod(T[: k + 1]) for k in range(M)]
    core = math.prod(R)
    t = math.prod(T)
    chain = sum(math.prod(R[1 : k + 2]) * U[k] for k in range(M))
    return B * Hp * Wp * (chain + core * t * H * W + core * t)


def rtk_reduced(B, R, S, T, H, W, Hp, Wp):
    M = len(S)
    V = [math.prod(S[i] * T[i] for i in range(k + 1)) for k in range(M)]
    s, t = math.prod(S), math.prod(T)
    chain = R[0] * sum(math.prod(R[k + 1 :]) * V[k] for k in range(M))
    return chain + R[0] * s * t * H * W + B * s * t * H * W * Hp * Wp


def seeded(seed):
    return Chooser(rng=random.Random(seed))
