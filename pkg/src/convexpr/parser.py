"""Parsing, validation and rendering of conv_einsum strings.

A conv_einsum string extends the familiar einsum notation with an optional
``|``-suffixed list of convolution atoms::

    "bshw,tshw->bthw|hw"
    "b(s1)(s2)hw,r(t1)(s1),r(t2)(s2),rhw->b(t1)(t2)hw|h,w"

Atoms are single ASCII letters or parenthesised alphanumeric names. Atoms are
represented as plain ``str`` values; equality is by name, so ``(t1)`` in two
subscript lists denotes the same atom, and ``(a)`` is the same atom as ``a``.
"""

from __future__ import annotations

import enum
from collections import Counter
from dataclasses import dataclass
from typing import Iterable

from .errors import ParseError

__all__ = [
    "Atom",
    "AtomClass",
    "ExpressionSpec",
    "classify",
    "format_atom",
    "format_subscripts",
    "parse",
    "render",
]

Atom = str


class AtomClass(enum.Enum):
    CONVOLUTION = "convolution"
    BATCH = "batch"
    CONTRACTION = "contraction"
    FREE = "free"
    SELF_CONTRACTION = "self_contraction"


@dataclass(frozen=True)
class ExpressionSpec:
    """Validated structure of a conv_einsum expression.

    Instances should normally be created with :func:`parse` or
    :meth:`from_parts`, both of which enforce the invariants: no atom repeats
    inside one subscript list, every output atom occurs in some input, and
    every convolution atom occurs in the output and in at least two inputs.
    """

    inputs: tuple[tuple[Atom, ...], ...]
    output: tuple[Atom, ...]
    conv_atoms: frozenset[Atom] = frozenset()

    @classmethod
    def from_parts(
        cls,
        inputs: Iterable[Iterable[Atom]],
        output: Iterable[Atom],
        conv_atoms: Iterable[Atom] = (),
    ) -> "ExpressionSpec":
        spec = cls(
            tuple(tuple(sub) for sub in inputs),
            tuple(output),
            frozenset(conv_atoms),
        )
        problem = spec._problem()
        if problem is not None:
            raise ParseError(problem, render(spec) if _renderable(spec) else "", 0)
        return spec

    def _problem(self) -> str | None:
        if not self.inputs:
            return "expression has no inputs"
        for i, sub in enumerate(self.inputs):
            if not sub:
                return f"input {i} has an empty subscript list"
            dup = _first_duplicate(sub)
            if dup is not None:
                return f"atom {format_atom(dup)!r} repeated in input {i}"
        dup = _first_duplicate(self.output)
        if dup is not None:
            return f"atom {format_atom(dup)!r} repeated in output"
        counts = self.occurrences()
        for atom in self.output:
            if counts[atom] == 0:
                return f"output atom {format_atom(atom)!r} does not appear in any input"
        for atom in sorted(self.conv_atoms):
            if atom not in self.output:
                return f"convolution atom {format_atom(atom)!r} is not in the output"
            if counts[atom] < 2:
                return f"convolution atom {format_atom(atom)!r} appears in fewer than two inputs"
        return None

    @property
    def num_inputs(self) -> int:
        return len(self.inputs)

    def occurrences(self) -> Counter:
        """Number of input subscript lists each atom appears in."""
        return Counter(a for sub in self.inputs for a in sub)

    def atoms(self) -> tuple[Atom, ...]:
        """All distinct atoms in order of first appearance (inputs, then output)."""
        seen: dict[Atom, None] = {}
        for sub in self.inputs:
            for a in sub:
                seen.setdefault(a, None)
        for a in self.output:
            seen.setdefault(a, None)
        return tuple(seen)

    def carriers(self, atom: Atom) -> tuple[int, ...]:
        """Indices of the inputs whose subscripts contain ``atom``."""
        return tuple(i for i, sub in enumerate(self.inputs) if atom in sub)

    def __str__(self) -> str:
        return render(self)


def _first_duplicate(seq: Iterable[Atom]) -> Atom | None:
    seen = set()
    for a in seq:
        if a in seen:
            return a
        seen.add(a)
    return None


def _renderable(spec: ExpressionSpec) -> bool:
    return all(isinstance(a, str) and a for sub in spec.inputs for a in sub)


# ---------------------------------------------------------------------------
# parsing


class _Scanner:
    """Cursor over the non-whitespace characters of a source string."""

    def __init__(self, source: str):
        self.source = source
        self.chars = [(c, i) for i, c in enumerate(source) if not c.isspace()]
        self.i = 0

    def peek(self, offset: int = 0) -> str:
        j = self.i + offset
        return self.chars[j][0] if j < len(self.chars) else ""

    def pos(self) -> int:
        if self.i < len(self.chars):
            return self.chars[self.i][1]
        return len(self.source)

    def take(self) -> str:
        c = self.peek()
        self.i += 1
        return c

    def error(self, message: str, position: int | None = None) -> ParseError:
        return ParseError(message, self.source, self.pos() if position is None else position)


def _is_letter(c: str) -> bool:
    return len(c) == 1 and c.isascii() and c.isalpha()


def _read_atom(sc: _Scanner) -> tuple[Atom, int]:
    start = sc.pos()
    c = sc.peek()
    if _is_letter(c):
        sc.take()
        return c, start
    if c == "(":
        sc.take()
        name = []
        while sc.peek() and sc.peek() != ")":
            ch = sc.peek()
            if not (ch.isascii() and ch.isalnum()):
                if ch == "(":
                    raise sc.error("nested '(' inside a parenthesised atom")
                raise sc.error(f"unexpected character {ch!r} inside a parenthesised atom")
            name.append(sc.take())
        if sc.peek() != ")":
            raise sc.error("unbalanced parenthesis: missing ')'", start)
        if not name:
            raise sc.error("empty parenthesised atom", start)
        sc.take()
        return "".join(name), start
    if c == ")":
        raise sc.error("unbalanced parenthesis: unexpected ')'")
    if c == ".":
        raise sc.error("ellipsis broadcasting is not supported")
    raise sc.error(f"unexpected character {c!r}" if c else "unexpected end of expression")


def _read_subs(sc: _Scanner, stop: str) -> list[tuple[Atom, int]]:
    atoms = []
    while sc.peek() and sc.peek() not in stop:
        atoms.append(_read_atom(sc))
    return atoms


def _check_unique(sc: _Scanner, atoms: list[tuple[Atom, int]], where: str) -> None:
    seen = set()
    for a, p in atoms:
        if a in seen:
            raise sc.error(f"atom {format_atom(a)!r} repeated in {where}", p)
        seen.add(a)


def parse(source: str) -> ExpressionSpec:
    """Parse a conv_einsum string into a validated :class:`ExpressionSpec`.

    Raises :class:`~convexpr.errors.ParseError` carrying the offending
    position for grammar violations and invariant violations alike.

    >>> spec = parse("xbc,xde->xbcde|x")
    >>> spec.inputs, spec.output, sorted(spec.conv_atoms)
    ((('x', 'b', 'c'), ('x', 'd', 'e')), ('x', 'b', 'c', 'd', 'e'), ['x'])
    """
    if not isinstance(source, str):
        raise TypeError("expression must be a string")
    for i, c in enumerate(source):
        if not c.isascii():
            raise ParseError(f"non-ASCII character {c!r}", source, i)
    sc = _Scanner(source)

    inputs: list[list[tuple[Atom, int]]] = []
    input_pos: list[int] = []
    while True:
        input_pos.append(sc.pos())
        inputs.append(_read_subs(sc, ",-|>"))
        c = sc.peek()
        if c == ",":
            sc.take()
            continue
        if c == "-":
            if sc.peek(1) != ">":
                raise sc.error("malformed arrow: expected '->'")
            sc.take()
            sc.take()
            break
        if c == ">":
            raise sc.error("malformed arrow: '>' without '-'")
        if c == "|":
            raise sc.error("'|' before '->'")
        raise sc.error("missing '->' (implicit output mode is not supported)")

    output = _read_subs(sc, ",-|>")
    conv: list[tuple[Atom, int]] = []
    c = sc.peek()
    if c == "|":
        sc.take()
        conv = _read_conv_list(sc)
    elif c == "-" or c == ">":
        raise sc.error("malformed arrow: more than one '->'")
    elif c == ",":
        raise sc.error("unexpected ',' in output subscripts")
    if sc.peek():
        ch = sc.peek()
        if ch == "|":
            raise sc.error("malformed pipe: more than one '|'")
        if ch in "->":
            raise sc.error("malformed arrow after '|'")
        raise sc.error(f"unexpected character {ch!r}")

    for i, sub in enumerate(inputs):
        if not sub:
            raise sc.error(f"empty input list (input {i})", input_pos[i])
        _check_unique(sc, sub, f"input {i}")
    _check_unique(sc, output, "output")
    _check_unique(sc, conv, "convolution list")

    counts = Counter(a for sub in inputs for a, _ in sub)
    out_names = {a for a, _ in output}
    for a, p in output:
        if counts[a] == 0:
            raise sc.error(f"output atom {format_atom(a)!r} does not appear in any input", p)
    for a, p in conv:
        if a not in out_names:
            raise sc.error(f"convolution atom {format_atom(a)!r} is not in the output", p)
        if counts[a] < 2:
            raise sc.error(f"convolution atom {format_atom(a)!r} appears in fewer than two inputs", p)

    return ExpressionSpec(
        tuple(tuple(a for a, _ in sub) for sub in inputs),
        tuple(a for a, _ in output),
        frozenset(a for a, _ in conv),
    )


def _read_conv_list(sc: _Scanner) -> list[tuple[Atom, int]]:
    # Either comma separated or juxtaposed, never mixed.
    atoms: list[tuple[Atom, int]] = []
    separator = None
    while sc.peek() and sc.peek() not in "|->":
        if atoms:
            sep = sc.peek() == ","
            if separator is None:
                separator = sep
            elif separator != sep:
                raise sc.error("mixed ',' and juxtaposed atoms in convolution list")
            if sep:
                sc.take()
        elif sc.peek() == ",":
            raise sc.error("convolution list starts with ','")
        atoms.append(_read_atom(sc))
    return atoms


# ---------------------------------------------------------------------------
# classification & rendering


def classify(spec: ExpressionSpec) -> dict[Atom, AtomClass]:
    """Map every atom of ``spec`` to its operation category.

    The class depends only on how many inputs carry the atom, whether it is in
    the output, and whether it is marked for convolution.
    """
    counts = spec.occurrences()
    out = set(spec.output)
    classes = {}
    for atom in spec.atoms():
        if atom in spec.conv_atoms:
            classes[atom] = AtomClass.CONVOLUTION
        elif counts[atom] >= 2:
            classes[atom] = AtomClass.BATCH if atom in out else AtomClass.CONTRACTION
        else:
            classes[atom] = AtomClass.FREE if atom in out else AtomClass.SELF_CONTRACTION
    return classes


def format_atom(atom: Atom) -> str:
    return atom if _is_letter(atom) else f"({atom})"


def format_subscripts(atoms: Iterable[Atom]) -> str:
    return "".join(format_atom(a) for a in atoms)


def render(spec: ExpressionSpec) -> str:
    """Canonical string form; ``parse(render(s)) == s`` for every valid spec."""
    text = ",".join(format_subscripts(sub) for sub in spec.inputs)
    text += "->" + format_subscripts(spec.output)
    if spec.conv_atoms:
        ordered = [a for a in spec.output if a in spec.conv_atoms]
        ordered += sorted(spec.conv_atoms - set(ordered))
        text += "|" + format_subscripts(ordered)
    return text
