"""Dense float64 tensors, shape environments and tensor (de)serialisation.

:class:`DenseTensor` is an immutable row-major array backed by numpy.
Operations never alias their inputs; every result owns fresh storage.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import ShapeError
from .parser import Atom, ExpressionSpec, format_atom

__all__ = [
    "DenseTensor",
    "ShapeEnv",
    "fill_random",
    "permute",
    "reshape",
    "splitmix64",
]


class DenseTensor:
    """Row-major dense tensor of 64-bit floats with an explicit shape.

    A zero-order tensor has ``shape == ()`` and holds a single value.
    """

    __slots__ = ("_array",)

    def __init__(self, data, shape: Sequence[int] | None = None):
        arr = np.array(data, dtype=np.float64, order="C", copy=True)
        if shape is not None:
            shape = tuple(int(d) for d in shape)
            if arr.size != math.prod(shape):
                raise ShapeError(
                    f"data has {arr.size} elements but shape {list(shape)} needs {math.prod(shape)}"
                )
            arr = arr.reshape(shape)
        if any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dimensions must be positive, got {list(arr.shape)}")
        arr.flags.writeable = False
        self._array = arr

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "DenseTensor":
        # Takes ownership of an array the caller will not mutate again.
        obj = cls.__new__(cls)
        # np.ascontiguousarray would promote 0-d arrays to 1-d
        arr = np.asarray(arr, dtype=np.float64, order="C")
        arr.flags.writeable = False
        obj._array = arr
        return obj

    @property
    def shape(self) -> tuple[int, ...]:
        return self._array.shape

    @property
    def ndim(self) -> int:
        return self._array.ndim

    @property
    def size(self) -> int:
        return self._array.size

    @property
    def array(self) -> np.ndarray:
        """Read-only ndarray view of the tensor."""
        return self._array

    @property
    def data(self) -> np.ndarray:
        """Read-only flat (row-major) view of the entries."""
        return self._array.reshape(-1)

    def __repr__(self) -> str:
        return f"DenseTensor(shape={list(self.shape)})"

    def __eq__(self, other) -> bool:
        if not isinstance(other, DenseTensor):
            return NotImplemented
        return self.shape == other.shape and np.array_equal(self._array, other._array)

    __hash__ = None

    # -- serialisation -----------------------------------------------------

    def to_json(self) -> dict:
        return {"shape": list(self.shape), "data": self.data.tolist()}

    @classmethod
    def from_json(cls, obj: dict | str) -> "DenseTensor":
        if isinstance(obj, str):
            obj = json.loads(obj)
        try:
            shape = [int(d) for d in obj["shape"]]
            data = obj["data"]
        except (KeyError, TypeError) as exc:
            raise ShapeError(f"malformed tensor JSON: {exc}") from None
        return cls(data, shape)

    def to_bytes(self) -> bytes:
        """Little-endian ``u64 rank, u64 dims..., f64 payload``."""
        head = struct.pack(f"<Q{self.ndim}Q", self.ndim, *self.shape)
        return head + self.data.astype("<f8").tobytes()

    @classmethod
    def from_bytes(cls, buf: bytes) -> "DenseTensor":
        if len(buf) < 8:
            raise ShapeError("binary tensor truncated before rank")
        (rank,) = struct.unpack_from("<Q", buf, 0)
        off = 8 + 8 * rank
        if len(buf) < off:
            raise ShapeError("binary tensor truncated inside shape")
        shape = struct.unpack_from(f"<{rank}Q", buf, 8)
        n = math.prod(shape)
        if len(buf) != off + 8 * n:
            raise ShapeError(f"binary payload has {(len(buf) - off) / 8:g} values, expected {n}")
        data = np.frombuffer(buf, dtype="<f8", count=n, offset=off)
        return cls(data, shape)

    def save(self, path: str | Path) -> None:
        """Write JSON for ``*.json`` paths, the binary format otherwise."""
        path = Path(path)
        if path.suffix == ".json":
            path.write_text(json.dumps(self.to_json()))
        else:
            path.write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path: str | Path) -> "DenseTensor":
        path = Path(path)
        if path.suffix == ".json":
            return cls.from_json(path.read_text())
        return cls.from_bytes(path.read_bytes())


def permute(t: DenseTensor, order: Sequence[int]) -> DenseTensor:
    """Materialised axis permutation: result axis ``j`` is input axis ``order[j]``."""
    order = tuple(int(o) for o in order)
    if sorted(order) != list(range(t.ndim)):
        raise ShapeError(f"{list(order)} is not a permutation of 0..{t.ndim - 1}")
    return DenseTensor._wrap(np.transpose(t.array, order).copy())


def reshape(t: DenseTensor, new_shape: Sequence[int]) -> DenseTensor:
    new_shape = tuple(int(d) for d in new_shape)
    if math.prod(new_shape) != t.size:
        raise ShapeError(f"cannot reshape {list(t.shape)} ({t.size} elements) to {list(new_shape)}")
    return DenseTensor._wrap(t.array.reshape(new_shape).copy())


# ---------------------------------------------------------------------------
# deterministic random fixtures

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def splitmix64(seed: int, n: int) -> np.ndarray:
    """First ``n`` outputs of the SplitMix64 generator started at ``seed``.

    Output ``i`` mixes the state ``seed + (i + 1) * 0x9E3779B97F4A7C15``
    (mod 2**64) through the standard SplitMix64 finaliser, so the stream is
    computed in one vectorised pass.
    """
    base = np.uint64(seed % (1 << 64))
    steps = np.arange(1, n + 1, dtype=np.uint64)
    z = base + steps * _GOLDEN
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


def fill_random(shape: Sequence[int], seed: int) -> DenseTensor:
    """Tensor with i.i.d. entries uniform on [-1, 1) from SplitMix64(``seed``).

    The top 53 bits of each 64-bit output form a double in [0, 1), mapped
    affinely to [-1, 1). Same seed and shape give bit-identical data.
    """
    shape = tuple(int(d) for d in shape)
    if any(d < 1 for d in shape):
        raise ShapeError(f"tensor dimensions must be positive, got {list(shape)}")
    bits = splitmix64(seed, math.prod(shape))
    unit = (bits >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))
    return DenseTensor._wrap((2.0 * unit - 1.0).reshape(shape))


# ---------------------------------------------------------------------------
# shape environments


@dataclass(frozen=True)
class ShapeEnv:
    """Per-input dimensions aligned with an expression's subscript lists.

    Non-convolution atoms must carry one dimension everywhere they occur;
    convolution atoms may carry a different dimension on every input.
    Use :meth:`from_dims` to build a validated environment.
    """

    spec: ExpressionSpec
    dims: tuple[tuple[int, ...], ...]

    @classmethod
    def from_dims(cls, spec: ExpressionSpec, dims: Iterable[Iterable[int]]) -> "ShapeEnv":
        dims = tuple(tuple(_as_dim(d) for d in shape) for shape in dims)
        if len(dims) != spec.num_inputs:
            raise ShapeError(f"expression has {spec.num_inputs} inputs but {len(dims)} shapes were given")
        for i, (sub, shape) in enumerate(zip(spec.inputs, dims)):
            if len(sub) != len(shape):
                raise ShapeError(
                    f"input {i} has {len(sub)} subscripts but shape {list(shape)} has {len(shape)} axes"
                )
        env = cls(spec, dims)
        for atom in spec.atoms():
            if atom in spec.conv_atoms:
                continue
            found = env.atom_dims(atom)
            if len(set(found)) > 1:
                raise ShapeError(
                    f"atom {format_atom(atom)!r} has inconsistent dimensions {sorted(set(found))}"
                )
        return env

    @classmethod
    def from_tensors(cls, spec: ExpressionSpec, tensors: Sequence[DenseTensor]) -> "ShapeEnv":
        return cls.from_dims(spec, [t.shape for t in tensors])

    def dim_of(self, index: int, atom: Atom) -> int:
        return self.dims[index][self.spec.inputs[index].index(atom)]

    def atom_dims(self, atom: Atom) -> tuple[int, ...]:
        """Dimensions carried by ``atom``, one per carrying input, in input order."""
        return tuple(
            shape[sub.index(atom)]
            for sub, shape in zip(self.spec.inputs, self.dims)
            if atom in sub
        )

    def dim(self, atom: Atom) -> int:
        """The single dimension of a non-convolution atom."""
        found = set(self.atom_dims(atom))
        if len(found) != 1:
            raise ShapeError(f"atom {format_atom(atom)!r} has no single dimension: {sorted(found)}")
        return found.pop()


def _as_dim(d) -> int:
    if isinstance(d, bool) or not isinstance(d, (int, np.integer)):
        raise ShapeError(f"dimension {d!r} is not an integer")
    if d < 1:
        raise ShapeError(f"dimension {d} must be positive")
    return int(d)
