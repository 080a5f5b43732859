"""Dense tensor type and the numeric kernels everything else dispatches onto.

Two dtypes exist: Float64 (plaintext path) and Ring64, residues modulo
Q = 2**62 stored in uint64. Q is a power of two, so reduction is a mask and
uint64 wraparound composes correctly with it (x mod 2**64 mod 2**62 ==
x mod 2**62).
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DtypeMismatch, ShapeMismatch

RING_MODULUS = 1 << 62
_RING_MASK = np.uint64(RING_MODULUS - 1)


class Dtype(enum.Enum):
    FLOAT64 = "float64"
    RING64 = "ring64"


@dataclass(frozen=True)
class Tensor:
    """Immutable dense row-major array, Float64 or Ring64."""

    data: np.ndarray
    dtype: Dtype

    def __post_init__(self):
        want = np.float64 if self.dtype is Dtype.FLOAT64 else np.uint64
        # asarray, not ascontiguousarray: the latter promotes 0-d to 1-d
        arr = np.asarray(self.data, dtype=want)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        if arr.base is not None or arr is self.data:
            arr = arr.copy()
        if self.dtype is Dtype.RING64:
            arr = np.asarray(arr & _RING_MASK)  # asarray: 0-d & scalar gives a numpy scalar
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def __eq__(self, other):
        return (
            isinstance(other, Tensor)
            and self.dtype is other.dtype
            and self.shape == other.shape
            and bool(np.array_equal(self.data, other.data))
        )

    def __repr__(self):
        return f"Tensor({self.dtype.value}, shape={self.shape})"


def tensor(values, dtype: Dtype = Dtype.FLOAT64) -> Tensor:
    return Tensor(np.asarray(values), dtype)


def ring_tensor(values) -> Tensor:
    return Tensor(np.asarray(values), Dtype.RING64)


def _check_same_dtype(a: Tensor, b: Tensor):
    if a.dtype is not b.dtype:
        raise DtypeMismatch(f"{a.dtype.value} vs {b.dtype.value}")


def _reduce(arr: np.ndarray, dtype: Dtype) -> Tensor:
    if dtype is Dtype.RING64:
        arr = arr & _RING_MASK
    return Tensor(arr, dtype)


def elementwise(op: str, a: Tensor, b: Tensor) -> Tensor:
    """Pointwise add/sub/mul; shapes must match exactly (no broadcasting)."""
    _check_same_dtype(a, b)
    if a.shape != b.shape:
        raise ShapeMismatch(f"{a.shape} vs {b.shape}")
    if op == "add":
        out = a.data + b.data
    elif op == "sub":
        out = a.data - b.data
    elif op == "mul":
        out = a.data * b.data
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    return _reduce(out, a.dtype)


def add(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("add", a, b)


def sub(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("sub", a, b)


def mul(a: Tensor, b: Tensor) -> Tensor:
    return elementwise("mul", a, b)


def scale(a: Tensor, c) -> Tensor:
    """Multiply every element by a public scalar."""
    if a.dtype is Dtype.RING64:
        return _reduce(a.data * np.uint64(int(c) % RING_MODULUS), a.dtype)
    return Tensor(a.data * float(c), a.dtype)


def offset(a: Tensor, c) -> Tensor:
    """Add a public scalar to every element."""
    if a.dtype is Dtype.RING64:
        return _reduce(a.data + np.uint64(int(c) % RING_MODULUS), a.dtype)
    return Tensor(a.data + float(c), a.dtype)


def neg(a: Tensor) -> Tensor:
    if a.dtype is Dtype.RING64:
        return _reduce(np.uint64(0) - a.data, a.dtype)
    return Tensor(-a.data, a.dtype)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Rank-2 matrix product; Ring64 accumulations wrap mod Q."""
    _check_same_dtype(a, b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeMismatch(f"matmul needs rank-2 operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeMismatch(f"inner dimensions differ: {a.shape} x {b.shape}")
    # uint64 matmul wraps mod 2**64 (C semantics), which reduces correctly.
    out = a.data @ b.data
    return _reduce(out, a.dtype)


def avg_pool2d(t: Tensor, k: int) -> Tensor:
    """Non-overlapping k x k window means over a [batch, ch, h, w] tensor."""
    if t.dtype is not Dtype.FLOAT64:
        raise DtypeMismatch("avg_pool2d operates on Float64")
    if t.ndim != 4:
        raise ShapeMismatch(f"avg_pool2d needs rank-4 input, got {t.shape}")
    n, c, h, w = t.shape
    if k < 1 or h % k or w % k:
        raise ShapeMismatch(f"window {k} does not divide spatial dims ({h}, {w})")
    view = t.data.reshape(n, c, h // k, k, w // k, k)
    return Tensor(view.mean(axis=(3, 5)), Dtype.FLOAT64)


# Degree-3 approximation of the logistic sigmoid. Exits [0, 1] for
# |x| > ~4.3; evaluated unclamped.
SIGMOID_COEFFS = (0.5, 0.25, -1.0 / 48.0)


def sigmoid_poly(t: Tensor) -> Tensor:
    """sigma(x) ~= 1/2 + x/4 - x**3/48, elementwise."""
    if t.dtype is not Dtype.FLOAT64:
        raise DtypeMismatch("sigmoid_poly operates on Float64")
    x = t.data
    return Tensor(0.5 + x / 4.0 - x**3 / 48.0, Dtype.FLOAT64)


def sigmoid_poly_deriv(t: Tensor) -> Tensor:
    """d/dx of sigmoid_poly: 1/4 - x**2/16."""
    if t.dtype is not Dtype.FLOAT64:
        raise DtypeMismatch("sigmoid_poly_deriv operates on Float64")
    x = t.data
    return Tensor(0.25 - x * x / 16.0, Dtype.FLOAT64)
