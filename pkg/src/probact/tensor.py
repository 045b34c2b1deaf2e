"""Dense n-dimensional arrays and the counter-based Gaussian sampler.

Every array in the framework is a :class:`Tensor`: an immutable wrapper around a
read-only numpy buffer. Random draws never come from a sequential generator;
they are a pure function of a :class:`NoiseKey` and the element index, so any
stochastic forward pass can be replayed bit for bit.
"""

import contextlib
import contextvars
import math
from collections.abc import Iterator, Sequence
from dataclasses import dataclass
from typing import Literal

import numpy as np
from scipy.special import expit, ndtri

from .errors import NumericError, ShapeError

ElementwiseKind = Literal["add", "sub", "mul", "div", "max", "exp", "neg", "sigmoid"]
ReduceKind = Literal["sum", "mean", "argmax"]

UNARY_KINDS = frozenset({"exp", "neg", "sigmoid"})
BINARY_KINDS = frozenset({"add", "sub", "mul", "div", "max"})

_UINT32_LIMIT = 2**32

_default_dtype: contextvars.ContextVar[np.dtype] = contextvars.ContextVar(
    "probact_default_dtype", default=np.dtype(np.float32)
)


def default_dtype() -> np.dtype:
    """Float width used when a tensor is created without an explicit dtype."""
    return _default_dtype.get()


@contextlib.contextmanager
def float64_profile() -> Iterator[None]:
    """Switch the default float width to 64 bits (gradient-check builds)."""
    token = _default_dtype.set(np.dtype(np.float64))
    try:
        yield
    finally:
        _default_dtype.reset(token)


def as_shape(shape: Sequence[int] | int) -> tuple[int, ...]:
    """Normalize and validate a list of extents."""
    if isinstance(shape, int | np.integer):
        shape = (int(shape),)
    extents = tuple(int(s) for s in shape)
    if any(s < 0 for s in extents):
        raise ShapeError(f"Shape extents must be non-negative, got {extents}")
    return extents


def check_finite(array: np.ndarray, what: str) -> None:
    """Raise NumericError naming the first non-finite element, if any."""
    finite = np.isfinite(array)
    if not finite.all():
        index = tuple(int(i) for i in np.argwhere(~finite)[0])
        raise NumericError(f"Non-finite value produced by {what}", index=index)


class Tensor:
    """Immutable n-dimensional array of IEEE floats."""

    __slots__ = ("_data",)

    def __init__(self, data: object, dtype: np.dtype | type | None = None) -> None:
        array = np.array(data, dtype=dtype or default_dtype())
        array.setflags(write=False)
        self._data = array

    @classmethod
    def wrap(cls, array: np.ndarray) -> "Tensor":
        """Adopt a freshly computed array without copying it."""
        tensor = cls.__new__(cls)
        array = np.asarray(array)
        array.setflags(write=False)
        tensor._data = array
        return tensor

    @property
    def data(self) -> np.ndarray:
        """Read-only view of the underlying buffer."""
        return self._data

    @property
    def shape(self) -> tuple[int, ...]:
        return self._data.shape

    @property
    def size(self) -> int:
        return self._data.size

    @property
    def ndim(self) -> int:
        return self._data.ndim

    @property
    def dtype(self) -> np.dtype:
        return self._data.dtype

    def numpy(self) -> np.ndarray:
        """Writable copy of the values."""
        return self._data.copy()

    def item(self) -> float:
        return self._data.item()

    def astype(self, dtype: np.dtype | type) -> "Tensor":
        return Tensor.wrap(self._data.astype(dtype))

    def __array__(self, dtype: np.dtype | None = None, copy: bool | None = None) -> np.ndarray:
        return self._data if dtype is None else self._data.astype(dtype)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        return f"Tensor(shape={list(self.shape)}, dtype={self.dtype}, data={self._data!r})"

    def __add__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("add", self, other)

    def __radd__(self, other: float) -> "Tensor":
        return elementwise("add", self, other)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("sub", self, other)

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("mul", self, other)

    def __rmul__(self, other: float) -> "Tensor":
        return elementwise("mul", self, other)

    def __truediv__(self, other: "Tensor | float") -> "Tensor":
        return elementwise("div", self, other)

    def __neg__(self) -> "Tensor":
        return elementwise("neg", self)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)


# ---------------------------------------------------------------------------
# Creation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Fill:
    """Fill every element with one constant."""

    value: float = 0.0


@dataclass(frozen=True)
class Values:
    """Explicit row-major values."""

    values: Sequence[float] | np.ndarray


@dataclass(frozen=True)
class Xavier:
    """Zero-mean normal draw with variance 2 / (fan_in + fan_out).

    Fans default to the usual convention for the shape; they can be forced,
    e.g. for per-element activation parameters where the shape has no
    input/output axes.
    """

    seed: int | Sequence[int]
    fan_in: int | None = None
    fan_out: int | None = None


def fans(shape: tuple[int, ...]) -> tuple[int, int]:
    """Fan-in and fan-out of a weight shape.

    Dense weights are (in, out); convolution kernels are (out, in, kh, kw).
    """
    if len(shape) == 0:
        return 1, 1
    if len(shape) == 1:
        return shape[0], shape[0]
    if len(shape) == 2:
        return shape[0], shape[1]
    receptive = math.prod(shape[2:])
    return shape[1] * receptive, shape[0] * receptive


def create(
    shape: Sequence[int] | int,
    init: Fill | Values | Xavier = Fill(),
    dtype: np.dtype | type | None = None,
) -> Tensor:
    """Create a tensor of the requested shape.

    Raises:
        ShapeError: If an extent is negative or explicit values do not match
            the element count.
    """
    extents = as_shape(shape)
    dtype = np.dtype(dtype or default_dtype())
    count = math.prod(extents)

    if isinstance(init, Fill):
        return Tensor.wrap(np.full(extents, init.value, dtype=dtype))

    if isinstance(init, Values):
        flat = np.array(init.values, dtype=dtype).reshape(-1)
        if flat.size != count:
            raise ShapeError(
                f"Got {flat.size} values for shape {list(extents)} ({count} elements)"
            )
        return Tensor.wrap(flat.reshape(extents))

    fan_in, fan_out = fans(extents)
    fan_in = init.fan_in or fan_in
    fan_out = init.fan_out or fan_out
    std = math.sqrt(2.0 / (fan_in + fan_out))
    rng = np.random.default_rng(init.seed)
    return Tensor.wrap(rng.normal(0.0, std, size=extents).astype(dtype))


# ---------------------------------------------------------------------------
# Arithmetic
# ---------------------------------------------------------------------------


def _operand(value: "Tensor | float | np.ndarray", dtype: np.dtype) -> np.ndarray:
    if isinstance(value, Tensor):
        return value.data
    return np.asarray(value, dtype=dtype)


def elementwise(
    kind: ElementwiseKind, a: Tensor, b: "Tensor | float | None" = None
) -> Tensor:
    """Apply an element-wise operation with trailing-dimension broadcasting.

    Raises:
        ShapeError: If binary operands cannot be broadcast together.
        NumericError: On division by zero or any other non-finite result.
    """
    x = a.data
    if kind in UNARY_KINDS:
        if b is not None:
            raise ValueError(f"'{kind}' takes a single operand")
        with np.errstate(all="ignore"):
            if kind == "exp":
                out = np.exp(x)
            elif kind == "neg":
                out = np.negative(x)
            else:
                out = expit(x)
    elif kind in BINARY_KINDS:
        if b is None:
            raise ValueError(f"'{kind}' needs two operands")
        y = _operand(b, x.dtype)
        try:
            np.broadcast_shapes(x.shape, y.shape)
        except ValueError as e:
            raise ShapeError(f"Cannot broadcast {list(x.shape)} with {list(y.shape)}") from e
        if kind == "div" and not np.all(y != 0):
            index = tuple(int(i) for i in np.argwhere(y == 0)[0]) if y.ndim else ()
            raise NumericError("Division by zero", index=index)
        with np.errstate(all="ignore"):
            if kind == "add":
                out = np.add(x, y)
            elif kind == "sub":
                out = np.subtract(x, y)
            elif kind == "mul":
                out = np.multiply(x, y)
            elif kind == "div":
                out = np.divide(x, y)
            else:
                out = np.maximum(x, y)
    else:
        raise ValueError(f"Unknown element-wise kind: {kind}")

    out = np.asarray(out)
    check_finite(out, kind)
    return Tensor.wrap(out)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Standard product of two rank-2 tensors."""
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul needs rank-2 operands, got ranks {a.ndim} and {b.ndim}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"Inner dimensions differ: {list(a.shape)} x {list(b.shape)}")
    return Tensor.wrap(np.matmul(a.data, b.data))


def reduce(kind: ReduceKind, t: Tensor, axis: int | None = None) -> Tensor:
    """Sum, mean or argmax over one axis (all elements when axis is None).

    argmax resolves ties to the smallest index.
    """
    if axis is not None and not -t.ndim <= axis < t.ndim:
        raise ShapeError(f"Axis {axis} out of range for rank {t.ndim}")
    if kind == "sum":
        return Tensor.wrap(np.asarray(np.sum(t.data, axis=axis)))
    if kind == "mean":
        return Tensor.wrap(np.asarray(np.mean(t.data, axis=axis)))
    if kind == "argmax":
        return Tensor.wrap(np.asarray(np.argmax(t.data, axis=axis)))
    raise ValueError(f"Unknown reduction: {kind}")


# ---------------------------------------------------------------------------
# Counter-based sampling
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NoiseKey:
    """Address of one block of random draws.

    (seed, layer_id, step, draw_id, element index) maps to exactly one variate.
    Every field must fit in 32 bits.
    """

    layer_id: int
    step: int
    draw_id: int = 0
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("layer_id", "step", "draw_id", "seed"):
            value = getattr(self, name)
            if not 0 <= value < _UINT32_LIMIT:
                raise ValueError(f"NoiseKey.{name} must be in [0, 2**32), got {value}")

    def philox_key(self) -> np.ndarray:
        """128-bit Philox key packing the four 32-bit fields."""
        return np.array(
            [(self.seed << 32) | self.layer_id, (self.step << 32) | self.draw_id],
            dtype=np.uint64,
        )

    def with_draw(self, draw_id: int) -> "NoiseKey":
        return NoiseKey(self.layer_id, self.step, draw_id, self.seed)


def _raw_stream(key: NoiseKey, count: int) -> np.ndarray:
    """The first `count` 64-bit outputs of the Philox stream for `key`.

    Output i depends only on the key and i (counter mode), never on how many
    values are requested or on which thread asks.
    """
    if count == 0:
        return np.empty(0, dtype=np.uint64)
    return np.random.Philox(key=key.philox_key()).random_raw(count)


def _open_unit(raw: np.ndarray) -> np.ndarray:
    # 53 high bits, centred in their bucket: strictly inside (0, 1)
    return ((raw >> np.uint64(11)).astype(np.float64) + 0.5) * 2.0**-53


def sample_uniform(
    shape: Sequence[int] | int, key: NoiseKey, dtype: np.dtype | type | None = None
) -> Tensor:
    """I.i.d. uniform values on the open interval (0, 1)."""
    extents = as_shape(shape)
    u = _open_unit(_raw_stream(key, math.prod(extents)))
    return Tensor.wrap(u.reshape(extents).astype(dtype or default_dtype()))


def sample_standard_normal(
    shape: Sequence[int] | int, key: NoiseKey, dtype: np.dtype | type | None = None
) -> Tensor:
    """I.i.d. standard normal values via the inverse CDF of the counter stream."""
    extents = as_shape(shape)
    z = ndtri(_open_unit(_raw_stream(key, math.prod(extents))))
    return Tensor.wrap(z.reshape(extents).astype(dtype or default_dtype()))
