"""Reverse-mode differentiation over a recorded tape.

Operations are :class:`Function` subclasses: an array-level ``forward`` that
stores whatever its backward needs in a ``saved`` dict, and a ``backward`` that
maps the upstream gradient to one gradient per input. While a :class:`Tape` is
active every operation touching a gradient-requiring input is appended to it,
so the tape is topologically ordered by construction. Saved contexts own the
exact arrays used in the forward pass (including noise draws), which keeps the
backward pass free of any re-sampling.
"""

import contextvars
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any, ClassVar

import numpy as np
import structlog

from .errors import ShapeError, UsageError
from .tensor import Tensor, check_finite

logger = structlog.get_logger()

_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "probact_active_tape", default=None
)


class Variable:
    """A tensor value that may participate in gradient computation."""

    __slots__ = ("value", "requires_grad", "node", "name")

    def __init__(
        self,
        value: Tensor | np.ndarray | float,
        requires_grad: bool = False,
        name: str = "",
    ) -> None:
        self.value = value if isinstance(value, Tensor) else Tensor(value)
        self.requires_grad = requires_grad
        self.node: TapeNode | None = None
        self.name = name

    @property
    def data(self) -> np.ndarray:
        return self.value.data

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def dtype(self) -> np.dtype:
        return self.value.dtype

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"{type(self).__name__}{label}(shape={list(self.shape)})"

    def __add__(self, other: "Variable") -> "Variable":
        return add(self, other)

    def __mul__(self, other: "Variable") -> "Variable":
        return mul(self, other)

    def sum(self) -> "Variable":
        return sum_all(self)


class Parameter(Variable):
    """Trainable leaf value with an additively accumulated gradient."""

    __slots__ = ("trainable", "grad")

    def __init__(
        self, value: Tensor | np.ndarray | float, name: str = "", trainable: bool = True
    ) -> None:
        super().__init__(value, requires_grad=trainable, name=name)
        self.trainable = trainable
        self.grad = np.zeros(self.shape, dtype=self.dtype)

    def accumulate(self, grad: np.ndarray) -> None:
        if grad.shape != self.shape:
            raise ShapeError(
                f"Gradient shape {list(grad.shape)} does not match parameter "
                f"'{self.name}' shape {list(self.shape)}"
            )
        self.grad += grad

    def zero_grad(self) -> None:
        self.grad = np.zeros(self.shape, dtype=self.dtype)

    def assign(self, values: np.ndarray | Tensor) -> None:
        """Replace the value, keeping shape and dtype."""
        array = np.asarray(values, dtype=self.dtype)
        if array.shape != self.shape:
            raise ShapeError(
                f"Cannot assign shape {list(array.shape)} to parameter "
                f"'{self.name}' of shape {list(self.shape)}"
            )
        self.value = Tensor(array, dtype=self.dtype)


@dataclass(eq=False)
class TapeNode:
    """One recorded operation."""

    op: str
    function: type["Function"]
    inputs: tuple[Variable, ...]
    saved: dict[str, Any]
    output_shape: tuple[int, ...]


class Function:
    """A differentiable operation."""

    name: ClassVar[str] = "function"

    @staticmethod
    def forward(saved: dict[str, Any], *arrays: np.ndarray, **options: Any) -> np.ndarray:
        raise NotImplementedError

    @staticmethod
    def backward(saved: dict[str, Any], grad: np.ndarray) -> tuple[np.ndarray | None, ...]:
        raise NotImplementedError

    @classmethod
    def apply_with_context(
        cls, *inputs: Variable, **options: Any
    ) -> tuple[Variable, dict[str, Any]]:
        """Run the forward pass, record it if a tape is active, return output and context."""
        saved: dict[str, Any] = {}
        out = cls.forward(saved, *(v.data for v in inputs), **options)
        check_finite(out, cls.name)
        result = Variable(Tensor.wrap(out))
        tape = _active_tape.get()
        if tape is not None and any(v.requires_grad for v in inputs):
            result.requires_grad = True
            result.node = tape.record(cls, inputs, saved, out.shape)
        return result, saved

    @classmethod
    def apply(cls, *inputs: Variable, **options: Any) -> Variable:
        return cls.apply_with_context(*inputs, **options)[0]


class Tape:
    """Recorder of operations for one forward pass.

    A tape is single-use: a second ``backward`` raises :class:`UsageError`
    unless the tape was created with ``retain=True``.
    """

    def __init__(self, retain: bool = False) -> None:
        self.nodes: list[TapeNode] = []
        self.retain = retain
        self._consumed = False
        self._token: contextvars.Token | None = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc: object) -> None:
        if self._token is not None:
            _active_tape.reset(self._token)
            self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def record(
        self,
        function: type[Function],
        inputs: tuple[Variable, ...],
        saved: dict[str, Any],
        output_shape: tuple[int, ...],
    ) -> TapeNode:
        node = TapeNode(function.name, function, inputs, saved, output_shape)
        self.nodes.append(node)
        return node

    def backward(
        self, output: Variable, seed: Tensor | np.ndarray | float | None = None
    ) -> dict[Variable, np.ndarray]:
        """Propagate ``seed`` from ``output`` back to every leaf.

        Parameter gradients are accumulated in place; the returned mapping also
        holds gradients of non-parameter leaves that require them.

        Raises:
            UsageError: If the tape was already consumed or ``output`` was not
                recorded on it.
            ShapeError: If the seed shape differs from the output shape.
        """
        if self._consumed and not self.retain:
            raise UsageError("Tape already consumed; create it with retain=True to reuse")
        if output.node is None or not any(n is output.node for n in self.nodes):
            raise UsageError("Output was not recorded on this tape")

        if seed is None:
            seed_array = np.ones(output.shape, dtype=output.dtype)
        else:
            seed_array = np.asarray(seed, dtype=output.dtype)
        if seed_array.shape != output.shape:
            raise ShapeError(
                f"Seed gradient shape {list(seed_array.shape)} does not match "
                f"output shape {list(output.shape)}"
            )

        pending: dict[int, np.ndarray] = {id(output.node): seed_array}
        leaves: dict[Variable, np.ndarray] = {}

        for node in reversed(self.nodes):
            grad = pending.pop(id(node), None)
            if grad is None:
                continue
            input_grads = node.function.backward(node.saved, grad)
            for inp, inp_grad in zip(node.inputs, input_grads, strict=True):
                if inp_grad is None or not inp.requires_grad:
                    continue
                if inp.node is not None:
                    key = id(inp.node)
                    pending[key] = pending[key] + inp_grad if key in pending else inp_grad
                    continue
                if isinstance(inp, Parameter):
                    inp.accumulate(inp_grad)
                leaves[inp] = leaves[inp] + inp_grad if inp in leaves else inp_grad

        self._consumed = True
        logger.debug("Backward pass finished", nodes=len(self.nodes), leaves=len(leaves))
        return leaves


def trace(fn: Callable[..., Variable], *args: Any, retain: bool = False, **kwargs: Any) -> tuple[
    Variable, Tape
]:
    """Run ``fn`` under a fresh tape and return its output with the tape."""
    with Tape(retain=retain) as tape:
        output = fn(*args, **kwargs)
    return output, tape


def unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum a broadcast gradient back down to ``shape``."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


class Add(Function):
    name = "add"

    @staticmethod
    def forward(saved, a, b):
        saved["shapes"] = (a.shape, b.shape)
        return a + b

    @staticmethod
    def backward(saved, grad):
        a_shape, b_shape = saved["shapes"]
        return unbroadcast(grad, a_shape), unbroadcast(grad, b_shape)


class Mul(Function):
    name = "mul"

    @staticmethod
    def forward(saved, a, b):
        saved["a"], saved["b"] = a, b
        return a * b

    @staticmethod
    def backward(saved, grad):
        a, b = saved["a"], saved["b"]
        return unbroadcast(grad * b, a.shape), unbroadcast(grad * a, b.shape)


class SumAll(Function):
    name = "sum"

    @staticmethod
    def forward(saved, a):
        saved["shape"] = a.shape
        return np.asarray(a.sum(), dtype=a.dtype)

    @staticmethod
    def backward(saved, grad):
        return (np.broadcast_to(grad, saved["shape"]).copy(),)


def add(a: Variable, b: Variable) -> Variable:
    return Add.apply(a, b)


def mul(a: Variable, b: Variable) -> Variable:
    return Mul.apply(a, b)


def sum_all(a: Variable) -> Variable:
    return SumAll.apply(a)
