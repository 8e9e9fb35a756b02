"""Execution record for hand-written backward passes.

Every differentiable op in this package computes its forward result with
numpy and, when a :class:`Tape` is active, records a closure that maps the
output gradients to input gradients. :meth:`Tape.backward` replays those
closures in reverse execution order and sums gradients at fan-in points.
The graph is whatever the forward pass executed, so a fixed decoder
topology yields a fixed record.
"""
from __future__ import annotations

import contextlib
import contextvars
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "NonFiniteError",
    "Tape",
    "Var",
    "as_var",
    "current_tape",
    "get_dtype",
    "precision",
    "set_precision",
]

_PRECISIONS = {"f32": np.float32, "f64": np.float64}
_dtype: type = np.float32
_active_tape: contextvars.ContextVar["Tape | None"] = contextvars.ContextVar(
    "matchattn_tape", default=None
)


class NonFiniteError(FloatingPointError):
    """Raised when an op produces NaN or Inf."""


def set_precision(name: str) -> None:
    """Select working precision globally: ``"f32"`` or ``"f64"``."""
    global _dtype
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _dtype = _PRECISIONS[name]


def get_dtype() -> type:
    return _dtype


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch the working precision."""
    global _dtype
    saved = _dtype
    set_precision(name)
    try:
        yield
    finally:
        _dtype = saved


class Var:
    """A numpy array plus a gradient slot.

    ``requires_grad`` marks leaves (parameters, inputs under test) whose
    gradients should be kept after :meth:`Tape.backward`. Intermediate
    values always receive gradients while the tape is replayed.
    """

    __slots__ = ("data", "grad", "requires_grad", "tracked", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # True when a gradient can reach a requires_grad leaf through this value
        self.tracked = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Var{label}(shape={self.data.shape}, dtype={self.data.dtype})"

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic sugar, routed through ops so that it records
    def __add__(self, other):
        from . import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops

        return ops.mul(self, -1.0)


def as_var(x) -> Var:
    if isinstance(x, Var):
        return x
    return Var(np.asarray(x, dtype=_dtype))


BackwardFn = Callable[[Sequence[np.ndarray | None]], Sequence[np.ndarray | None]]


class _Node:
    __slots__ = ("name", "inputs", "outputs", "backward")

    def __init__(self, name: str, inputs: tuple[Var, ...], outputs: tuple[Var, ...], backward: BackwardFn):
        self.name = name
        self.inputs = inputs
        self.outputs = outputs
        self.backward = backward


class Tape:
    """Records ops executed inside ``with Tape():`` for reverse replay."""

    def __init__(self, check_finite: bool = True):
        self.nodes: list[_Node] = []
        self.check_finite = check_finite
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _active_tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tape.reset(self._token)
        self._token = None

    def record(self, name: str, inputs: Sequence[Var], outputs: Sequence[Var], backward: BackwardFn) -> None:
        self.nodes.append(_Node(name, tuple(inputs), tuple(outputs), backward))

    def backward(self, loss: Var, seed: np.ndarray | None = None) -> None:
        """Propagate d(loss) back through every recorded op.

        Gradients accumulate into ``Var.grad`` by summation, in reverse
        execution order, so repeated calls on fresh tapes are bitwise
        reproducible.
        """
        if seed is None:
            if loss.data.size != 1:
                raise ValueError("backward() needs a seed for non-scalar outputs")
            seed = np.ones_like(loss.data)
        loss.grad = np.asarray(seed, dtype=loss.data.dtype)
        for node in reversed(self.nodes):
            gouts = [o.grad for o in node.outputs]
            if all(g is None for g in gouts):
                continue
            gins = node.backward(gouts)
            for var, g in zip(node.inputs, gins):
                if g is None or not var.tracked:
                    continue
                if self.check_finite and not np.isfinite(g).all():
                    raise NonFiniteError(f"non-finite gradient from op {node.name!r}")
                if g.shape != var.data.shape:
                    raise ValueError(
                        f"op {node.name!r} returned gradient of shape {g.shape} for input {var.data.shape}"
                    )
                var.grad = g if var.grad is None else var.grad + g
            # free intermediate gradients that can no longer be used
            for o in node.outputs:
                if not o.requires_grad and o is not loss:
                    o.grad = None


def current_tape() -> Tape | None:
    return _active_tape.get()


@contextlib.contextmanager
def no_record() -> Iterator[None]:
    """Run ops without recording even if a tape is active."""
    token = _active_tape.set(None)
    try:
        yield
    finally:
        _active_tape.reset(token)
