"""Dense float64 tensor with a reverse-mode tape."""

from __future__ import annotations

import contextlib
from dataclasses import dataclass, field
from typing import Callable, Iterator, Optional, Sequence, Tuple

import numpy as np

_GRAD_ENABLED = True
_DEBUG = False


class NonFiniteError(ValueError):
    """Raised when a tensor would hold NaN or Inf."""


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    """Disable tape recording inside the block."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled() -> bool:
    return _GRAD_ENABLED


def set_debug(flag: bool) -> None:
    """Check every op output for non-finite values when ``flag`` is set."""
    global _DEBUG
    _DEBUG = bool(flag)


def debug_enabled() -> bool:
    return _DEBUG


_next_id = 0


def _new_id() -> int:
    global _next_id
    _next_id += 1
    return _next_id


@dataclass
class OpRecord:
    """Tape entry linking an op output to its inputs.

    ``backward`` maps the output gradient to one gradient per input (``None``
    for inputs that do not need one). Saved forward context lives in the
    closure.
    """

    kind: str
    inputs: Tuple["Tensor", ...]
    output_id: int
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]] = field(repr=False)

    @property
    def input_ids(self) -> Tuple[int, ...]:
        return tuple(t.id for t in self.inputs)


class Tensor:
    """Row-major float64 array with an optional gradient.

    Leaves created with ``requires_grad=True`` accumulate ``grad`` across
    repeated :meth:`backward` calls; call :meth:`zero_grad` to reset.
    """

    __slots__ = ("data", "requires_grad", "grad", "record", "id", "name")
    __array_priority__ = 100

    def __init__(self, values, requires_grad: bool = False, name: str = "", _check: bool = True):
        data = np.array(values, dtype=np.float64, copy=True) if _check else values
        if _check and not np.all(np.isfinite(data)):
            raise NonFiniteError(f"non-finite values in tensor {name or ''}".rstrip())
        self.data: np.ndarray = data
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.record: Optional[OpRecord] = None
        self.id = _new_id()
        self.name = name

    # -- basic properties -------------------------------------------------
    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self.record is None

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_item(self.shape)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False, _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    def __len__(self) -> int:
        return self.data.shape[0]

    # -- operators (implemented in ops) ----------------------------------
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

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.neg(self)

    def __pow__(self, p):
        from . import ops
        return ops.power(self, p)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, idx):
        from . import ops
        return ops.getitem(self, idx)

    def sum(self, axis=None, keepdims=False):
        from . import ops
        return ops.sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from . import ops
        return ops.mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        from . import ops
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)

    def transpose(self, *axes):
        from . import ops
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return ops.transpose(self, axes or None)

    @property
    def T(self):
        return self.transpose()

    # -- reverse mode -----------------------------------------------------
    def backward(self) -> None:
        """Populate ``grad`` on every ``requires_grad`` leaf reachable from self.

        Only scalar outputs are accepted. Gradients on leaves accumulate.
        """
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        order = _topo_order(self)
        grads = {self.id: np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(node.id, None)
            if g is None:
                continue
            rec = node.record
            if rec is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            in_grads = rec.backward(g)
            for inp, ig in zip(rec.inputs, in_grads):
                if ig is None or not inp.requires_grad:
                    continue
                if ig.shape != inp.data.shape:
                    raise RuntimeError(
                        f"backward rule for {rec.kind} produced shape {ig.shape}, expected {inp.data.shape}"
                    )
                prev = grads.get(inp.id)
                grads[inp.id] = ig if prev is None else prev + ig


def _raise_item(shape):
    raise ValueError(f"item() needs a single-element tensor, got shape {shape}")


def _topo_order(root: Tensor) -> list:
    """Creation-consistent topological order of the subgraph under ``root``."""
    order: list = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if node.id in seen:
            continue
        seen.add(node.id)
        stack.append((node, True))
        if node.record is not None:
            for inp in node.record.inputs:
                if inp.requires_grad and inp.id not in seen:
                    stack.append((inp, False))
    return order


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def make_result(data: np.ndarray, inputs: Tuple[Tensor, ...], kind: str, backward) -> Tensor:
    """Wrap an op output and, if needed, record it on the tape."""
    if _DEBUG and not np.all(np.isfinite(data)):
        raise NonFiniteError(f"op '{kind}' produced non-finite values")
    needs = _GRAD_ENABLED and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, _check=False)
    if needs:
        out.record = OpRecord(kind=kind, inputs=inputs, output_id=out.id, backward=backward)
    return out
