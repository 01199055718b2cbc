"""
Dense float64 tensors with a reverse-mode gradient tape and seeded randomness.

Operations record themselves on the innermost active ``Tape`` whenever one of
their inputs requires gradients. ``backward`` walks that tape once in reverse
order and accumulates into the ``grad`` buffer of every leaf it reaches.
"""

import threading
from dataclasses import dataclass
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy.special import expit

from binflow.errors import ContractError, DimensionError, DomainError

Shape = Tuple[int, ...]
Operand = Union["Tensor", float, int, np.ndarray]


class Tensor:
    """Immutable float64 array value with an optional gradient buffer"""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_ufunc__ = None  # ndarray <op> Tensor must defer to Tensor

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=np.float64)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @classmethod
    def _wrap(cls, array: np.ndarray) -> "Tensor":
        tensor = cls.__new__(cls)
        tensor.data = np.asarray(array, dtype=np.float64)
        tensor.grad = None
        tensor.requires_grad = False
        tensor.name = None
        return tensor

    @property
    def shape(self) -> Shape:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a single-entry tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __add__(self, other: Operand) -> "Tensor":
        return add(self, other)

    def __radd__(self, other: Operand) -> "Tensor":
        return add(other, self)

    def __sub__(self, other: Operand) -> "Tensor":
        return sub(self, other)

    def __rsub__(self, other: Operand) -> "Tensor":
        return sub(other, self)

    def __mul__(self, other: Operand) -> "Tensor":
        return mul(self, other)

    def __rmul__(self, other: Operand) -> "Tensor":
        return mul(other, self)

    def __truediv__(self, other: float) -> "Tensor":
        if isinstance(other, Tensor):
            raise DimensionError("division is only defined by a python scalar")
        return mul(self, 1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return mul(self, -1.0)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        label = f", name='{self.name}'" if self.name else ""
        return f"Tensor(shape={self.shape}{flag}{label})"


def as_tensor(value: Operand) -> Tensor:
    """Wrap numbers and arrays as constant tensors; pass tensors through"""
    if isinstance(value, Tensor):
        return value
    return Tensor(value)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

VJP = Callable[[np.ndarray], Tuple[Optional[np.ndarray], ...]]


@dataclass
class Node:
    """One recorded primitive: output, parents and its vector-Jacobian product"""
    op: str
    output: Tensor
    parents: Tuple[Tensor, ...]
    vjp: VJP


class Tape:
    """Ordered record of primitive operations.

    Use as a context manager; operations executed inside the block are
    recorded when any input requires gradients. Tapes are confined to the
    thread that opened them.
    """

    def __init__(self):
        self.nodes: List[Node] = []

    def record(self, op: str, output: Tensor, parents: Tuple[Tensor, ...], vjp: VJP) -> None:
        self.nodes.append(Node(op, output, parents, vjp))

    def __len__(self) -> int:
        return len(self.nodes)

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tape_stack().pop()


_local = threading.local()


def _tape_stack() -> List[Tape]:
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape() -> Optional[Tape]:
    stack = _tape_stack()
    return stack[-1] if stack else None


def _emit(op: str, value: np.ndarray, parents: Tuple[Tensor, ...], vjp: VJP) -> Tensor:
    out = Tensor._wrap(value)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(op, out, parents, vjp)
    return out


def backward(root: Tensor, tape: Optional[Tape] = None) -> None:
    """Populate ``grad`` of every leaf recorded on ``tape`` from scalar ``root``.

    Leaves that appear on the tape but are not reachable from ``root`` get a
    zero gradient. Gradients accumulate (+=) into existing buffers; zeroing
    is the caller's job.
    """
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise ContractError("backward needs a tape")
    if root.size != 1:
        raise ContractError(f"backward root must be scalar, got shape {root.shape}")

    produced = {id(node.output) for node in tape.nodes}
    if id(root) not in produced:
        raise ContractError("backward root was not produced on this tape")

    adjoints: Dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_grads: Dict[int, np.ndarray] = {}
    leaves: Dict[int, Tensor] = {}

    for node in tape.nodes:
        for parent in node.parents:
            if parent.requires_grad and id(parent) not in produced:
                leaves[id(parent)] = parent

    for node in reversed(tape.nodes):
        upstream = adjoints.pop(id(node.output), None)
        if upstream is None:
            continue
        for parent, grad in zip(node.parents, node.vjp(upstream)):
            if grad is None or not parent.requires_grad:
                continue
            key = id(parent)
            target = adjoints if key in produced else leaf_grads
            target[key] = target[key] + grad if key in target else grad

    for key, leaf in leaves.items():
        if leaf.grad is None:
            leaf.grad = np.zeros_like(leaf.data)
        if key in leaf_grads:
            leaf.grad = leaf.grad + leaf_grads[key]


# ---------------------------------------------------------------------------
# Primitives
# ---------------------------------------------------------------------------

def _check_broadcast(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not broadcast-compatible")


def _reduce_to(grad: np.ndarray, like: Tensor) -> np.ndarray:
    if like.ndim == 0 and grad.ndim != 0:
        return np.asarray(grad.sum())
    return grad


def add(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("add", a, b)
    return _emit("add", a.data + b.data, (a, b),
                 lambda g: (_reduce_to(g, a), _reduce_to(g, b)))


def sub(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("sub", a, b)
    return _emit("sub", a.data - b.data, (a, b),
                 lambda g: (_reduce_to(g, a), _reduce_to(-g, b)))


def mul(a: Operand, b: Operand) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast("mul", a, b)
    return _emit("mul", a.data * b.data, (a, b),
                 lambda g: (_reduce_to(g * b.data, a), _reduce_to(g * a.data, b)))


def square(a: Tensor) -> Tensor:
    return _emit("square", a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def silu(a: Tensor) -> Tensor:
    s = expit(a.data)
    return _emit("silu", a.data * s, (a,),
                 lambda g: (g * (s + a.data * s * (1.0 - s)),))


def sigmoid(a: Tensor) -> Tensor:
    y = expit(a.data)
    return _emit("sigmoid", y, (a,), lambda g: (g * y * (1.0 - y),))


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _emit("tanh", y, (a,), lambda g: (g * (1.0 - y * y),))


def log(a: Tensor) -> Tensor:
    if np.any(a.data <= 0):
        raise DomainError("log of non-positive value")
    return _emit("log", np.log(a.data), (a,), lambda g: (g / a.data,))


def exp(a: Tensor) -> Tensor:
    y = np.exp(a.data)
    return _emit("exp", y, (a,), lambda g: (g * y,))


def softplus(a: Tensor) -> Tensor:
    """log(1 + e^a) without overflow"""
    return _emit("softplus", np.logaddexp(0.0, a.data), (a,),
                 lambda g: (g * expit(a.data),))


_UNARY = {
    "square": square,
    "silu": silu,
    "sigmoid": sigmoid,
    "tanh": tanh,
    "log": log,
    "exp": exp,
    "softplus": softplus,
}
_BINARY = {"add": add, "sub": sub, "mul": mul}


def elementwise(op: str, *inputs: Operand) -> Tensor:
    """Dispatch an elementwise primitive by name"""
    if op in _UNARY:
        if len(inputs) != 1:
            raise ContractError(f"{op} takes one input")
        return _UNARY[op](as_tensor(inputs[0]))
    if op in _BINARY:
        if len(inputs) != 2:
            raise ContractError(f"{op} takes two inputs")
        return _BINARY[op](*inputs)
    raise ContractError(f"unknown elementwise op '{op}'")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _emit("matmul", a.data @ b.data, (a, b),
                 lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """x @ weight + bias, the bias added to every row"""
    if x.ndim != 2 or weight.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot multiply {x.shape} by {weight.shape}")
    if bias.shape != (weight.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match {weight.shape}")
    return _emit("linear", x.data @ weight.data + bias.data, (x, weight, bias),
                 lambda g: (g @ weight.data.T, x.data.T @ g, g.sum(axis=0)))


def take_rows(table: Tensor, index: np.ndarray) -> Tensor:
    """Row lookup; gradients scatter-add back into the table"""
    index = np.asarray(index, dtype=np.int64)

    def vjp(g: np.ndarray):
        grad = np.zeros_like(table.data)
        np.add.at(grad, index, g)
        return (grad,)

    return _emit("take_rows", table.data[index], (table,), vjp)


def tsum(a: Tensor) -> Tensor:
    """Sum of all entries as a scalar tensor"""
    return _emit("sum", np.asarray(a.data.sum()), (a,),
                 lambda g: (np.full_like(a.data, float(g)),))


def tmean(a: Tensor) -> Tensor:
    return tsum(a) / a.size


# ---------------------------------------------------------------------------
# Finite differences
# ---------------------------------------------------------------------------

def numerical_grad(fn: Callable[[], Tensor], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient of scalar ``fn()`` w.r.t. ``tensor``"""
    grad = np.zeros_like(tensor.data)
    flat = tensor.data.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn().item()
        flat[i] = original - h
        minus = fn().item()
        flat[i] = original
        out[i] = (plus - minus) / (2.0 * h)
    return grad


def gradcheck(fn: Callable[[], Tensor], inputs: Sequence[Tensor],
              h: float = 1e-5, floor: float = 1e-3) -> float:
    """Max relative error between tape gradients and central differences.

    The denominator is ``max(|analytic|, |numeric|, floor)`` so entries whose
    true gradient is zero are compared absolutely.
    """
    for tensor in inputs:
        tensor.requires_grad = True
        tensor.zero_grad()
    with Tape() as tape:
        root = fn()
    backward(root, tape)

    worst = 0.0
    for tensor in inputs:
        analytic = tensor.grad.copy()
        numeric = numerical_grad(fn, tensor, h)
        scale = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / scale)))
    return worst


# ---------------------------------------------------------------------------
# Randomness
# ---------------------------------------------------------------------------

class Rng:
    """Seeded PCG64 stream; equal seeds (and derivation keys) give equal streams"""

    def __init__(self, seed: int, spawn_key: Tuple[int, ...] = ()):
        self.seed = int(seed)
        self.spawn_key = tuple(int(k) for k in spawn_key)
        sequence = np.random.SeedSequence(self.seed, spawn_key=self.spawn_key)
        self._gen = np.random.Generator(np.random.PCG64(sequence))

    def normal(self, shape) -> np.ndarray:
        return self._gen.standard_normal(shape)

    def uniform(self, shape=None):
        return self._gen.random(shape)

    def integers(self, low: int, high: int, shape=None) -> np.ndarray:
        return self._gen.integers(low, high, size=shape)

    def bipolar(self, shape) -> np.ndarray:
        """Uniform draws from {-1, +1}"""
        return np.where(self._gen.random(shape) < 0.5, -1.0, 1.0)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def derive(self, *keys: int) -> "Rng":
        """Independent child stream identified by ``keys``"""
        return Rng(self.seed, self.spawn_key + tuple(keys))


def randn(rng: Rng, shape) -> Tensor:
    return Tensor._wrap(rng.normal(shape))


def rand_uniform(rng: Rng, shape) -> Tensor:
    return Tensor._wrap(rng.uniform(shape))
