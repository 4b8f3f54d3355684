"""Dense tensors with reverse-mode automatic differentiation.

Values are float32 N-d arrays recorded define-by-run on a dynamic tape.
Scalar reductions (sum, mean and the fused losses built on them) return
zero-dim float64 tensors so loss arithmetic never quantizes to float32;
everything with rank >= 1 is stored float32.

Backward walks the recorded graph once in reverse topological order and
sums gradients whenever a tensor feeds several consumers.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np

DTYPE = np.float32


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class TapeNode:
    """One recorded operation: op kind, input tensors, backward rule.

    ``grad_fn`` maps the gradient w.r.t. the node's output to a tuple of
    gradients w.r.t. each input (None for inputs that need none).
    """

    __slots__ = ("op", "inputs", "grad_fn")

    def __init__(self, op: str, inputs: tuple, grad_fn: Callable):
        self.op = op
        self.inputs = inputs
        self.grad_fn = grad_fn


_grad_enabled = True
_branch_sink: Optional[list] = None


class no_grad:
    """Disables tape recording inside the context (evaluation fast path)."""

    def __enter__(self):
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc):
        global _grad_enabled
        _grad_enabled = self._prev
        return False


class record_branches:
    """Collects the branch pattern of every nonsmooth op run in the context.

    ReLU records its sign mask, max-pooling its argmax indices, the scalar
    clamp which side it took. Two forward passes with identical patterns
    evaluated the same smooth piece of the function, which is what makes a
    finite-difference comparison against the analytic gradient valid.
    """

    def __enter__(self):
        global _branch_sink
        self._prev = _branch_sink
        _branch_sink = []
        self.patterns = _branch_sink
        return self

    def __exit__(self, *exc):
        global _branch_sink
        _branch_sink = self._prev
        return False

    def fingerprint(self) -> bytes:
        return b"".join(self.patterns)


def _note_branch(payload: bytes) -> None:
    if _branch_sink is not None:
        _branch_sink.append(payload)


def _coerce(data) -> np.ndarray:
    arr = np.asarray(data)
    if arr.ndim == 0:
        if arr.dtype != np.float64:
            arr = arr.astype(np.float64)
    elif arr.dtype not in (DTYPE, np.float64):
        arr = arr.astype(DTYPE)
    return arr


class Tensor:
    """Immutable-by-convention dense array with optional gradient tracking.

    Only the optimizer mutates ``data`` (in-place parameter updates between
    steps); everything else treats tensors as values.
    """

    __slots__ = ("data", "requires_grad", "grad", "node", "retains_grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _coerce(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.node: Optional[TapeNode] = None
        self.retains_grad = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def retain_grad(self) -> "Tensor":
        """Ask backward to keep this non-leaf tensor's gradient in .grad."""
        self.retains_grad = True
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def reshape(self, shape) -> "Tensor":
        shape = tuple(shape)
        if int(np.prod(shape)) != self.data.size:
            raise ShapeError(f"cannot reshape {self.data.shape} to {shape}")
        old = self.data.shape
        return from_op(self.data.reshape(shape), "reshape", (self,),
                       lambda g: (g.reshape(old),))

    # arithmetic sugar over the primitive set
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def relu(self):
        return relu(self)

    def sum(self):
        return tsum(self)

    def mean(self):
        return tmean(self)

    def backward(self):
        backward(self)


def from_op(data: np.ndarray, op: str, inputs: tuple, grad_fn: Callable) -> Tensor:
    """Wrap an op result, recording a tape node when gradients are live."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.node = None
    out.requires_grad = False
    out.retains_grad = False
    if _grad_enabled and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out.node = TapeNode(op, inputs, grad_fn)
    return out


def _as_operands(a, b, op: str):
    if not isinstance(a, Tensor):
        a = Tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(b)
    if a.shape != b.shape and a.ndim != 0 and b.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not match "
                         "(equal shapes or a scalar operand required)")
    return a, b


def _reduce_to(g: np.ndarray, shape) -> np.ndarray:
    # gradient for a scalar operand that was broadcast against an array
    if tuple(shape) == ():
        return np.asarray(g, dtype=np.float64).sum()
    return g


def add(a, b) -> Tensor:
    a, b = _as_operands(a, b, "add")
    return from_op(a.data + b.data, "add", (a, b),
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_operands(a, b, "sub")
    return from_op(a.data - b.data, "sub", (a, b),
                   lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_operands(a, b, "mul")

    def grad_fn(g):
        return (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape))

    return from_op(a.data * b.data, "mul", (a, b), grad_fn)


def scale(a: Tensor, s: float) -> Tensor:
    """Multiply by a python scalar (no tensor allocated for the constant)."""
    s = float(s)
    return from_op(a.data * np.asarray(s, dtype=a.data.dtype), "scale", (a,),
                   lambda g: (g * s,))


def neg(a: Tensor) -> Tensor:
    return from_op(-a.data, "neg", (a,), lambda g: (-g,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    if _branch_sink is not None:
        _note_branch(np.packbits(mask.reshape(-1)).tobytes())

    def grad_fn(g):
        return (g * mask,)

    return from_op(a.data * mask, "relu", (a,), grad_fn)


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch over the elementwise primitive set by op-kind name."""
    unary = {"relu": relu, "negate": neg}
    binary = {"add": add, "subtract": sub, "multiply": mul}
    if kind in unary:
        if b is not None:
            raise ValueError(f"{kind} takes a single operand")
        return unary[kind](a)
    if kind in binary:
        return binary[kind](a, b)
    if kind == "scalar-multiply":
        return scale(a, b)
    raise ValueError(f"unknown elementwise op kind: {kind!r}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul: expected 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} x {b.shape}")
    ad, bd = a.data, b.data

    def grad_fn(g):
        return (g @ bd.T, ad.T @ g)

    return from_op(ad @ bd, "matmul", (a, b), grad_fn)


def tsum(a: Tensor) -> Tensor:
    val = np.asarray(a.data.sum(dtype=np.float64))
    shape, dt = a.shape, a.data.dtype
    return from_op(val, "sum", (a,),
                   lambda g: (np.full(shape, g, dtype=dt),))


def tmean(a: Tensor) -> Tensor:
    n = a.data.size
    val = np.asarray(a.data.mean(dtype=np.float64))
    shape, dt = a.shape, a.data.dtype
    return from_op(val, "mean", (a,),
                   lambda g: (np.full(shape, g / n, dtype=dt),))


def maximum_scalar(a: Tensor, floor: float) -> Tensor:
    """max(a, floor) for scalar a, with subgradient 0 on the floor branch."""
    if a.size != 1:
        raise ShapeError(f"maximum_scalar expects a scalar, got shape {a.shape}")
    floor = float(floor)
    taken = bool(a.data > floor)
    _note_branch(b"\x01" if taken else b"\x00")

    def grad_fn(g):
        return (g if taken else np.zeros_like(a.data),)

    return from_op(np.asarray(max(float(a.data), floor)), "max_scalar", (a,), grad_fn)


def backward(loss: Tensor) -> None:
    """Populate ``grad`` of every requires_grad tensor reachable from loss.

    Gradients accumulate into existing buffers, so call ``zero_grad`` on the
    parameters first; a tensor used twice receives the sum of both paths.
    """
    if loss.data.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.shape}")

    # iterative reverse topological order over the recorded graph
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(loss, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in visited:
            continue
        visited.add(id(t))
        stack.append((t, True))
        if t.node is not None:
            for parent in t.node.inputs:
                if id(parent) not in visited and parent.requires_grad:
                    stack.append((parent, False))

    # gradient buffers are borrowed from the grad_fns and only copied once a
    # second consumer needs to accumulate into them
    grads: dict[int, list] = {id(loss): [np.ones_like(loss.data), True]}
    for t in reversed(order):
        entry = grads.pop(id(t), None)
        if entry is None:
            continue
        g = entry[0]
        if t.requires_grad and (t.node is None or t.retains_grad):
            if t.grad is None:
                t.grad = g.astype(t.data.dtype, copy=True)
            else:
                t.grad += g.astype(t.data.dtype, copy=False)
        if t.node is None:
            continue
        for parent, pg in zip(t.node.inputs, t.node.grad_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            cur = grads.get(key)
            if cur is None:
                grads[key] = [pg, False]
            elif cur[1]:
                cur[0] += pg
            else:
                cur[0] = cur[0].astype(parent.data.dtype, copy=True)
                cur[1] = True
                cur[0] += pg


def grad_check(f: Callable[[Tensor], Tensor], x: Tensor, h: float = 1e-3,
               skip_nonsmooth: bool = False, sample: Optional[Sequence[int]] = None,
               precise: bool = True) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``f`` must be a deterministic scalar-valued function of ``x``. The error
    per element is |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
    The analytic side runs exactly as production does; with ``precise`` the
    numeric oracle feeds float64 copies through the (dtype-polymorphic) ops
    so difference quotients are not drowned by float32 rounding.

    With ``skip_nonsmooth`` the branch pattern (ReLU signs, pool argmaxes,
    clamp sides) of the two perturbed evaluations is compared and elements
    whose pattern differs are excluded: finite differences are only a valid
    oracle on an interval where the function is smooth. ``sample`` restricts
    the check to the given flat indices.
    """
    xt = Tensor(np.array(x.data, copy=True), requires_grad=True)
    loss = f(xt)
    if loss.data.size != 1:
        raise ShapeError("grad_check requires a scalar-valued function")
    xt.zero_grad()
    backward(loss)
    analytic = xt.grad.astype(np.float64).reshape(-1)
    if not np.all(np.isfinite(analytic)) or not np.isfinite(float(loss.data)):
        raise NonFiniteError("non-finite value in analytic gradient or loss")

    eval_dtype = np.float64 if precise else x.data.dtype
    flat = x.data.astype(eval_dtype).reshape(-1)
    indices = range(flat.size) if sample is None else sample
    worst = 0.0
    with no_grad():
        for idx in indices:
            probe = np.array(flat, copy=True)
            probe[idx] = flat[idx] + h
            xp = probe.reshape(x.shape).astype(eval_dtype)
            probe[idx] = flat[idx] - h
            xm = probe.reshape(x.shape).astype(eval_dtype)
            with record_branches() as rp:
                fp = float(f(Tensor(xp)).data)
            with record_branches() as rm:
                fm = float(f(Tensor(xm)).data)
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NonFiniteError(f"non-finite function value at element {idx}")
            if skip_nonsmooth and rp.fingerprint() != rm.fingerprint():
                continue
            # use the step the storage dtype actually realized
            h_eff = float(xp.reshape(-1)[idx]) - float(xm.reshape(-1)[idx])
            if h_eff == 0.0:
                continue
            numeric = (fp - fm) / h_eff
            err = abs(analytic[idx] - numeric) / max(1e-8, abs(analytic[idx]) + abs(numeric))
            if err > worst:
                worst = err
    return worst
