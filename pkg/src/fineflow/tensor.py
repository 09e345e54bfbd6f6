"""Dense float64 tensors with reverse-mode automatic differentiation.

Operations executed inside a `with GradTape() as tape:` block record their
backward rules on the tape; `backward(loss, tape)` replays the tape in
reverse, visiting each node exactly once and accumulating gradients
additively across fan-out. Outside a tape, operations are plain numpy math.
"""

from __future__ import annotations

import numpy as np

from .errors import NumericError, ShapeError

DTYPE = np.float64


class Tensor:
    """n-dimensional float64 array with an optional same-shape gradient."""

    __slots__ = ("values", "grad", "requires_grad", "_softmax_src")

    def __init__(self, values, requires_grad: bool = False):
        self.values = np.asarray(values, dtype=DTYPE)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        # Set by the softmax op so a following cross-entropy can fuse with it.
        self._softmax_src: Tensor | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.values.shape

    @property
    def size(self) -> int:
        return self.values.size

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return elementwise("add", self, other)

    def __sub__(self, other):
        return elementwise("sub", self, other)

    def __mul__(self, other):
        return elementwise("mul", self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def tensor_new(shape, fill) -> Tensor:
    """Build a row-major tensor from a scalar or flat array fill."""
    shape = tuple(int(s) for s in shape)
    if any(s < 1 for s in shape):
        raise ShapeError(f"extents must be >= 1, got {shape}")
    n = int(np.prod(shape)) if shape else 1
    if np.isscalar(fill):
        values = np.full(shape, float(fill), dtype=DTYPE)
    else:
        flat = np.asarray(fill, dtype=DTYPE).reshape(-1)
        if flat.size != n:
            raise ShapeError(f"fill length {flat.size} != product(shape) {n}")
        values = flat.reshape(shape)
    return Tensor(values)


class _Node:
    __slots__ = ("out", "inputs", "backward")

    def __init__(self, out, inputs, backward):
        self.out = out
        self.inputs = inputs
        self.backward = backward


class GradTape:
    """Ordered record of differentiable operations; inputs precede outputs."""

    __slots__ = ("nodes",)

    def __init__(self):
        self.nodes: list[_Node] = []

    def __enter__(self) -> "GradTape":
        _TAPES.append(self)
        return self

    def __exit__(self, *exc):
        _TAPES.pop()
        return False


_TAPES: list[GradTape] = []


def _tape() -> GradTape | None:
    return _TAPES[-1] if _TAPES else None


def record(out: Tensor, inputs: tuple[Tensor, ...], backward) -> None:
    """Mark `out` differentiable and push its backward rule, if a tape is live.

    `backward(grad_out)` must return one gradient array (or None) per input.
    """
    tape = _tape()
    if tape is None or not any(t.requires_grad for t in inputs):
        return
    out.requires_grad = True
    tape.nodes.append(_Node(out, inputs, backward))


def backward(loss: Tensor, tape: GradTape) -> None:
    """Populate .grad for every requires_grad tensor the tape reaches from loss."""
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        g = node.out.grad
        if g is None:
            continue  # not reachable from the loss
        for t, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            t.grad = gi if t.grad is None else t.grad + gi


def _as_operand(x):
    """Return (array-or-scalar, tensor-or-None) for the right operand."""
    if isinstance(x, Tensor):
        if x.size == 1:
            return float(x.values.reshape(-1)[0]), x
        return x.values, x
    if np.isscalar(x):
        return float(x), None
    raise ShapeError(f"unsupported operand type {type(x).__name__}")


def elementwise(op: str, a: Tensor, b) -> Tensor:
    """add/sub/mul with equal shapes, or a scalar right operand."""
    bv, bt = _as_operand(b)
    b_scalar = np.isscalar(bv)
    if not b_scalar and a.shape != np.shape(bv):
        raise ShapeError(f"shape mismatch: {a.shape} vs {np.shape(bv)}")
    if op == "add":
        out = Tensor(a.values + bv)
        rules = (lambda g: g, lambda g: g)
    elif op == "sub":
        out = Tensor(a.values - bv)
        rules = (lambda g: g, lambda g: -g)
    elif op == "mul":
        out = Tensor(a.values * bv)
        rules = (lambda g: g * bv, lambda g: g * a.values)
    else:
        raise ValueError(f"unknown elementwise op {op!r}")
    da, db = rules
    if bt is None:
        record(out, (a,), lambda g: (da(g),))
    else:
        bshape = bt.shape

        def back(g, da=da, db=db):
            gb = db(g)
            if b_scalar:
                gb = np.sum(gb).reshape(bshape)  # scalar broadcast collapses
            return da(g), gb

        record(out, (a, bt), back)
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.values.ndim != 2 or b.values.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner extents differ: {a.shape} x {b.shape}")
    out = Tensor(a.values @ b.values)
    record(out, (a, b), lambda g: (g @ b.values.T, a.values.T @ g))
    return out


def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    out = Tensor(x.values.reshape(shape))
    record(out, (x,), lambda g: (g.reshape(x.shape),))
    return out


def _check_axes(x: Tensor, axes) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(x.values.ndim))
    axes = tuple(int(a) for a in axes)
    if len(set(axes)) != len(axes):
        raise ShapeError(f"duplicate axes {axes}")
    for a in axes:
        if not 0 <= a < x.values.ndim:
            raise ShapeError(f"axis {a} invalid for rank {x.values.ndim}")
    return axes


def _expand(g: np.ndarray, shape, axes) -> np.ndarray:
    full = list(shape)
    for a in axes:
        full[a] = 1
    return np.broadcast_to(g.reshape(full), shape)


def reduce(op: str, x: Tensor, axes=None) -> Tensor:
    """Reduce over `axes` (all axes when None) with mean, max, or sum.

    Max routes its gradient to the first maximal element of each reduced
    group, in row-major order of the source array.
    """
    axes = _check_axes(x, axes)
    if op == "sum":
        out = Tensor(np.sum(x.values, axis=axes))
        record(out, (x,), lambda g: (_expand(g, x.shape, axes).copy(),))
    elif op == "mean":
        count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
        out = Tensor(np.mean(x.values, axis=axes))
        record(out, (x,), lambda g: (_expand(g, x.shape, axes) / count,))
    elif op == "max":
        out = Tensor(np.max(x.values, axis=axes))
        mask = _first_max_mask(x.values, axes)
        record(out, (x,), lambda g: (mask * _expand(g, x.shape, axes),))
    else:
        raise ValueError(f"unknown reduce op {op!r}")
    return out


def _first_max_mask(values: np.ndarray, axes) -> np.ndarray:
    """1.0 at the first (row-major) maximum of each reduced group, else 0.0."""
    nd = values.ndim
    kept = [a for a in range(nd) if a not in axes]
    moved = np.moveaxis(values, axes, range(len(kept), nd))
    kept_shape = moved.shape[: len(kept)]
    flat = moved.reshape(kept_shape + (-1,))
    am = np.argmax(flat, axis=-1)  # argmax picks the first maximum
    mask = np.zeros_like(flat)
    np.put_along_axis(mask, am[..., None], 1.0, axis=-1)
    mask = mask.reshape(moved.shape)
    return np.moveaxis(mask, range(len(kept), nd), axes)


def grad_check(f, x: Tensor, eps: float = 1e-5) -> float:
    """Max relative error between analytic and central-difference gradients.

    Error metric per element: |analytic - numeric| / max(1, |analytic|).
    `f` must map a tensor to a scalar tensor and be differentiable at x.
    """
    if eps <= 0:
        raise NumericError("grad_check needs eps > 0")
    probe = Tensor(x.values.copy(), requires_grad=True)
    with GradTape() as tape:
        y = f(probe)
    if y.size != 1:
        raise ShapeError("grad_check needs a scalar-valued function")
    if not np.all(np.isfinite(y.values)):
        raise NumericError("non-finite value in forward pass")
    backward(y, tape)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(x.values)
    if not np.all(np.isfinite(analytic)):
        raise NumericError("non-finite analytic gradient")

    flat = x.values.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sign, slot in ((1.0, 0), (-1.0, 1)):
            bumped = flat.copy()
            bumped[i] += sign * eps
            val = f(Tensor(bumped.reshape(x.shape))).item()
            if not np.isfinite(val):
                raise NumericError("non-finite value during finite differencing")
            numeric[i] += (val if slot == 0 else -val)
        numeric[i] /= 2.0 * eps
    a = analytic.reshape(-1)
    rel = np.abs(a - numeric) / np.maximum(1.0, np.abs(a))
    return float(np.max(rel)) if rel.size else 0.0
