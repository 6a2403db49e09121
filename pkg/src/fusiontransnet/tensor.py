"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that remembers
its parents and a closure mapping the output gradient to parent gradients.
:func:`backward` orders the recorded operations topologically (the tape) and
replays the closures in reverse.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, NumericError

ArrayLike = "Tensor | np.ndarray | float | int | Sequence"


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str = ""):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1)
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], tuple] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return hadamard(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self) -> Tensor:
        return transpose(self)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def record(data: np.ndarray, parents: Iterable[Tensor], backward_fn) -> Tensor:
    """Wrap ``data`` as the output of an operation on ``parents``.

    ``backward_fn`` maps the output gradient to one gradient per parent.
    """
    parents = tuple(parents)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = ""
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = parents
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} are not compatible") from None


# ---------------------------------------------------------------- arithmetic

def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return record(a.data + b.data, (a, b), back)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def back(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return record(a.data - b.data, (a, b), back)


def hadamard(a, b) -> Tensor:
    """Elementwise product with numpy broadcasting."""
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "hadamard")

    def back(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return record(a.data * b.data, (a, b), back)


def scale(x: Tensor, factor: float) -> Tensor:
    x = as_tensor(x)
    return record(x.data * factor, (x,), lambda g: (g * factor,))


def square(x: Tensor) -> Tensor:
    x = as_tensor(x)
    return record(x.data * x.data, (x,), lambda g: (2.0 * x.data * g,))


def matmul(a, b) -> Tensor:
    """Matrix product; leading axes broadcast like ``np.matmul``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError:
        raise DimensionError(f"matmul: cannot multiply shapes {a.shape} and {b.shape}") from None

    def back(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return record(out, (a, b), back)


def _parse_einsum(spec: str) -> tuple[list[str], str]:
    spec = spec.replace(" ", "")
    if "->" not in spec:
        raise ContractError(f"einsum needs an explicit output: {spec!r}")
    lhs, out = spec.split("->")
    ins = lhs.split(",")
    for term in ins + [out]:
        if len(set(term)) != len(term):
            raise ContractError(f"einsum: repeated index inside one operand is unsupported ({spec!r})")
    return ins, out


# below this many elements the contraction-path search costs more than it saves
_PLAN_THRESHOLD = 4096


def _worth_planning(arrays: Sequence[np.ndarray]) -> bool:
    return len(arrays) > 1 and max(a.size for a in arrays) >= _PLAN_THRESHOLD


def einsum(spec: str, *operands) -> Tensor:
    """Contraction of one or two operands given in explicit ``ab,bc->ac`` form."""
    ops = [as_tensor(o) for o in operands]
    ins, out_sub = _parse_einsum(spec)
    if len(ins) != len(ops) or len(ops) not in (1, 2):
        raise ContractError(f"einsum: {spec!r} does not match {len(ops)} operand(s)")
    sizes: dict[str, int] = {}
    for sub_, t in zip(ins, ops):
        if len(sub_) != t.ndim:
            raise DimensionError(f"einsum: operand of shape {t.shape} does not match {sub_!r}")
        for ch, n in zip(sub_, t.shape):
            if sizes.setdefault(ch, n) != n:
                raise DimensionError(f"einsum: index {ch!r} has extents {sizes[ch]} and {n}")
    data = np.einsum(spec, *(t.data for t in ops), optimize=_worth_planning([t.data for t in ops]))

    def grad_for(k: int, g: np.ndarray) -> np.ndarray:
        target = ins[k]
        others = [(ins[i], ops[i].data) for i in range(len(ops)) if i != k]
        avail = set(out_sub).union(*(set(s) for s, _ in others))
        kept = "".join(ch for ch in target if ch in avail)
        terms = ",".join([out_sub] + [s for s, _ in others])
        arrays = [g] + [d for _, d in others]
        r = np.einsum(f"{terms}->{kept}", *arrays, optimize=_worth_planning(arrays))
        if kept != target:
            full_shape = [sizes[ch] if ch in kept else 1 for ch in target]
            r = np.broadcast_to(r.reshape(full_shape), tuple(sizes[ch] for ch in target))
        return r

    def back(g):
        return tuple(grad_for(k, g) for k in range(len(ops)))

    return record(np.asarray(data, dtype=np.float64), ops, back)


# ---------------------------------------------------------------- nonlinearities

def relu(x) -> Tensor:
    x = as_tensor(x)
    mask = x.data > 0
    return record(np.where(mask, x.data, 0.0), (x,), lambda g: (g * mask,))


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    x = as_tensor(x)
    factor = np.where(x.data > 0, 1.0, slope)
    return record(x.data * factor, (x,), lambda g: (g * factor,))


def sigmoid(x) -> Tensor:
    x = as_tensor(x)
    # split by sign so exp never overflows
    z = np.exp(-np.abs(x.data))
    out = np.where(x.data >= 0, 1.0 / (1.0 + z), z / (1.0 + z))
    return record(out, (x,), lambda g: (g * out * (1.0 - out),))


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    x = as_tensor(x)
    sign = np.sign(x.data)
    return record(np.abs(x.data), (x,), lambda g: (g * sign,))


def softmax(x, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Stabilised softmax along ``axis``.

    ``mask`` (boolean, broadcastable to ``x``) removes entries from the
    normalisation; masked entries are exactly 0 and a slice whose entries are
    all masked comes out as all zeros.
    """
    x = as_tensor(x)
    if np.isnan(x.data).any():
        raise NumericError("softmax: input contains NaN")
    if mask is None:
        shifted = x.data - x.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        out = e / e.sum(axis=axis, keepdims=True)
    else:
        mask = np.broadcast_to(np.asarray(mask, dtype=bool), x.shape)
        filled = np.where(mask, x.data, -np.inf)
        top = filled.max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(mask, np.exp(np.where(mask, x.data - top, 0.0)), 0.0)
        total = e.sum(axis=axis, keepdims=True)
        out = e / np.where(total > 0, total, 1.0)

    def back(g):
        inner = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - inner),)

    return record(out, (x,), back)


def softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows expects a matrix, got shape {x.shape}")
    return softmax(x, axis=1)


# ---------------------------------------------------------------- structure

def transpose(x, axes: Sequence[int] | None = None) -> Tensor:
    """Reverse the last two axes, or permute by ``axes`` when given."""
    x = as_tensor(x)
    if axes is None:
        if x.ndim < 2:
            raise DimensionError(f"transpose needs at least 2 axes, got shape {x.shape}")
        axes = list(range(x.ndim - 2)) + [x.ndim - 1, x.ndim - 2]
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    return record(np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inverse),))


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise DimensionError(f"reshape: cannot view {x.shape} as {tuple(shape)}") from None
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    ndim = ts[0].ndim
    ax = axis % ndim
    for t in ts[1:]:
        if t.ndim != ndim or any(
            t.shape[i] != ts[0].shape[i] for i in range(ndim) if i != ax
        ):
            raise DimensionError(
                f"concat along axis {axis}: shapes {[t.shape for t in ts]} disagree off-axis"
            )
    bounds = np.cumsum([0] + [t.shape[ax] for t in ts])

    def back(g):
        return tuple(
            np.take(g, np.arange(bounds[i], bounds[i + 1]), axis=ax) for i in range(len(ts))
        )

    return record(np.concatenate([t.data for t in ts], axis=ax), ts, back)


def stack(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    shapes = {t.shape for t in ts}
    if len(shapes) != 1:
        raise DimensionError(f"stack: shapes differ {sorted(shapes)}")
    out = np.stack([t.data for t in ts], axis=axis)
    ax = axis % out.ndim

    def back(g):
        return tuple(np.take(g, i, axis=ax) for i in range(len(ts)))

    return record(out, ts, back)


def slice(x, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    """Contiguous ``[start, stop)`` range along ``axis``."""
    x = as_tensor(x)
    ax = axis % x.ndim
    if not 0 <= start <= stop <= x.shape[ax]:
        raise DimensionError(f"slice [{start}, {stop}) out of range for axis {axis} of {x.shape}")
    index = [np.s_[:]] * x.ndim
    index[ax] = np.s_[start:stop]
    index = tuple(index)

    def back(g):
        full = np.zeros_like(x.data)
        full[index] = g
        return (full,)

    return record(x.data[index], (x,), back)


def sum(x, axis: int | tuple[int, ...] | None = None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = x.data.sum(axis=axis, keepdims=keepdims)
    if axis is None:
        out = np.asarray(out).reshape(1)

    def back(g):
        if axis is None:
            return (np.broadcast_to(g.reshape(()), x.shape),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return record(np.asarray(out, dtype=np.float64), (x,), back)


def mean(x, axis: int | tuple[int, ...] | None = None) -> Tensor:
    x = as_tensor(x)
    count = x.data.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis), 1.0 / count)


def weighted_abs_diff(weights, own, cand) -> Tensor:
    """out[..., i, :] = sum_j weights[..., i, j] * |own[..., i, :] - cand[..., j, :]|.

    Same value as the composed abs/sub/einsum graph with fewer passes over the
    (I, J, h) difference tensor.
    """
    weights, own, cand = as_tensor(weights), as_tensor(own), as_tensor(cand)
    lead = own.shape[:-2]
    i, h = own.shape[-2:]
    j = cand.shape[-2]
    if cand.shape != lead + (j, h) or weights.shape != lead + (i, j):
        raise DimensionError(
            f"weighted_abs_diff: weights {weights.shape}, own {own.shape}, cand {cand.shape}"
        )
    diff = own.data[..., :, None, :] - cand.data[..., None, :, :]
    mag = np.abs(diff)
    out = np.matmul(weights.data[..., :, None, :], mag)[..., 0, :]

    def back(g):
        w = weights.data
        sign = np.sign(diff)
        g_w = np.matmul(mag, g[..., :, :, None])[..., 0]
        g_own = g * np.matmul(w[..., :, None, :], sign)[..., 0, :]
        sign *= g[..., :, None, :]
        # contract over i with j leading so matmul batches over j
        g_cand = -np.matmul(
            np.swapaxes(w, -1, -2)[..., :, None, :], np.swapaxes(sign, -3, -2)
        )[..., 0, :]
        return g_w, g_own, g_cand

    return record(out, (weights, own, cand), back)


# ---------------------------------------------------------------- reverse mode

def tape(root: Tensor) -> list[Tensor]:
    """Recorded operations reachable from ``root``, parents before children."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(scalar: Tensor) -> None:
    """Accumulate d(scalar)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if scalar.data.size != 1:
        raise ContractError(f"backward needs a scalar, got shape {scalar.shape}")
    if not scalar.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(scalar): np.ones_like(scalar.data)}
    for node in reversed(tape(scalar)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            g = np.array(g, dtype=np.float64).reshape(node.shape)
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad or pg is None:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg
