"""Dense float64 tensors with reverse-mode automatic differentiation.

Every differentiable operation returns a new :class:`Tensor` that records its
parents and a closure mapping the output gradient to parent gradients.
:meth:`Tensor.backward` walks that record in reverse topological order.

Broadcasting is deliberately narrow: a binary op accepts operands of equal
shape, or a right operand whose shape is a trailing suffix of the left one
(the bias-over-rows case).  Anything else is a :class:`ShapeError`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

DTYPE = np.float64

_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class NonFiniteError(FloatingPointError):
    """An operation produced NaN or Inf."""


class InvalidDistributionError(ValueError):
    """A target distribution row does not sum to one."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def is_grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, *, _check: bool = True):
        arr = np.asarray(data, dtype=DTYPE)
        if arr.ndim == 0:
            arr = arr.reshape(())
        if _check and not np.all(np.isfinite(arr)):
            raise NonFiniteError("tensor contains NaN or Inf")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None
        self.op = "leaf"

    # -- metadata -------------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy(), _check=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    # -- operators ------------------------------------------------------
    def __add__(self, other):
        return add(self, _wrap(other))

    def __radd__(self, other):
        return add(_wrap(other), self)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, scale(_wrap(other), -1.0))

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def sum(self) -> "Tensor":
        return sum_all(self)

    def mean(self) -> "Tensor":
        return mean_all(self)

    # -- autodiff -------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate ``d self / d leaf`` into ``leaf.grad`` for every leaf
        that requires a gradient."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(
                    f"backward() without a seed gradient needs a scalar, got shape {self.shape}"
                )
            grad = np.ones_like(self.data)
        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=DTYPE)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], backward, op: str) -> Tensor:
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
        out.op = op
    return out


def parameter(data) -> Tensor:
    """A leaf tensor that accumulates gradients."""
    return Tensor(np.array(data, dtype=DTYPE, copy=True), requires_grad=True)


def constant(data) -> Tensor:
    return Tensor(data, requires_grad=False)


# ---------------------------------------------------------------------------
# elementwise
# ---------------------------------------------------------------------------

def _check_suffix(a: Tensor, b: Tensor, name: str) -> int:
    """Return the number of leading axes of ``a`` that ``b`` broadcasts over."""
    if a.shape == b.shape:
        return 0
    nb = b.ndim
    if 0 < nb < a.ndim and a.shape[-nb:] == b.shape:
        return a.ndim - nb
    raise ShapeError(f"{name}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_leading(g: np.ndarray, lead: int) -> np.ndarray:
    return g.sum(axis=tuple(range(lead))) if lead else g


def add(a: Tensor, b: Tensor) -> Tensor:
    lead = _check_suffix(a, b, "add")

    def backward(g):
        return g, _reduce_leading(g, lead)

    return _make(a.data + b.data, (a, b), backward, "add")


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Hadamard product."""
    lead = _check_suffix(a, b, "hadamard")
    ad, bd = a.data, b.data

    def backward(g):
        return g * bd, _reduce_leading(g * ad, lead)

    return _make(ad * bd, (a, b), backward, "hadamard")


hadamard = mul


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def tanh(a: Tensor) -> Tensor:
    y = np.tanh(a.data)
    return _make(y, (a,), lambda g: (g * (1.0 - y * y),), "tanh")


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _make(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def elementwise(op: str, *args, **kwargs) -> Tensor:
    """Dispatch by name: ``add``, ``hadamard``, ``tanh``, ``relu``, ``scale``."""
    table = {"add": add, "hadamard": mul, "tanh": tanh, "relu": relu, "scale": scale}
    try:
        fn = table[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args, **kwargs)


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------

def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _make(np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, shape).copy(),), "sum")


def mean_all(a: Tensor) -> Tensor:
    shape, n = a.shape, a.size
    return _make(
        np.asarray(a.data.mean()), (a,), lambda g: (np.broadcast_to(g / n, shape).copy(),), "mean"
    )


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _make(out, (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a: Tensor, axes: Sequence[int] | None = None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    if not tensors:
        raise ShapeError("stack of zero tensors")
    shape = tensors[0].shape
    for t in tensors[1:]:
        if t.shape != shape:
            raise ShapeError(f"stack: shapes differ, {shape} vs {t.shape}")
    data = np.stack([t.data for t in tensors], axis=axis)
    n = len(tensors)

    def backward(g):
        return [np.take(g, i, axis=axis) for i in range(n)]

    return _make(data, tuple(tensors), backward, "stack")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product over the last two axes.

    ``a`` is ``(..., m, k)``; ``b`` is either ``(k, n)`` (shared across the
    leading axes of ``a``) or ``(..., k, n)`` with the same leading axes.
    """
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got shapes {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ for shapes {a.shape} and {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dimensions differ for shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data
    shared = b.ndim == 2

    def backward(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if shared:
            k, n = bd.shape
            gb = ad.reshape(-1, k).T @ g.reshape(-1, n)
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def mode_product(x: Tensor, m: Tensor, axis: int) -> Tensor:
    """Contract axis ``axis`` of ``x`` with the rows of matrix ``m``.

    ``out[..., a, ...] = sum_j x[..., j, ...] * m[j, a]`` where the contracted
    index sits at position ``axis`` in both input and output.
    """
    if m.ndim != 2:
        raise ShapeError(f"mode_product: expected a matrix, got shape {m.shape}")
    axis = axis % x.ndim
    if x.shape[axis] != m.shape[0]:
        raise ShapeError(
            f"mode_product: axis {axis} of shape {x.shape} does not match matrix shape {m.shape}"
        )
    xd, md = x.data, m.data
    xm = np.moveaxis(xd, axis, -1)
    out = np.moveaxis(xm @ md, -1, axis)

    def backward(g):
        gm = np.moveaxis(g, axis, -1)
        gx = np.moveaxis(gm @ md.T, -1, axis)
        k = md.shape[0]
        gmat = xm.reshape(-1, k).T @ gm.reshape(-1, md.shape[1])
        return gx, gmat

    return _make(out, (x, m), backward, "mode_product")


# ---------------------------------------------------------------------------
# neural-network primitives
# ---------------------------------------------------------------------------

def embedding(table: Tensor, ids) -> Tensor:
    """Gather rows of ``table`` (``V x d``) at integer ``ids`` of any shape."""
    ids = np.asarray(ids)
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    shape = table.shape

    def backward(g):
        gt = np.zeros(shape, dtype=DTYPE)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, shape[1]))
        return (gt,)

    return _make(table.data[ids], (table,), backward, "embedding")


def _softmax_np(x: np.ndarray, mask: np.ndarray | None = None) -> np.ndarray:
    if mask is not None:
        x = np.where(mask, x, -np.inf)
    z = x - x.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax(x: Tensor, mask: np.ndarray | None = None) -> Tensor:
    """Softmax over the last axis; ``mask`` (broadcastable bool, True = keep)
    gives masked entries exactly zero probability."""
    p = _softmax_np(x.data, mask)

    def backward(g):
        return (p * (g - (g * p).sum(axis=-1, keepdims=True)),)

    return _make(p, (x,), backward, "softmax")


def log_softmax_np(x: np.ndarray) -> np.ndarray:
    z = x - x.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError(f"layer_norm: gain/bias {gain.shape}/{bias.shape} vs features {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * inv
    gd = gain.data
    lead = x.ndim - 1

    def backward(g):
        gx_hat = g * gd
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        return gx, _reduce_leading(g * xhat, lead), _reduce_leading(g, lead)

    return _make(xhat * gd + bias.data, (x, gain, bias), backward, "layer_norm")


def softmax_cross_entropy(logits: Tensor, target_dist, pad_mask=None) -> Tensor:
    """Mean over unmasked rows of ``-sum(target * log_softmax(logits))``.

    ``logits`` and ``target_dist`` are ``n x V``; ``pad_mask`` is a length-n
    array where nonzero marks a row that counts.  Rows of ``target_dist``
    must sum to one.
    """
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy expects n x V logits, got {logits.shape}")
    t = np.asarray(target_dist.data if isinstance(target_dist, Tensor) else target_dist, dtype=DTYPE)
    if t.shape != logits.shape:
        raise ShapeError(f"target shape {t.shape} differs from logits shape {logits.shape}")
    n = logits.shape[0]
    keep = np.ones(n, dtype=bool) if pad_mask is None else np.asarray(pad_mask).astype(bool)
    if keep.shape != (n,):
        raise ShapeError(f"pad_mask shape {keep.shape} does not match {n} rows")
    if keep.any() and np.max(np.abs(t[keep].sum(axis=-1) - 1.0)) > 1e-6:
        raise InvalidDistributionError("target rows must sum to 1 (within 1e-6)")
    count = int(keep.sum())
    if count == 0:
        raise ValueError("softmax_cross_entropy: every row is masked")
    logp = log_softmax_np(logits.data)
    w = keep[:, None].astype(DTYPE)
    loss = -(w * t * logp).sum() / count

    def backward(g):
        p = np.exp(logp)
        # rows of t sum to one, so d/dlogits of -sum(t log p) is p - t
        grad = w * (p * t.sum(axis=-1, keepdims=True) - t) / count
        return (g * grad,)

    return _make(np.asarray(loss), (logits,), backward, "softmax_cross_entropy")


def one_hot(ids, vocab: int) -> np.ndarray:
    ids = np.asarray(ids).reshape(-1)
    out = np.zeros((ids.size, vocab), dtype=DTYPE)
    out[np.arange(ids.size), ids] = 1.0
    return out


def leaves(tensors: Iterable[Tensor]) -> list[Tensor]:
    return [t for t in tensors if t.requires_grad]
