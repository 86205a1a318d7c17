"""A small numpy-backed tensor with reverse-mode autodiff.

Only what the acoustic model needs is here: elementwise math with scalar or
per-channel broadcasting, a few reductions, reshaping, and log-softmax. The
heavier layer ops (convolutions, batch norm) live in :mod:`quartznet.layers`
and plug into the same graph through :func:`make_node`.
"""
from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

from .errors import ContractError, ShapeError

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph construction inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

    # -- bookkeeping ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self._not_scalar()

    def _not_scalar(self):
        raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __len__(self) -> int:
        return len(self.data)

    # -- operators -----------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(neg(self), other)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None):
        return reduce("sum", self, axis)

    def mean(self, axis=None):
        return reduce("mean", self, axis)

    def max(self, axis=None):
        return reduce("max", self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        return transpose(self, axes)

    # -- autodiff ------------------------------------------------------
    def backward(self, grad: np.ndarray | None = None) -> None:
        """Accumulate d(self)/d(t) into ``t.grad`` for every reachable tensor t.

        ``self`` must be a scalar unless an explicit upstream ``grad`` is
        given. Calling twice without clearing grads accumulates.
        """
        if grad is None:
            if self.data.size != 1:
                raise ContractError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.data.dtype)
            if grad.shape != self.shape:
                raise ShapeError(f"upstream grad shape {grad.shape} != {self.shape}")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g.copy() if node.grad is None else node.grad + g
            if node._backward is None:
                continue
            parent_grads = node._backward(g)
            for parent, pg in zip(node._parents, parent_grads):
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
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def make_node(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap ``data`` as the output of an op over ``parents``.

    ``backward(g)`` must return one gradient (or None) per parent.
    """
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


# ---------------------------------------------------------------------------
# Elementwise
# ---------------------------------------------------------------------------

def _coerce_pair(a, b) -> tuple[Tensor, Tensor, str]:
    """Return (a, b, mode) where mode is 'same', 'scalar' or 'channel'."""
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    if b.shape == a.shape:
        return a, b, "same"
    if b.data.size == 1 and b.ndim <= 1:
        return a, b, "scalar"
    if a.ndim == 3 and b.ndim == 1 and b.shape[0] == a.shape[1]:
        return a, b, "channel"
    raise ShapeError(f"cannot combine shapes {a.shape} and {b.shape}")


def _expand(b: Tensor, mode: str) -> np.ndarray:
    if mode == "channel":
        return b.data[None, :, None]
    if mode == "scalar":
        return b.data.reshape(())
    return b.data


def _unexpand(g: np.ndarray, b: Tensor, mode: str) -> np.ndarray:
    if mode == "channel":
        return g.sum(axis=(0, 2))
    if mode == "scalar":
        return np.asarray(g.sum()).reshape(b.shape)
    return g


def add(a, b) -> Tensor:
    a, b, mode = _coerce_pair(a, b)
    return make_node(a.data + _expand(b, mode), (a, b), lambda g: (g, _unexpand(g, b, mode)))


def sub(a, b) -> Tensor:
    a, b, mode = _coerce_pair(a, b)
    return make_node(a.data - _expand(b, mode), (a, b), lambda g: (g, -_unexpand(g, b, mode)))


def mul(a, b) -> Tensor:
    a, b, mode = _coerce_pair(a, b)
    bd = _expand(b, mode)

    def backward(g):
        return g * bd, _unexpand(g * a.data, b, mode)

    return make_node(a.data * bd, (a, b), backward)


def neg(a) -> Tensor:
    a = as_tensor(a)
    return make_node(-a.data, (a,), lambda g: (-g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0  # subgradient at 0 is 0
    return make_node(np.where(mask, a.data, 0.0).astype(a.dtype), (a,), lambda g: (g * mask,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_node(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    return make_node(np.log(a.data), (a,), lambda g: (g / a.data,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "relu": lambda a, b=None: relu(a),
    "neg": lambda a, b=None: neg(a),
    "exp": lambda a, b=None: exp(a),
    "log": lambda a, b=None: log(a),
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise op by name (``add``, ``mul``, ``relu``, ...)."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ContractError(f"unknown elementwise op {kind!r}") from None
    return fn(a, b)


# ---------------------------------------------------------------------------
# Reductions and shape ops
# ---------------------------------------------------------------------------

def _norm_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    if len(set(out)) != len(out):
        raise ShapeError(f"repeated axis in {axes}")
    return tuple(sorted(out))


def reduce(kind: str, a, axes=None) -> Tensor:
    """Sum, mean or max over ``axes`` (all axes when None); reduced axes are dropped."""
    a = as_tensor(a)
    ax = _norm_axes(axes, a.ndim)
    kept_shape = tuple(1 if i in ax else n for i, n in enumerate(a.shape))

    if kind == "sum":
        out = a.data.sum(axis=ax)
        return make_node(np.asarray(out), (a,), lambda g: (np.broadcast_to(g.reshape(kept_shape), a.shape).copy(),))
    if kind == "mean":
        count = int(np.prod([a.shape[i] for i in ax])) if ax else 1
        out = a.data.mean(axis=ax) if ax else a.data.copy()
        return make_node(
            np.asarray(out),
            (a,),
            lambda g: (np.broadcast_to(g.reshape(kept_shape) / count, a.shape).copy(),),
        )
    if kind == "max":
        out = a.data.max(axis=ax)
        hit = a.data == out.reshape(kept_shape)
        # ties split the gradient evenly
        share = hit / hit.sum(axis=ax, keepdims=True)
        return make_node(np.asarray(out), (a,), lambda g: (share * g.reshape(kept_shape),))
    raise ContractError(f"unknown reduction {kind!r}")


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    return make_node(out, (a,), lambda g: (g.reshape(a.shape),))


def transpose(a, axes: Iterable[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    if sorted(axes) != list(range(a.ndim)):
        raise ShapeError(f"bad permutation {axes} for {a.ndim}-d tensor")
    inv = np.argsort(axes)
    return make_node(a.data.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def log_softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    m = a.data.max(axis=axis, keepdims=True)
    shifted = a.data - m
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)

    def backward(g):
        return (g - soft * g.sum(axis=axis, keepdims=True),)

    return make_node(out, (a,), backward)


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

def numeric_gradient(f: Callable[[Tensor], Tensor], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    with no_grad():
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = float(f(Tensor(x.copy())).data)
            flat[i] = orig - h
            fm = float(f(Tensor(x.copy())).data)
            flat[i] = orig
            gflat[i] = (fp - fm) / (2 * h)
    return grad


def check_gradient(f: Callable[[Tensor], Tensor], x, h: float = 1e-5) -> float:
    """Max over coordinates of |analytic - numeric| / max(1, |numeric|)."""
    x = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    xt = Tensor(x.copy(), requires_grad=True)
    out = f(xt)
    if out.data.size != 1:
        raise ContractError("check_gradient needs a scalar-valued function")
    out.backward()
    analytic = xt.grad if xt.grad is not None else np.zeros_like(x)
    numeric = numeric_gradient(f, x, h)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))))
