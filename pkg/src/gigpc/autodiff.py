"""Small reverse-mode differentiation engine on top of numpy.

Every operation returns a new :class:`Tensor`. When at least one input
requires a gradient, the result remembers its parents together with a
closure mapping the output gradient to per-parent gradients. Calling
:func:`backward` on a scalar walks that graph once in reverse topological
order.

There is no implicit broadcasting: binary operations accept either two
tensors of identical shape or a tensor and a Python scalar.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor", "NonFiniteError", "tensor", "constant",
    "add", "sub", "mul", "div", "neg", "scalar_mul", "exp", "log", "sqrt",
    "square", "tanh", "relu", "leaky_relu", "clip",
    "linear", "matmul", "conv2d", "upsample_nearest2x",
    "sum", "mean", "max", "reshape", "transpose", "concat", "split",
    "backward", "Adam", "numerical_gradient",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or infinite values."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "parents", "backward_fn", "op")

    def __init__(self, data, requires_grad: bool = False, op: str = "leaf"):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"non-finite values in {op} output")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: BackwardFn | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.item())

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

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

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __getitem__(self, index):
        return _getitem(self, index)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data, requires_grad)


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def _result(data: np.ndarray, parents: Iterable[Tensor], fn: BackwardFn, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    data = np.asarray(data, dtype=np.float64)
    if not np.isfinite(data).all():
        raise NonFiniteError(f"non-finite values in {op} output")
    out.data = data
    out.grad = None
    out.op = op
    parents = tuple(parents)
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out.parents = parents
        out.backward_fn = fn
    else:
        out.parents = ()
        out.backward_fn = None
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a = tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data + s, (a,), lambda g: (g,), "add")
    _check_same(a, b, "add")
    return _result(a.data + b.data, (a, b), lambda g: (g, g), "add")


def sub(a, b) -> Tensor:
    a = tensor(a)
    if not isinstance(b, Tensor):
        s = float(b)
        return _result(a.data - s, (a,), lambda g: (g,), "sub")
    _check_same(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g), "sub")


def mul(a, b) -> Tensor:
    a = tensor(a)
    if not isinstance(b, Tensor):
        return scalar_mul(a, b)
    _check_same(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad), "mul")


def div(a, b) -> Tensor:
    a = tensor(a)
    if not isinstance(b, Tensor):
        return scalar_mul(a, 1.0 / float(b))
    _check_same(a, b, "div")
    ad, bd = a.data, b.data
    if np.any(bd == 0):
        raise ZeroDivisionError("div: zero in denominator")
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd), "div")


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,), "neg")


def scalar_mul(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _result(a.data * s, (a,), lambda g: (g * s,), "scalar_mul")


def exp(a: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise ValueError("log: non-positive input")
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def sqrt(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise ValueError("sqrt: non-positive input")
    out = np.sqrt(ad)
    return _result(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def square(a: Tensor) -> Tensor:
    ad = a.data
    return _result(ad * ad, (a,), lambda g: (2.0 * g * ad,), "square")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a: Tensor) -> Tensor:
    # derivative at exactly 0 is 0
    mask = a.data > 0
    return _result(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,), "relu")


def leaky_relu(a: Tensor, slope: float = 0.2) -> Tensor:
    mask = a.data > 0
    scale = np.where(mask, 1.0, slope)
    return _result(a.data * scale, (a,), lambda g: (g * scale,), "leaky_relu")


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    inside = (a.data >= lo) & (a.data <= hi)
    return _result(np.clip(a.data, lo, hi), (a,), lambda g: (g * inside,), "clip")


# ---------------------------------------------------------------- linear algebra

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data
    return _result(ad @ bd, (a, b), lambda g: (g @ bd.T, ad.T @ g), "matmul")


def linear(x: Tensor, W: Tensor, bias: Tensor) -> Tensor:
    """``x @ W + bias`` for ``x`` of shape (batch, in)."""
    if x.ndim != 2 or W.ndim != 2 or x.shape[1] != W.shape[0]:
        raise ValueError(f"linear: incompatible shapes {x.shape} @ {W.shape}")
    if bias.shape != (W.shape[1],):
        raise ValueError(f"linear: bias shape {bias.shape} != ({W.shape[1]},)")
    xd, Wd = x.data, W.data

    def fn(g):
        return g @ Wd.T, xd.T @ g, g.sum(axis=0)

    return _result(xd @ Wd + bias.data, (x, W, bias), fn, "linear")


def conv2d(x: Tensor, K: Tensor, bias: Tensor) -> Tensor:
    """Stride-1 valid cross-correlation.

    x: (b, cin, h, w), K: (cout, cin, kh, kw), bias: (cout,)
    """
    if x.ndim != 4 or K.ndim != 4:
        raise ValueError("conv2d: expected 4-d input and kernel")
    b, cin, h, w = x.shape
    cout, kcin, kh, kw = K.shape
    if kcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {kcin}")
    if kh > h or kw > w:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than input {h}x{w}")
    if bias.shape != (cout,):
        raise ValueError(f"conv2d: bias shape {bias.shape} != ({cout},)")
    oh, ow = h - kh + 1, w - kw + 1
    xd, Kd = x.data, K.data
    # im2col: (b, oh, ow, cin, kh, kw) -> (b*oh*ow, cin*kh*kw)
    cols = np.lib.stride_tricks.sliding_window_view(xd, (kh, kw), axis=(2, 3))
    cols = cols.transpose(0, 2, 3, 1, 4, 5).reshape(b * oh * ow, cin * kh * kw)
    Kmat = Kd.reshape(cout, cin * kh * kw)
    out = (cols @ Kmat.T + bias.data).reshape(b, oh, ow, cout).transpose(0, 3, 1, 2)

    def fn(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(b * oh * ow, cout)
        dK = (gmat.T @ cols).reshape(Kd.shape)
        dx = None
        if x.requires_grad:
            dcols = (gmat @ Kmat).reshape(b, oh, ow, cin, kh, kw)
            dx = np.zeros_like(xd)
            for i in range(kh):
                for j in range(kw):
                    dx[:, :, i:i + oh, j:j + ow] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        return dx, dK, g.sum(axis=(0, 2, 3))

    return _result(out, (x, K, bias), fn, "conv2d")


def upsample_nearest2x(x: Tensor) -> Tensor:
    if x.ndim != 4:
        raise ValueError("upsample_nearest2x: expected (b, c, h, w)")
    out = np.repeat(np.repeat(x.data, 2, axis=2), 2, axis=3)
    b, c, h, w = x.shape

    def fn(g):
        return (g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)),)

    return _result(out, (x,), fn, "upsample")


# ---------------------------------------------------------------- reductions

def _axis(x: Tensor, axis: int | None) -> int | None:
    if axis is None:
        return None
    if not -x.ndim <= axis < x.ndim:
        raise ValueError(f"invalid axis {axis} for shape {x.shape}")
    return axis % x.ndim


def sum(x: Tensor, axis: int | None = None) -> Tensor:  # noqa: A001
    ax = _axis(x, axis)
    shape = x.shape

    def fn(g):
        if ax is None:
            return (np.full(shape, float(np.asarray(g).item())),)
        return (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),)

    return _result(x.data.sum(axis=ax), (x,), fn, "sum")


def mean(x: Tensor, axis: int | None = None) -> Tensor:
    ax = _axis(x, axis)
    count = x.size if ax is None else x.shape[ax]
    return scalar_mul(sum(x, ax), 1.0 / count)


def max(x: Tensor, axis: int) -> Tensor:  # noqa: A001
    """Maximum along ``axis``; the gradient goes to the first argmax only."""
    ax = _axis(x, axis)
    if ax is None:
        raise ValueError("max: axis required")
    idx = np.expand_dims(np.argmax(x.data, axis=ax), ax)
    out = np.take_along_axis(x.data, idx, axis=ax).squeeze(ax)
    shape = x.shape

    def fn(g):
        dx = np.zeros(shape)
        np.put_along_axis(dx, idx, np.expand_dims(g, ax), axis=ax)
        return (dx,)

    return _result(out, (x,), fn, "max")


# ---------------------------------------------------------------- layout

def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(int(s) for s in shape)
    if int(np.prod(shape)) != x.size:
        raise ValueError(f"reshape: cannot reshape {x.shape} into {shape}")
    old = x.shape
    return _result(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), "reshape")


def transpose(x: Tensor, axes: Sequence[int]) -> Tensor:
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))
    out = np.ascontiguousarray(x.data.transpose(axes))
    return _result(out, (x,), lambda g: (g.transpose(inverse),), "transpose")


def concat(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    xs = [tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat: nothing to concatenate")
    ax = _axis(xs[0], axis)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.ndim != len(ref) or any(x.shape[d] != ref[d] for d in range(len(ref)) if d != ax):
            raise ValueError(f"concat: shapes {ref} and {x.shape} disagree off axis {ax}")
    bounds = np.cumsum([x.shape[ax] for x in xs])[:-1]

    def fn(g):
        return tuple(np.split(g, bounds, axis=ax))

    return _result(np.concatenate([x.data for x in xs], axis=ax), xs, fn, "concat")


def split(x: Tensor, sizes: Sequence[int], axis: int = 0) -> list[Tensor]:
    ax = _axis(x, axis)
    if int(np.sum(sizes)) != x.shape[ax]:
        raise ValueError(f"split: sizes {list(sizes)} do not sum to {x.shape[ax]}")
    out, start = [], 0
    for s in sizes:
        index = [slice(None)] * x.ndim
        index[ax] = slice(start, start + s)
        out.append(_getitem(x, tuple(index)))
        start += s
    return out


def _getitem(x: Tensor, index) -> Tensor:
    shape = x.shape

    def fn(g):
        dx = np.zeros(shape)
        np.add.at(dx, index, g)
        return (dx,)

    return _result(np.array(x.data[index]), (x,), fn, "getitem")


# ---------------------------------------------------------------- backward

def _topological(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    Intermediate gradients live only for the duration of the call, so the
    same graph may be differentiated several times.
    """
    if loss.size != 1:
        raise ValueError(f"backward: loss must be a scalar, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones(loss.shape)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


# ---------------------------------------------------------------- optimisation

class Adam:
    """Bias-corrected Adam over a fixed list of leaf tensors."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self) -> None:
        for p in self.params:
            if p.grad is None:
                raise ValueError(f"Adam.step: parameter {p!r} has no gradient")
        self.t += 1
        c1 = 1.0 - self.beta1 ** self.t
        c2 = 1.0 - self.beta2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None


def numerical_gradient(f: Callable[[], float], x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of ``f`` with respect to ``x`` (perturbed in place)."""
    grad = np.zeros_like(x)
    flat, gflat = x.reshape(-1), grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad
