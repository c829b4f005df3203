"""Reverse-mode automatic differentiation over dense numpy arrays.

Every primitive returns a new :class:`Tensor` that remembers its parents and a
closure mapping the output gradient to one gradient per parent.  Calling
:meth:`Tensor.backward` on a scalar orders the reachable graph topologically
(the tape) and walks it in reverse, accumulating into the ``grad`` buffers of
leaves created with ``requires_grad=True``.

Storage defaults to float32; reductions accumulate in float64.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import sparse

DEFAULT_DTYPE = np.float32

_grad_enabled = True


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for a primitive."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    """N-dimensional float array participating in the differentiation tape."""

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
            if dtype is None:
                dtype = data.dtype
        arr = np.asarray(data)
        if dtype is None:
            dtype = DEFAULT_DTYPE
        self.data = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.name = name

    # -- basic properties -------------------------------------------------
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
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    # -- operators ----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __pow__(self, exponent):
        return pow(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return getitem(self, index)

    # -- method sugar ---------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return reduce("sum", self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce("mean", self, axis, keepdims)

    def max(self, axis=None, keepdims=False):
        return reduce("max", self, axis, keepdims)

    def min(self, axis=None, keepdims=False):
        return reduce("min", self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    @property
    def T(self):
        return transpose(self, None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def sigmoid(self):
        return sigmoid(self)

    def relu(self):
        return relu(self)

    def abs(self):
        return abs(self)

    def clamp01(self):
        return clamp01(self)

    # -- reverse pass -------------------------------------------------------
    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into every reachable ``requires_grad`` leaf."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        else:
            grad = np.asarray(grad, dtype=self.dtype).reshape(self.shape)
        if not self.requires_grad:
            return

        tape = _topological_order(self)
        grads: dict[int, np.ndarray] = {id(self): grad}
        for node in reversed(tape):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                if node.grad is None:
                    node.grad = np.array(g, dtype=node.dtype, copy=True)
                else:
                    node.grad = node.grad + g
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


def _topological_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    visited: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in visited:
                stack.append((parent, False))
    return order


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def primitive(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Record a custom operation: ``backward(g)`` returns one gradient (or None) per parent."""
    return _result(np.asarray(data), tuple(parents), backward)


def _wrap(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(a: Tensor, b: Tensor, kind: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{kind}: shapes {a.shape} and {b.shape} do not broadcast") from None


# ---------------------------------------------------------------------------
# elementwise primitives


def add(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "add")
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(g * ad, bd.shape) if b.requires_grad else None)

    return _result(ad * bd, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "div")
    ad, bd = a.data, b.data

    def backward(g):
        return (_unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
                _unbroadcast(-g * ad / (bd * bd), bd.shape) if b.requires_grad else None)

    return _result(ad / bd, (a, b), backward)


def neg(a) -> Tensor:
    a = _wrap(a)
    return _result(-a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _wrap(a)
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def pow(a, exponent: float) -> Tensor:
    if isinstance(exponent, Tensor):
        raise TypeError("pow supports constant exponents only")
    a = _wrap(a)
    ad = a.data
    e = float(exponent)
    out = np.power(ad, e).astype(ad.dtype, copy=False)
    return _result(out, (a,), lambda g: (g * (e * np.power(ad, e - 1)).astype(ad.dtype, copy=False),))


def sqrt(a) -> Tensor:
    a = _wrap(a)
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def sin(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _result(np.sin(ad), (a,), lambda g: (g * np.cos(ad),))


def cos(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    return _result(np.cos(ad), (a,), lambda g: (-g * np.sin(ad),))


def minimum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "min")
    take_a = a.data <= b.data  # ties go to the first operand
    sa, sb = a.shape, b.shape
    return _result(np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)))


def maximum(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    _check_broadcast(a, b, "max")
    take_a = a.data >= b.data
    sa, sb = a.shape, b.shape
    return _result(np.where(take_a, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(g * take_a, sa), _unbroadcast(g * ~take_a, sb)))


def clamp01(a) -> Tensor:
    """Clip to [0, 1]; gradient passes inside the closed interval, zero outside."""
    a = _wrap(a)
    ad = a.data
    inside = (ad >= 0) & (ad <= 1)
    return _result(np.clip(ad, 0, 1), (a,), lambda g: (g * inside,))


def abs(a) -> Tensor:  # noqa: A001
    a = _wrap(a)
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),))


def sigmoid(a) -> Tensor:
    a = _wrap(a)
    ad = a.data
    out = np.empty_like(ad)
    pos = ad >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-ad[pos]))
    ez = np.exp(ad[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _result(out, (a,), lambda g: (g * out * (1 - out),))


def relu(a) -> Tensor:
    a = _wrap(a)
    mask = a.data > 0
    return _result(a.data * mask, (a,), lambda g: (g * mask,))


def where(cond, a, b) -> Tensor:
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond.data if isinstance(cond, Tensor) else cond, dtype=bool)
    a, b = _wrap(a), _wrap(b)
    sa, sb = a.shape, b.shape
    return _result(np.where(cond, a.data, b.data), (a, b),
                   lambda g: (_unbroadcast(np.where(cond, g, 0), sa), _unbroadcast(np.where(cond, 0, g), sb)))


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "div": div, "min": minimum, "max": maximum,
    "neg": neg, "exp": exp, "log": log, "clamp01": clamp01, "abs": abs,
    "sigmoid": sigmoid, "relu": relu,
}


def elementwise(kind: str, a, b=None) -> Tensor:
    """Dispatch an elementwise primitive by name (``pow`` takes ``b`` as exponent)."""
    if kind == "pow":
        return pow(a, b)
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise kind {kind!r}") from None
    return fn(a) if b is None else fn(a, b)


def stop_grad(a) -> Tensor:
    """Identity in value; contributes nothing to the backward pass."""
    a = _wrap(a)
    return Tensor(a.data)


def pass_through(source, value) -> Tensor:
    """Take the forward value of ``value`` while routing gradients to ``source`` unchanged."""
    source = _wrap(source)
    value = np.asarray(value.data if isinstance(value, Tensor) else value, dtype=source.dtype)
    if value.shape != source.shape:
        raise ShapeError(f"pass_through: shapes {source.shape} and {value.shape} differ")
    return _result(value.copy(), (source,), lambda g: (g,))


def astype(a, dtype) -> Tensor:
    a = _wrap(a)
    src = a.dtype
    return _result(a.data.astype(dtype), (a,), lambda g: (g.astype(src),))


# ---------------------------------------------------------------------------
# reductions and shape plumbing


def _normalize_axes(axes, ndim: int) -> tuple[int, ...]:
    if axes is None:
        return tuple(range(ndim))
    if isinstance(axes, int):
        axes = (axes,)
    out = []
    for ax in axes:
        if not -ndim <= ax < ndim:
            raise ShapeError(f"axis {ax} out of range for {ndim}-d tensor")
        out.append(ax % ndim)
    return tuple(sorted(set(out)))


def reduce(kind: str, a, axes=None, keepdims: bool = False) -> Tensor:
    """Reduce over ``axes`` with sum, mean, min or max.

    An explicit empty axis list is the identity.  Max/min route the gradient
    to the first extremal element only.
    """
    a = _wrap(a)
    if kind not in ("sum", "mean", "min", "max"):
        raise ValueError(f"unknown reduction {kind!r}")
    if axes is not None and not isinstance(axes, int) and len(axes) == 0:
        return _result(a.data.copy(), (a,), lambda g: (g,))
    ax = _normalize_axes(axes, a.ndim)
    ad = a.data
    kept_shape = tuple(1 if i in ax else s for i, s in enumerate(ad.shape))
    out_shape = kept_shape if keepdims else tuple(s for i, s in enumerate(ad.shape) if i not in ax)

    if kind in ("sum", "mean"):
        acc = ad.sum(axis=ax, dtype=np.float64, keepdims=True)
        count = int(np.prod([ad.shape[i] for i in ax])) if ax else 1
        if kind == "mean":
            acc = acc / count
        out = acc.astype(ad.dtype).reshape(out_shape)
        scale = 1.0 if kind == "sum" else 1.0 / count

        def backward(g):
            return (np.broadcast_to(g.reshape(kept_shape) * scale, ad.shape).astype(ad.dtype),)

        return _result(out, (a,), backward)

    rest = [i for i in range(ad.ndim) if i not in ax]
    moved = np.transpose(ad, rest + list(ax))
    flat = moved.reshape(moved.shape[: len(rest)] + (-1,))
    idx = flat.argmax(axis=-1) if kind == "max" else flat.argmin(axis=-1)
    out = np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0]
    out = out.reshape(out_shape)

    def backward(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, idx[..., None], g.reshape(idx.shape + (1,)), axis=-1)
        gmoved = gflat.reshape(moved.shape)
        return (np.transpose(gmoved, np.argsort(rest + list(ax))),)

    return _result(out, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = _wrap(a)
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),))


def transpose(a, axes=None) -> Tensor:
    a = _wrap(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def broadcast_to(a, shape) -> Tensor:
    a = _wrap(a)
    src = a.shape
    return _result(np.broadcast_to(a.data, shape).copy(), (a,), lambda g: (_unbroadcast(g, src),))


def getitem(a, index) -> Tensor:
    a = _wrap(a)
    if isinstance(index, Tensor):
        index = index.data.astype(np.int64)
    src_shape, dtype = a.shape, a.dtype

    def backward(g):
        full = np.zeros(src_shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _result(a.data[index], (a,), backward)


def concat(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    sizes = [t.shape[axis] for t in ts]
    splits = np.cumsum(sizes)[:-1]
    return _result(np.concatenate([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.split(g, splits, axis=axis)))


def stack(tensors: Iterable, axis: int = 0) -> Tensor:
    ts = [_wrap(t) for t in tensors]
    n = len(ts)
    return _result(np.stack([t.data for t in ts], axis=axis), ts,
                   lambda g: tuple(np.take(g, i, axis=axis) for i in range(n)))


def pad2d(a, pad: int) -> Tensor:
    """Zero-pad the last two axes by ``pad`` on every side."""
    a = _wrap(a)
    if pad == 0:
        return a
    widths = [(0, 0)] * (a.ndim - 2) + [(pad, pad), (pad, pad)]
    return _result(np.pad(a.data, widths), (a,), lambda g: (g[..., pad:-pad, pad:-pad],))


# ---------------------------------------------------------------------------
# linear algebra and convolution


def matmul(a, b) -> Tensor:
    a, b = _wrap(a), _wrap(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not aligned")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _result(ad @ bd, (a, b), backward)


def _im2col(x: np.ndarray, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Return patches as [N, OH, OW, C*kh*kw]."""
    if padding:
        n, c, h, w = x.shape
        padded = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=x.dtype)
        padded[:, :, padding:-padding, padding:-padding] = x
        x = padded
    win = sliding_window_view(x, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    n, c, oh, ow = win.shape[:4]
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(n, oh, ow, c * kh * kw)


def _col2im(cols: np.ndarray, x_shape, kh: int, kw: int, stride: int, padding: int) -> np.ndarray:
    """Adjoint of :func:`_im2col`; ``cols`` is [N, OH, OW, C*kh*kw]."""
    n, c, h, w = x_shape
    _, oh, ow, _ = cols.shape
    cols = np.ascontiguousarray(cols.reshape(n, oh, ow, c, kh, kw).transpose(4, 5, 0, 3, 1, 2))
    out = np.zeros((n, c, h + 2 * padding, w + 2 * padding), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * oh:stride, j:j + stride * ow:stride] += cols[i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _conv_out(size: int, k: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - k) // stride + 1


def conv2d(x, w, stride: int = 1, padding: int = 0) -> Tensor:
    """2-D cross-correlation of ``x`` [N,C,H,W] with filters ``w`` [F,C,kh,kw]."""
    x, w = _wrap(x), _wrap(w)
    if stride < 1:
        raise ValueError(f"conv2d: stride must be >= 1, got {stride}")
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"conv2d: input {x.shape} incompatible with weight {w.shape}")
    f, c, kh, kw = w.shape
    if kh > x.shape[2] + 2 * padding or kw > x.shape[3] + 2 * padding:
        raise ShapeError(f"conv2d: kernel {(kh, kw)} larger than padded input {x.shape[2:]}")
    cols = _im2col(x.data, kh, kw, stride, padding)
    n, oh, ow, ck = cols.shape
    wflat = w.data.reshape(f, ck)
    out = (cols.reshape(-1, ck) @ wflat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
    xshape = x.shape

    def backward(g):
        gflat = g.transpose(0, 2, 3, 1).reshape(-1, f)
        gx = gw = None
        if x.requires_grad:
            gx = _col2im((gflat @ wflat).reshape(n, oh, ow, ck), xshape, kh, kw, stride, padding)
        if w.requires_grad:
            gw = (gflat.T @ cols.reshape(-1, ck)).reshape(w.shape)
        return gx, gw

    return _result(np.ascontiguousarray(out), (x, w), backward)


def conv2d_transpose(g, w, stride: int, padding: int, out_hw: tuple[int, int]) -> Tensor:
    """Adjoint of :func:`conv2d` w.r.t. its input, differentiable in ``g`` and ``w``.

    ``g`` is [N,F,OH,OW]; the result is [N,C,*out_hw].  Used to build the
    critic's input gradient as an ordinary graph.
    """
    g, w = _wrap(g), _wrap(w)
    f, c, kh, kw = w.shape
    n, fg, oh, ow = g.shape
    if fg != f:
        raise ShapeError(f"conv2d_transpose: {g.shape} incompatible with weight {w.shape}")
    ck = c * kh * kw
    wflat = w.data.reshape(f, ck)
    gflat = g.data.transpose(0, 2, 3, 1).reshape(-1, f)
    xshape = (n, c) + tuple(out_hw)
    out = _col2im((gflat @ wflat).reshape(n, oh, ow, ck), xshape, kh, kw, stride, padding)

    def backward(up):
        cols = _im2col(up, kh, kw, stride, padding).reshape(-1, ck)
        gg = gw = None
        if g.requires_grad:
            gg = (cols @ wflat.T).reshape(n, oh, ow, f).transpose(0, 3, 1, 2)
        if w.requires_grad:
            gw = (gflat.T @ cols).reshape(w.shape)
        return gg, gw

    return _result(out, (g, w), backward)


def grid_sample_bilinear(x, grid) -> Tensor:
    """Bilinearly sample ``x`` [N,C,H,W] at normalized ``grid`` [N,Ho,Wo,2].

    Coordinates follow the align-corners=False convention: pixel ``i`` has its
    centre at ``(2i + 1) / size - 1``.  Reads outside the image are zero.  A
    grid with leading dimension 1 is shared across the batch.
    """
    x, grid = _wrap(x), _wrap(grid)
    if grid.ndim != 4 or grid.shape[-1] != 2:
        raise ShapeError(f"grid_sample: grid must be [N,H,W,2], got {grid.shape}")
    if x.ndim != 4:
        raise ShapeError(f"grid_sample: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    gn, ho, wo, _ = grid.shape
    if gn not in (1, n):
        raise ShapeError(f"grid_sample: grid batch {gn} does not match input batch {n}")

    if gn == 1:
        return _grid_sample_shared(x, grid)
    gd = grid.data.astype(np.float64)
    ix = ((gd[..., 0] + 1.0) * w - 1.0) * 0.5
    iy = ((gd[..., 1] + 1.0) * h - 1.0) * 0.5
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    fx = ix - x0
    fy = iy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    if gn == 1 and n > 1:
        shape = (n, ho, wo)
        ix, iy, fx, fy, x0, y0 = (np.broadcast_to(t, shape) for t in (ix, iy, fx, fy, x0, y0))

    xt = x.data.astype(np.float64).reshape(n, c, h * w).transpose(0, 2, 1)  # [N,HW,C]
    bidx = np.arange(n)[:, None, None]
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            cx, cy = x0 + dx, y0 + dy
            valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            flat = np.where(valid, cy * w + cx, 0)
            vals = xt[bidx, flat] * valid[..., None]  # [N,Ho,Wo,C]
            wx = fx if dx else 1.0 - fx
            wy = fy if dy else 1.0 - fy
            corners.append((flat, valid, vals, wx, wy))
    out = sum(v * (wx * wy)[..., None] for _, _, v, wx, wy in corners)
    out_data = out.transpose(0, 3, 1, 2).astype(x.dtype)

    def backward(g):
        g64 = g.astype(np.float64).transpose(0, 2, 3, 1)  # [N,Ho,Wo,C]
        gx = ggrid = None
        if x.requires_grad:
            acc = np.zeros((n, h * w, c))
            offs = (np.arange(n) * (h * w))[:, None, None]
            acc_flat = acc.reshape(n * h * w, c)
            for flat, valid, _, wx, wy in corners:
                contrib = g64 * (wx * wy * valid)[..., None]
                idx = (flat + offs).reshape(-1)
                for ch in range(c):
                    acc_flat[:, ch] += np.bincount(idx, weights=contrib[..., ch].reshape(-1), minlength=n * h * w)
            gx = acc.transpose(0, 2, 1).reshape(n, c, h, w).astype(x.dtype)
        if grid.requires_grad:
            (_, _, v00, _, _), (_, _, v01, _, _), (_, _, v10, _, _), (_, _, v11, _, _) = corners
            wy0, wy1 = (1.0 - fy)[..., None], fy[..., None]
            wx0, wx1 = (1.0 - fx)[..., None], fx[..., None]
            d_ix = ((v01 - v00) * wy0 + (v11 - v10) * wy1) * g64
            d_iy = ((v10 - v00) * wx0 + (v11 - v01) * wx1) * g64
            gg = np.stack([d_ix.sum(-1) * (w * 0.5), d_iy.sum(-1) * (h * 0.5)], axis=-1)
            if gn == 1 and n > 1:
                gg = gg.sum(axis=0, keepdims=True)
            ggrid = gg.astype(grid.dtype)
        return gx, ggrid

    return _result(out_data, (x, grid), backward)


def _grid_sample_shared(x: Tensor, grid: Tensor) -> Tensor:
    n, c, _, _ = x.shape
    _, ho, wo, _ = grid.shape
    return grid_sample_many(x, grid).reshape(n, c, ho, wo)


def grid_sample_many(x, grids) -> Tensor:
    """Sample the whole batch ``x`` [N,C,H,W] at each of ``grids`` [G,Ho,Wo,2].

    Returns [G,N,C,Ho,Wo]; slice ``g`` equals ``grid_sample_bilinear(x,
    grids[g:g+1])``.  Pixels are laid out as rows ``[H*W, N*C]`` so every
    corner lookup gathers whole rows, and the x-gradient of all G samplers is
    one sparse-as-dense product.  Coordinates and weights are float64, the
    products use the input dtype.
    """
    x, grids = _wrap(x), _wrap(grids)
    if grids.ndim != 4 or grids.shape[-1] != 2:
        raise ShapeError(f"grid_sample: grids must be [G,H,W,2], got {grids.shape}")
    if x.ndim != 4:
        raise ShapeError(f"grid_sample: input must be [N,C,H,W], got {x.shape}")
    n, c, h, w = x.shape
    ng, ho, wo, _ = grids.shape
    m = ng * ho * wo
    dt = x.dtype
    gd = grids.data.astype(np.float64).reshape(m, 2)
    ix = ((gd[:, 0] + 1.0) * w - 1.0) * 0.5
    iy = ((gd[:, 1] + 1.0) * h - 1.0) * 0.5
    x0 = np.floor(ix)
    y0 = np.floor(iy)
    fx, fy = ix - x0, iy - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    xr = np.ascontiguousarray(x.data.reshape(n * c, h * w).T)
    corners = []
    for dy in (0, 1):
        for dx in (0, 1):
            cx, cy = x0 + dx, y0 + dy
            valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
            flat = np.where(valid, cy * w + cx, 0)
            weight = (fx if dx else 1.0 - fx) * (fy if dy else 1.0 - fy) * valid
            corners.append((flat, valid, weight))
    vals = [xr[flat] * valid[:, None].astype(dt) for flat, valid, _ in corners]
    out = vals[0] * corners[0][2][:, None].astype(dt)
    for v, (_, _, wgt) in zip(vals[1:], corners[1:]):
        out += v * wgt[:, None].astype(dt)

    def backward(g):
        # g: [G,N,C,Ho,Wo] -> rows [G*Ho*Wo, N*C]
        gr = np.ascontiguousarray(g.reshape(ng, n * c, ho * wo).transpose(0, 2, 1)).reshape(m, n * c)
        gx = ggrid = None
        if x.requires_grad:
            rows = np.tile(np.arange(m), 4)
            cols = np.concatenate([flat for flat, _, _ in corners])
            wts = np.concatenate([wgt for _, _, wgt in corners]).astype(dt)
            adjoint = sparse.csr_matrix((wts, (cols, rows)), shape=(h * w, m))
            gx = np.ascontiguousarray((adjoint @ gr).T).reshape(n, c, h, w)
        if grids.requires_grad:
            v00, v01, v10, v11 = vals
            wy1, wx1 = fy[:, None].astype(dt), fx[:, None].astype(dt)
            d_ix = (((v01 - v00) * (1 - wy1) + (v11 - v10) * wy1) * gr).sum(axis=1, dtype=np.float64)
            d_iy = (((v10 - v00) * (1 - wx1) + (v11 - v01) * wx1) * gr).sum(axis=1, dtype=np.float64)
            ggrid = np.stack([d_ix * (w * 0.5), d_iy * (h * 0.5)], axis=-1).reshape(grids.shape).astype(grids.dtype)
        return gx, ggrid

    res = out.reshape(ng, ho * wo, n * c).transpose(0, 2, 1)
    return _result(np.ascontiguousarray(res).reshape(ng, n, c, ho, wo), (x, grids), backward)


def mixture(x, outs, coef) -> Tensor:
    """``x + sum_m coef[m, i] * (outs[m, i] - x[i])`` for outs [M,N,...], coef [M,N].

    With per-image gates ``b`` and mixture weights ``w`` summing to one,
    ``coef = w * b`` gives ``sum_m w_m (b_m outs_m + (1 - b_m) x)`` as a
    single graph node.
    """
    x, outs, coef = _wrap(x), _wrap(outs), _wrap(coef)
    if outs.shape[1:] != x.shape or coef.shape != outs.shape[:2]:
        raise ShapeError(f"mixture: outs {outs.shape}, x {x.shape} and coef {coef.shape} do not line up")
    mm, n = coef.shape
    k = int(np.prod(x.shape[1:], dtype=np.int64))
    diff = (outs.data - x.data[None]).reshape(mm, n, k)
    cd = coef.data.astype(x.dtype)
    out = x.data + np.einsum("mn,mnk->nk", cd, diff).reshape(x.shape)

    def backward(g):
        g2 = g.reshape(n, k)
        gx = go = gc = None
        if x.requires_grad:
            gx = (g2 * (1.0 - cd.sum(axis=0))[:, None]).reshape(x.shape)
        if outs.requires_grad:
            go = (cd[:, :, None] * g2[None]).reshape(outs.shape)
        if coef.requires_grad:
            gc = np.einsum("nk,mnk->mn", g2, diff).astype(coef.dtype)
        return gx, go, gc

    return _result(out.astype(x.dtype), (x, outs, coef), backward)


# ---------------------------------------------------------------------------
# composite helpers


def softmax(z, temperature: float = 1.0, axis: int = -1) -> Tensor:
    z = _wrap(z) / temperature
    shift = stop_grad(reduce("max", z, axis, keepdims=True))
    e = exp(z - shift)
    return e / reduce("sum", e, axis, keepdims=True)


def log_softmax(z, axis: int = -1) -> Tensor:
    z = _wrap(z)
    shift = stop_grad(reduce("max", z, axis, keepdims=True))
    zs = z - shift
    return zs - log(reduce("sum", exp(zs), axis, keepdims=True))


def backward(loss: Tensor) -> dict[int, np.ndarray]:
    """Run the reverse pass from ``loss``; returns ``{id(leaf): grad}`` for convenience."""
    loss.backward()
    return {id(t): t.grad for t in _topological_order(loss) if t.is_leaf and t.grad is not None}
