"""A small reverse-mode autodiff engine on top of numpy.

Only the operators the MS-SiT needs are provided. Tensors keep whatever
float dtype they were created with (float32 for training, float64 for
gradient checks). Batched operands share leading dimensions; the only
broadcast is a 1-D bias (or per-row table) added along the last axes.

Example:
    >>> w = Tensor(np.ones((3, 2)), requires_grad=True)
    >>> x = Tensor(np.arange(6.0).reshape(2, 3))
    >>> loss = mean(matmul(x, w))
    >>> backward(loss)
    >>> w.grad.shape
    (3, 2)
"""

from __future__ import annotations

import contextlib
import threading
from typing import Callable, Sequence

import numpy as np
import scipy.sparse as sp

from . import _kernels as K

_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference)."""
    prev = is_grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


class Tensor:
    """Dense array with an optional gradient.

    Attributes:
        data: The numpy value.
        requires_grad: Whether gradients flow to (or through) this tensor.
        grad: Accumulated gradient of a leaf after :func:`backward`.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None

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
    def is_leaf(self) -> bool:
        return self._backward is None

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], backward: Callable) -> Tensor:
    """Wrap an op output, recording it on the graph if any parent needs a gradient.

    ``backward`` maps the output gradient to a tuple with one entry (array
    or ``None``) per parent.
    """
    out = Tensor(data)
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


class Tape:
    """Topologically ordered record of the ops that produced ``root``.

    Only nodes that require a gradient are recorded, and each appears once,
    after all of its inputs.
    """

    def __init__(self, root: Tensor):
        self.nodes: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                self.nodes.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

    def backward(self, seed: np.ndarray) -> None:
        grads: dict[int, np.ndarray] = {id(self.nodes[-1]): seed}
        for node in reversed(self.nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
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


def backward(loss: Tensor) -> None:
    """Accumulate ``d loss / d leaf`` into ``leaf.grad`` for every reachable leaf.

    Raises:
        ValueError: If ``loss`` is not a single-element tensor.
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    Tape(loss).backward(np.ones_like(loss.data))


def _check_same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def _sum_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Reduce leading dimensions of ``g`` so it matches ``shape`` (trailing-aligned)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        rows = g.reshape(-1, *shape)
        g = (np.ones(rows.shape[0], dtype=g.dtype) @ rows.reshape(rows.shape[0], -1)).reshape(shape)
    return g


def _is_trailing(b: Tensor, a: Tensor) -> bool:
    return b.ndim < a.ndim and a.shape[a.ndim - b.ndim:] == b.shape


# elementwise ---------------------------------------------------------------


def add(a, b) -> Tensor:
    """``a + b`` for equal shapes, a trailing-shape bias/table ``b``, or a python scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        return _result(a.data + b, (a,), lambda g: (g,))
    b = as_tensor(b)
    if a.shape != b.shape and not _is_trailing(b, a):
        raise ValueError(f"add: cannot combine shapes {a.shape} and {b.shape}")
    bshape = b.shape
    return _result(a.data + b.data, (a, b), lambda g: (g, _sum_to(g, bshape)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "sub")
    return _result(a.data - b.data, (a, b), lambda g: (g, -g))


def mul(a, b) -> Tensor:
    """Elementwise product of equal-shape tensors, or with a python scalar."""
    a = as_tensor(a)
    if np.isscalar(b):
        return scale(a, b)
    b = as_tensor(b)
    _check_same_shape(a, b, "mul")
    ad, bd = a.data, b.data
    return _result(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_same_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd
    return _result(out, (a, b), lambda g: (g / bd, -g * out / bd))


def scale(a, s: float) -> Tensor:
    a = as_tensor(a)
    s = float(s)
    return _result(a.data * a.data.dtype.type(s), (a,), lambda g: (g * g.dtype.type(s),))


def gelu(x) -> Tensor:
    """Exact GELU, ``x * Phi(x)`` with the Gaussian CDF."""
    x = as_tensor(x)
    xd = np.ascontiguousarray(x.data)
    out = np.empty_like(xd)
    cdf = np.empty_like(xd)
    K.gelu_forward(xd, out, cdf)

    def back(g):
        pdf = np.exp(xd * xd * xd.dtype.type(-0.5))
        pdf *= xd.dtype.type(_INV_SQRT_2PI)
        pdf *= xd
        pdf += cdf
        pdf *= g
        return (pdf,)

    return _result(out, (x,), back)


_INV_SQRT_2PI = 0.3989422804014327


def dropout(x, keep_prob: float, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; ``keep_prob == 1`` returns ``x`` itself."""
    x = as_tensor(x)
    if not 0.0 < keep_prob <= 1.0:
        raise ValueError(f"keep probability must be in (0, 1], got {keep_prob}")
    if keep_prob == 1.0:
        return x
    if rng is None:
        raise ValueError("dropout with keep_prob < 1 needs an rng")
    mask = (rng.random(x.shape) < keep_prob).astype(x.dtype) / x.dtype.type(keep_prob)
    return _result(x.data * mask, (x,), lambda g: (g * mask,))


# linear algebra and shape ---------------------------------------------------


def matmul(a, b) -> Tensor:
    """``(..., m, k) @ (k, n)`` or batched ``(..., m, k) @ (..., k, n)``."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs >= 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim > a.ndim:
        raise ValueError(f"matmul: right operand has more batch dims, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return _result(ad @ bd, (a, b), back)


def transpose(x, axes: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    axes = tuple(int(a) % x.ndim for a in axes)
    if sorted(axes) != list(range(x.ndim)):
        raise ValueError(f"transpose: {axes} is not a permutation of {x.ndim} axes")
    inv = tuple(np.argsort(axes))
    return _result(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def transpose_last2(x) -> Tensor:
    x = as_tensor(x)
    axes = list(range(x.ndim))
    axes[-1], axes[-2] = axes[-2], axes[-1]
    return transpose(x, axes)


def reshape(x, shape: Sequence[int]) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ValueError(f"reshape: cannot reshape {old} to {tuple(shape)}") from exc
    return _result(out, (x,), lambda g: (g.reshape(old),))


def gather_rows(x, index: np.ndarray) -> Tensor:
    """Select rows (axis -2) by integer ``index``; repeated rows accumulate gradient."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ValueError("gather_rows needs at least 2-D input")
    index = np.asarray(index, dtype=np.int64)
    if index.ndim != 1:
        raise ValueError("gather_rows index must be 1-D")
    n = x.shape[-2]
    if index.size and (index.min() < -n or index.max() >= n):
        raise ValueError(f"gather_rows index out of range for {n} rows")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        if np.unique(index).size == index.size:
            gx[..., index, :] = g
        else:
            np.add.at(gx, (Ellipsis, index, slice(None)), g)
        return (gx,)

    return _result(x.data[..., index, :], (x,), back)


def concat_last(xs: Sequence) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ValueError("concat_last needs at least one tensor")
    lead = xs[0].shape[:-1]
    for x in xs[1:]:
        if x.shape[:-1] != lead:
            raise ValueError(f"concat_last: leading shapes differ, {lead} vs {x.shape[:-1]}")
    bounds = np.cumsum([0] + [x.shape[-1] for x in xs])

    def back(g):
        return tuple(g[..., bounds[i]:bounds[i + 1]] for i in range(len(xs)))

    return _result(np.concatenate([x.data for x in xs], axis=-1), xs, back)


def slice_last(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise ValueError(f"slice_last: [{start}, {stop}) out of range for width {x.shape[-1]}")
    shape = x.shape

    def back(g):
        gx = np.zeros(shape, dtype=g.dtype)
        gx[..., start:stop] = g
        return (gx,)

    return _result(x.data[..., start:stop], (x,), back)


def split_last(x, sizes: Sequence[int]) -> list[Tensor]:
    """Split the last axis into consecutive pieces of the given widths."""
    x = as_tensor(x)
    if int(np.sum(sizes)) != x.shape[-1]:
        raise ValueError(f"split_last: sizes {list(sizes)} do not sum to {x.shape[-1]}")
    bounds = np.cumsum([0, *sizes])
    return [slice_last(x, int(bounds[i]), int(bounds[i + 1])) for i in range(len(sizes))]


def embedding_add(x, table) -> Tensor:
    """Add a ``(N, W)`` table to every batch element of ``(..., N, W)``."""
    x, table = as_tensor(x), as_tensor(table)
    if x.shape[-table.ndim:] != table.shape:
        raise ValueError(f"embedding_add: table {table.shape} does not match input {x.shape}")
    return add(x, table)


def sparse_matmul(m: sp.spmatrix, x) -> Tensor:
    """Constant sparse ``(P, N)`` matrix applied to rows: ``(..., N, D) -> (..., P, D)``."""
    x = as_tensor(x)
    if m.shape[1] != x.shape[-2]:
        raise ValueError(f"sparse_matmul: matrix {m.shape} vs input rows {x.shape[-2]}")
    m = sp.csr_matrix(m, dtype=x.dtype)
    mt = sp.csr_matrix(m.T)
    lead, n, d = x.shape[:-2], x.shape[-2], x.shape[-1]

    def apply(mat, arr, rows_in, rows_out):
        flat = np.moveaxis(arr.reshape(-1, rows_in, d), 1, 0).reshape(rows_in, -1)
        res = np.asarray(mat @ flat).reshape(rows_out, -1, d)
        return np.moveaxis(res, 0, 1).reshape(*lead, rows_out, d)

    p = m.shape[0]
    out = apply(m, x.data, n, p)
    return _result(out, (x,), lambda g: (apply(mt, g, p, n),))


# reductions and normalisation ----------------------------------------------


def sum(x, axis: int | None = None) -> Tensor:  # noqa: A001 - mirrors numpy
    x = as_tensor(x)
    shape = x.shape
    if axis is None:
        return _result(x.data.sum(), (x,), lambda g: (np.broadcast_to(g, shape).copy(),))
    ax = axis % x.ndim
    return _result(
        x.data.sum(axis=ax),
        (x,),
        lambda g: (np.broadcast_to(np.expand_dims(g, ax), shape).copy(),),
    )


def mean(x, axis: int | None = None) -> Tensor:
    x = as_tensor(x)
    n = x.data.size if axis is None else x.shape[axis]
    if n == 0:
        raise ValueError("mean over an empty axis")
    return scale(sum(x, axis), 1.0 / n)


def mean_rows(x) -> Tensor:
    """Average over the token axis (-2)."""
    return mean(x, axis=-2)


def _max_last(a: np.ndarray) -> np.ndarray:
    # pairwise halving beats ufunc.reduce on short rows
    while a.shape[-1] > 1 and a.shape[-1] % 2 == 0:
        h = a.shape[-1] // 2
        a = np.maximum(a[..., :h], a[..., h:])
    return a if a.shape[-1] == 1 else a.max(axis=-1, keepdims=True)


def softmax_last(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    e = x.data - _max_last(x.data)
    np.exp(e, out=e)
    e /= e.sum(axis=-1, keepdims=True)
    s = e

    def back(g):
        gs = g * s
        gs -= s * gs.sum(axis=-1, keepdims=True)
        return (gs,)

    return _result(s, (x,), back)


def log_softmax_last(x) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or x.shape[-1] == 0:
        raise ValueError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse
    s = np.exp(out)
    return _result(out, (x,), lambda g: (g - s * g.sum(axis=-1, keepdims=True),))


def layer_norm(x, weight=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis; optional affine ``weight``/``bias`` of that width."""
    x = as_tensor(x)
    d = x.shape[-1]
    if d == 0:
        raise ValueError("layer_norm over an empty axis")
    parents = [x]
    for name, t in (("weight", weight), ("bias", bias)):
        if t is not None:
            t = as_tensor(t)
            if t.shape != (d,):
                raise ValueError(f"layer_norm {name} must have shape ({d},), got {t.shape}")
            parents.append(t)
    xd = K.rows2d(x.data)
    xhat = np.empty_like(xd)
    inv = np.empty(xd.shape[0], dtype=xd.dtype)
    K.layer_norm_rows(xd, float(eps), xhat, inv)
    w = as_tensor(weight).data if weight is not None else None
    out = xhat if w is None else xhat * w
    if bias is not None:
        out = out + as_tensor(bias).data

    def back(g):
        g = K.rows2d(g.astype(xd.dtype, copy=False))
        gh = g if w is None else g * w
        gx = np.empty_like(xd)
        K.layer_norm_rows_backward(gh, xhat, inv, gx)
        grads = [gx.reshape(x.shape)]
        if weight is not None:
            grads.append(np.ones(g.shape[0], dtype=g.dtype) @ (g * xhat))
        if bias is not None:
            grads.append(np.ones(g.shape[0], dtype=g.dtype) @ g)
        return tuple(grads)

    return _result(out.reshape(x.shape), parents, back)


def linear(x, weight, bias=None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``(d_in, d_out)``, as one node."""
    x, weight = as_tensor(x), as_tensor(weight)
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ValueError(f"linear: input {x.shape} does not match weight {weight.shape}")
    parents = [x, weight]
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (weight.shape[1],):
            raise ValueError(f"linear: bias must have shape ({weight.shape[1]},), got {bias.shape}")
        parents.append(bias)
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        out += bias.data
    need_x = x.requires_grad

    def back(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if need_x else None
        gw = xd.reshape(-1, xd.shape[-1]).T @ g2
        if bias is None:
            return gx, gw
        return gx, gw, np.ones(g2.shape[0], dtype=g2.dtype) @ g2

    return _result(out, parents, back)
