"""Dense tensors with a reverse-mode gradient tape.

Every backward rule is written with the same tensor operations as the
forward pass. Running the backward sweep with ``create_graph=True`` therefore
records the gradient computation itself, which is what the R1 penalty needs
(gradient of a squared input-gradient norm). A few rules fall back to raw
arrays; those operations are flagged ``second_order=False`` and are rejected
when they appear inside a create-graph sweep.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np
import scipy.sparse as sp

from ..exceptions import GradientError, ShapeError

_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable recording inside the block."""
    prev = _grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


@contextlib.contextmanager
def enable_grad():
    prev = _grad_enabled()
    _state.enabled = True
    try:
        yield
    finally:
        _state.enabled = prev


_DEFAULT_DTYPE = [np.float32]


def set_default_dtype(dtype) -> None:
    """Select 32- or 64-bit floats for tensors created from Python data."""
    dtype = np.dtype(dtype).type
    if dtype not in (np.float32, np.float64):
        raise ValueError("dtype must be float32 or float64")
    _DEFAULT_DTYPE[0] = dtype


def get_default_dtype():
    return _DEFAULT_DTYPE[0]


@contextlib.contextmanager
def default_dtype(dtype):
    prev = get_default_dtype()
    set_default_dtype(dtype)
    try:
        yield
    finally:
        set_default_dtype(prev)


class Tensor:
    """N-dimensional array that records the operations producing it.

    ``grad`` holds the accumulated gradient (a plain ndarray) after
    :meth:`backward` for tensors created with ``requires_grad=True``.
    """

    __array_priority__ = 100
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op",
                 "second_order", "_consumed", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if arr.dtype in (np.float32, np.float64) else get_default_dtype()
        self.data = np.asarray(arr, dtype=dtype)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.op = "leaf"
        self.second_order = True
        self._consumed = False
        self.name = name

    # -- basic info --------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    # -- operators ---------------------------------------------------------
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __rtruediv__(self, o):
        return div(o, self)

    def __neg__(self):
        return scalar_mul(self, -1.0)

    def __matmul__(self, o):
        return matmul(self, o)

    def __rmatmul__(self, o):
        return matmul(o, self)

    def __getitem__(self, key):
        return getitem(self, key)

    # method forms
    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def flatten(self, start_axis: int = 0):
        return flatten(self, start_axis)

    def swapaxes(self, a, b):
        return swapaxes(self, a, b)

    def backward(self, grad=None, retain_graph: bool = False, create_graph: bool = False):
        backward(self, grad, retain_graph=retain_graph, create_graph=create_graph)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _const_like(x: Tensor, value) -> Tensor:
    return Tensor(np.asarray(value, dtype=x.dtype))


def _result(data, parents, backward_fn, op, second_order=True) -> Tensor:
    out = Tensor(data, dtype=data.dtype if data.dtype in (np.float32, np.float64) else None)
    if _grad_enabled() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        # frozen at record time: a later requires_grad flip must not reopen the path
        out._parents = tuple(p if p.requires_grad else None for p in parents)
        out._backward = backward_fn
        out.op = op
        out.second_order = second_order
    return out


def _pair(a, b):
    a_t, b_t = isinstance(a, Tensor), isinstance(b, Tensor)
    if not a_t and not b_t:
        a = Tensor(a)
    if not isinstance(a, Tensor):
        a = Tensor(np.asarray(a, dtype=b.dtype))
    if not isinstance(b, Tensor):
        b = Tensor(np.asarray(b, dtype=a.dtype))
    return a, b


def unbroadcast(g: Tensor, shape) -> Tensor:
    """Sum ``g`` down to ``shape`` (adjoint of numpy broadcasting)."""
    shape = tuple(shape)
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


# -- elementwise arithmetic -------------------------------------------------
def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} and {b.shape}") from None
    return _result(data, (a, b), lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} and {b.shape}") from None
    return _result(data, (a, b),
                   lambda g: (unbroadcast(g, a.shape), unbroadcast(scalar_mul(g, -1.0), b.shape)),
                   "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} and {b.shape}") from None

    def bw(g):
        return (unbroadcast(mul(g, b), a.shape) if a.requires_grad else None,
                unbroadcast(mul(g, a), b.shape) if b.requires_grad else None)

    return _result(data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    try:
        data = a.data / b.data
    except ValueError:
        raise ShapeError(f"div: cannot broadcast {a.shape} and {b.shape}") from None

    def bw(g):
        ga = unbroadcast(div(g, b), a.shape) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            gb = unbroadcast(scalar_mul(div(mul(g, a), mul(b, b)), -1.0), b.shape)
        return ga, gb

    return _result(data, (a, b), bw, "div")


def scalar_mul(a: Tensor, c: float) -> Tensor:
    a = as_tensor(a)
    c = float(c)
    return _result(a.data * a.data.dtype.type(c), (a,), lambda g: (scalar_mul(g, c),), "scalar_mul")


def square(a: Tensor) -> Tensor:
    return mul(a, a)


# -- linear algebra ----------------------------------------------------------
def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    return _result(np.swapaxes(a.data, i, j), (a,), lambda g: (swapaxes(g, i, j),), "swapaxes")


def matmul(a, b) -> Tensor:
    """Matrix product with numpy batching semantics; both operands need ndim >= 2."""
    a, b = _pair(a, b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul operands must have at least 2 dimensions")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dimensions differ, {a.shape} @ {b.shape}")
    if b.ndim == 2 and a.ndim > 2:
        # one GEMM over the folded leading axes instead of a batched product
        lead = a.shape[:-1]
        out = matmul(reshape(a, (-1, a.shape[-1])), b)
        return reshape(out, lead + (b.shape[-1],))
    try:
        data = np.matmul(a.data, b.data)
    except ValueError:
        raise ShapeError(f"matmul: incompatible batch shapes {a.shape} @ {b.shape}") from None

    def bw(g):
        ga = unbroadcast(matmul(g, swapaxes(b, -1, -2)), a.shape) if a.requires_grad else None
        gb = unbroadcast(matmul(swapaxes(a, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _result(data, (a, b), bw, "matmul")


class _SparseOp:
    """CSR matrix with a lazily built, cached transpose."""

    __slots__ = ("m", "_t")

    def __init__(self, m):
        self.m = m if sp.isspmatrix_csr(m) else sp.csr_matrix(m)
        self._t = None

    @property
    def T(self) -> "_SparseOp":
        if self._t is None:
            self._t = _SparseOp(self.m.T.tocsr())
            self._t._t = self
        return self._t


_SPARSE_CACHE: dict = {}


def _sparse_op(m) -> _SparseOp:
    if isinstance(m, _SparseOp):
        return m
    hit = _SPARSE_CACHE.get(id(m))
    if hit is not None and hit[0] is m:
        return hit[1]
    if len(_SPARSE_CACHE) > 512:
        _SPARSE_CACHE.clear()
    op = _SparseOp(m)
    _SPARSE_CACHE[id(m)] = (m, op)
    return op


def sparse_matmul(m, x: Tensor) -> Tensor:
    """``m @ x`` along the vertex axis for a constant sparse ``m`` of shape (R, V).

    ``x`` has shape ``(..., V, C)``; the result has shape ``(..., R, C)``.
    """
    x = as_tensor(x)
    op = _sparse_op(m)
    mat = op.m
    if x.ndim < 2 or x.shape[-2] != mat.shape[1]:
        raise ShapeError(f"sparse_matmul: matrix {mat.shape} cannot act on {x.shape}")
    lead, (v, c) = x.shape[:-2], x.shape[-2:]
    moved = np.moveaxis(x.data, -2, 0).reshape(v, -1)
    res = np.asarray(mat @ moved, dtype=x.dtype).reshape((mat.shape[0],) + lead + (c,))
    data = np.moveaxis(res, 0, -2)
    return _result(np.ascontiguousarray(data), (x,), lambda g: (sparse_matmul(op.T, g),), "sparse_matmul")


def gather_rows(x: Tensor, index) -> Tensor:
    """Select rows of the vertex axis: ``x[..., index, :]``.

    ``x`` has shape ``(..., V, C)`` and ``index`` any integer shape ``I``; the
    result has shape ``(..., *I, C)``.
    """
    x = as_tensor(x)
    index = np.asarray(index, dtype=np.int64)
    n = x.shape[-2]
    if index.size and (index.min() < 0 or index.max() >= n):
        raise ShapeError(f"gather_rows: index out of range for {n} rows")
    data = np.take(x.data, index, axis=x.ndim - 2)
    return _result(data, (x,), lambda g: (scatter_rows(g, index, n),), "gather_rows")


_SCATTER_CACHE: dict = {}


def _scatter_matrix(index: np.ndarray, n_rows: int):
    key = (id(index), n_rows)
    hit = _SCATTER_CACHE.get(key)
    if hit is not None and hit[0] is index:
        return hit[1]
    flat = index.ravel()
    scat = sp.csr_matrix((np.ones(flat.size), (flat, np.arange(flat.size))), shape=(n_rows, flat.size))
    if len(_SCATTER_CACHE) > 512:
        _SCATTER_CACHE.clear()
    _SCATTER_CACHE[key] = (index, scat)
    return scat


def scatter_rows(g: Tensor, index, n_rows: int) -> Tensor:
    """Adjoint of :func:`gather_rows`: sum rows of ``g`` into ``n_rows`` slots."""
    g = as_tensor(g)
    index = np.asarray(index, dtype=np.int64)
    k = index.ndim
    lead = g.shape[: g.ndim - k - 1]
    c = g.shape[-1]
    flat = index.ravel()
    moved = g.data.reshape(lead + (flat.size, c))
    moved = np.moveaxis(moved, -2, 0).reshape(flat.size, -1)
    scat = _scatter_matrix(index, n_rows)
    res = np.asarray(scat @ moved, dtype=g.dtype).reshape((n_rows,) + lead + (c,))
    data = np.ascontiguousarray(np.moveaxis(res, 0, -2))
    return _result(data, (g,), lambda h: (gather_rows(h, index),), "scatter_rows")


def reshape(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {shape}") from None
    return _result(data, (a,), lambda g: (reshape(g, old),), "reshape")


def flatten(a: Tensor, start_axis: int = 0) -> Tensor:
    start_axis %= max(a.ndim, 1)
    return reshape(a, a.shape[:start_axis] + (-1,))


def broadcast_to(a: Tensor, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        data = np.broadcast_to(a.data, shape)
    except ValueError:
        raise ShapeError(f"broadcast_to: cannot broadcast {old} to {shape}") from None
    return _result(np.ascontiguousarray(data), (a,), lambda g: (unbroadcast(g, old),), "broadcast_to")


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    axes = _norm_axes(axis, a.ndim)
    data = np.sum(a.data, axis=axes, keepdims=keepdims)
    kept = tuple(1 if i in axes else n for i, n in enumerate(old))

    def bw(g):
        return (broadcast_to(reshape(g, kept), old),)

    return _result(np.asarray(data), (a,), bw, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    return scalar_mul(sum_(a, axes, keepdims), 1.0 / count)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    ndim = tensors[0].ndim
    ax = axis % ndim
    try:
        data = np.concatenate([t.data for t in tensors], axis=ax)
    except ValueError:
        raise ShapeError("concat: shapes differ outside the concatenation axis") from None
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def bw(g):
        out = []
        for i, t in enumerate(tensors):
            idx = [slice(None)] * ndim
            idx[ax] = slice(int(bounds[i]), int(bounds[i + 1]))
            out.append(getitem(g, tuple(idx)) if t.requires_grad else None)
        return tuple(out)

    return _result(data, tuple(tensors), bw, "concat")


def getitem(a: Tensor, key) -> Tensor:
    """Basic (slice/integer) indexing; the adjoint embeds into zeros."""
    a = as_tensor(a)
    if isinstance(key, (np.ndarray, list)) or (
            isinstance(key, tuple) and any(isinstance(k, (np.ndarray, list)) for k in key)):
        raise ShapeError("getitem supports basic indexing only; use gather_rows for index arrays")
    data = a.data[key]
    return _result(np.array(data, copy=True), (a,), lambda g: (_embed(g, key, a.shape),), "getitem")


def _embed(g: Tensor, key, shape) -> Tensor:
    out = np.zeros(shape, dtype=g.dtype)
    out[key] = g.data
    return _result(out, (g,), lambda h: (getitem(h, key),), "embed")


# -- nonlinearities ------------------------------------------------------------
def relu(a: Tensor) -> Tensor:
    a = as_tensor(a)
    mask = (a.data > 0).astype(a.dtype)
    return _result(a.data * mask, (a,), lambda g: (mul(g, Tensor(mask)),), "relu")


def _elu_slope(a: Tensor, alpha: float, out=None) -> Tensor:
    """Derivative of ELU; its own backward is first-order only.

    ``out`` is the ELU output, from which ``alpha * exp(x)`` on the negative
    side is ``out + alpha``.
    """
    pos = a.data > 0
    if out is None:
        out = np.where(pos, a.data, alpha * np.expm1(np.minimum(a.data, 0)))
    neg = (out + a.dtype.type(alpha)).astype(a.dtype)
    slope = np.where(pos, a.dtype.type(1), neg)

    def bw(g):
        return (mul(g, Tensor(np.where(pos, a.dtype.type(0), neg))),)

    return _result(slope, (a,), bw, "elu_slope", second_order=False)


def elu(a: Tensor, alpha: float = 1.0) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.where(x > 0, x, np.expm1(np.minimum(x, 0)) * a.dtype.type(alpha)).astype(a.dtype)
    return _result(data, (a,), lambda g: (mul(g, _elu_slope(a, alpha, data)),), "elu")


def sigmoid(a: Tensor) -> Tensor:
    a = as_tensor(a)
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)
    out_holder = []

    def bw(g):
        s = out_holder[0]
        return (mul(g, mul(s, sub(1.0, s))),)

    out = _result(data, (a,), bw, "sigmoid")
    out_holder.append(out if out.requires_grad else Tensor(data))
    return out


def exp(a: Tensor) -> Tensor:
    a = as_tensor(a)
    holder = []
    out = _result(np.exp(a.data), (a,), lambda g: (mul(g, holder[0]),), "exp")
    holder.append(out)
    return out


def log(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data <= 0):
        raise FloatingPointError("log of a non-positive value")
    return _result(np.log(a.data), (a,), lambda g: (div(g, a),), "log")


def softplus(a: Tensor) -> Tensor:
    """``log(1 + exp(a))`` evaluated stably; the derivative is ``sigmoid(a)``."""
    a = as_tensor(a)
    x = a.data
    data = np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))
    return _result(data.astype(a.dtype), (a,), lambda g: (mul(g, sigmoid(a)),), "softplus")


def sqrt(a: Tensor) -> Tensor:
    a = as_tensor(a)
    if np.any(a.data < 0):
        raise FloatingPointError("sqrt of a negative value")
    holder = []
    out = _result(np.sqrt(a.data), (a,), lambda g: (div(scalar_mul(g, 0.5), holder[0]),), "sqrt")
    holder.append(out)
    return out


def abs_(a: Tensor) -> Tensor:
    a = as_tensor(a)
    sign = np.sign(a.data).astype(a.dtype)
    return _result(np.abs(a.data), (a,), lambda g: (mul(g, Tensor(sign)),), "abs")


# -- norms -------------------------------------------------------------------
def l1_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return sum_(abs_(a), axis, keepdims)


def squared_l2(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    return sum_(mul(a, a), axis, keepdims)


def l2_norm(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    """Euclidean norm with a zero subgradient where the norm vanishes."""
    a = as_tensor(a)
    axes = _norm_axes(axis, a.ndim)
    nk = np.sqrt(np.sum(a.data * a.data, axis=axes, keepdims=True))
    data = nk if keepdims else np.squeeze(nk, axis=axes)
    inv = np.divide(1.0, nk, out=np.zeros_like(nk), where=nk > 0)
    kept = nk.shape

    def bw(g):
        return (mul(mul(broadcast_to(reshape(g, kept), a.shape), a), Tensor(inv)),)

    return _result(np.asarray(data), (a,), bw, "l2_norm", second_order=False)


# -- backward sweep ----------------------------------------------------------
def _topo(root: Tensor):
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p is not None and id(p) not in seen:
                stack.append((p, False))
    return order[::-1]


def _sweep(root: Tensor, grad, create_graph: bool, retain_graph: bool, wanted=None):
    if not root.requires_grad:
        raise GradientError("root does not require grad (no recorded operations)")
    if root._consumed:
        raise GradientError("tape already consumed; pass retain_graph=True to backward twice")
    if grad is None:
        if root.size != 1:
            raise GradientError(f"backward root must be scalar, got shape {root.shape}")
        grad = np.ones_like(root.data)
    grad = grad if isinstance(grad, Tensor) else Tensor(np.asarray(grad, dtype=root.dtype))
    order = _topo(root)
    grads = {id(root): grad}
    leaves = {}
    ctx = enable_grad() if create_graph else no_grad()
    with ctx:
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if wanted is not None and id(node) in wanted:
                leaves[id(node)] = (node, g)
            if node._backward is None:
                if node._consumed:
                    raise GradientError(f"tape already consumed at op {node.op!r}")
                if wanted is None:
                    leaves[id(node)] = (node, g)
                continue
            if create_graph and not node.second_order:
                raise GradientError(f"op {node.op!r} does not support second-order gradients")
            pgrads = node._backward(g)
            for p, pg in zip(node._parents, pgrads):
                if pg is None or p is None:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else add(prev, pg)
    if not (retain_graph or create_graph):
        for node in order:
            if node._backward is not None:
                node._backward = None
                node._parents = ()
                node._consumed = True
    return leaves


def backward(root: Tensor, grad=None, retain_graph: bool = False, create_graph: bool = False):
    """Accumulate ``d root / d leaf`` into ``leaf.grad`` for every reachable leaf."""
    leaves = _sweep(root, grad, create_graph, retain_graph)
    for node, g in leaves.values():
        if create_graph:
            node.grad = g if node.grad is None else add(node.grad, g)
        else:
            node.grad = g.data.copy() if node.grad is None else node.grad + g.data


def grad(root: Tensor, inputs, create_graph: bool = False, retain_graph: bool = False,
         allow_unused: bool = True):
    """Gradients of ``root`` with respect to ``inputs`` (returned, not accumulated).

    With ``create_graph=True`` the returned tensors are themselves on the
    tape and can be differentiated again.
    """
    single = isinstance(inputs, Tensor)
    inputs = [inputs] if single else list(inputs)
    leaves = _sweep(root, None, create_graph, retain_graph, wanted={id(t) for t in inputs})
    out = []
    for t in inputs:
        if id(t) in leaves:
            out.append(leaves[id(t)][1])
        elif allow_unused:
            out.append(Tensor(np.zeros_like(t.data)))
        else:
            raise GradientError("an input is not reachable from the root")
    return out[0] if single else out
