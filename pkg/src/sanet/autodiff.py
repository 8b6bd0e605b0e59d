"""Minimal reverse-mode autodiff over dense numpy arrays.

Every trainable computation in the network is expressed through the ops in
this module. Ops record onto a tape as they execute (define-by-run); calling
``backward`` on a scalar result walks the recorded graph in exact reverse
topological order and accumulates gradients into ``Tensor.grad``.

Two float widths are supported: float64 for gradient checking and tests,
float32 for training throughput. The active width is a process-global set
via ``set_default_dtype``.
"""

from __future__ import annotations

import numpy as np


class AutodiffError(Exception):
    pass


class ShapeError(AutodiffError):
    """Operand shapes inconsistent with an op signature; names the node."""


class GraphError(AutodiffError):
    """Backward called on something that has no recorded forward graph."""


class NumericError(AutodiffError):
    """Non-finite values where finite ones are required; names the tensor."""


_DEFAULT_DTYPE = np.float64


def set_default_dtype(dtype) -> None:
    """Set the float width for newly created tensors ('float32'/'float64')."""
    global _DEFAULT_DTYPE
    dt = np.dtype(dtype)
    if dt not in (np.dtype(np.float32), np.dtype(np.float64)):
        raise ValueError(f"unsupported dtype {dtype}")
    _DEFAULT_DTYPE = dt.type


def get_default_dtype():
    return _DEFAULT_DTYPE


_node_counter = 0


def _next_node_id() -> int:
    global _node_counter
    _node_counter += 1
    return _node_counter


class Tensor:
    """A dense array plus the tape edge that produced it.

    Leaf tensors (inputs, parameters, constants) have no parents. Non-leaf
    tensors keep references to their parents and a backward rule, which
    together form the computation graph.
    """

    __slots__ = ("value", "grad", "requires_grad", "name",
                 "_parents", "_backward_fn", "_op")

    def __init__(self, value, requires_grad=False, name=None):
        self.value = np.asarray(value, dtype=_DEFAULT_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward_fn = None
        self._op = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    @property
    def size(self):
        return self.value.size

    def item(self) -> float:
        return float(self.value)

    def __repr__(self):
        tag = self.name or self._op or "leaf"
        return f"<Tensor {tag} shape={self.shape} grad={self.requires_grad}>"

    def label(self) -> str:
        return self.name if self.name is not None else (self._op or "leaf")

    # -- operators ----------------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self))

    def __radd__(self, other):
        return add(_wrap(other, self), self)

    def __sub__(self, other):
        return add(self, mul(_wrap(other, self), -1.0))

    def __rsub__(self, other):
        return add(_wrap(other, self), mul(self, -1.0))

    def __mul__(self, other):
        return mul(self, _wrap(other, self))

    def __rmul__(self, other):
        return mul(_wrap(other, self), self)

    def __truediv__(self, other):
        return div(self, _wrap(other, self))

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def backward(self, params=None):
        backward(self, params)


def _wrap(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    t = Tensor(np.asarray(x, dtype=like.value.dtype))
    return t


def constant(value, name=None) -> Tensor:
    return Tensor(value, requires_grad=False, name=name)


def _make(value, parents, backward_fn, op_name) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.value = value
    out.grad = None
    out.name = None
    out._op = f"{op_name}#{_next_node_id()}"
    if any(p.requires_grad or p._parents for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward_fn = None
    return out


def _shape_err(op, msg):
    raise ShapeError(f"{op}: {msg}")


# ---------------------------------------------------------------------------
# primitives
# ---------------------------------------------------------------------------

def _needs_grad(t: Tensor) -> bool:
    return t.requires_grad or bool(t._parents)


def matmul(a: Tensor, b: Tensor, transpose_a=False, transpose_b=False) -> Tensor:
    """2-D matrix product with optional operand transposes."""
    av, bv = a.value, b.value
    if av.ndim != 2 or bv.ndim != 2:
        _shape_err("matmul", f"operands must be 2-D, got {av.shape} x {bv.shape}")
    am = av.T if transpose_a else av
    bm = bv.T if transpose_b else bv
    if am.shape[1] != bm.shape[0]:
        _shape_err("matmul", f"inner extents differ: {am.shape} x {bm.shape}")
    out = am @ bm
    need_a, need_b = _needs_grad(a), _needs_grad(b)

    def bwd(g):
        # d(A@B) = (g @ B^T, A^T @ g), adjusted for the transpose flags
        ga = gb = None
        if need_a:
            ga = (bm @ g.T) if transpose_a else (g @ bm.T)
        if need_b:
            gb = (g.T @ am) if transpose_b else (am.T @ g)
        return ga, gb

    return _make(out, (a, b), bwd, "matmul")


def linear(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Fused x @ w + bias; the hot layer primitive."""
    xv, wv, bv = x.value, w.value, b.value
    if xv.ndim != 2 or wv.ndim != 2 or xv.shape[1] != wv.shape[0]:
        _shape_err("linear", f"bad operand shapes {xv.shape} x {wv.shape}")
    if bv.shape != (wv.shape[1],):
        _shape_err("linear", f"bias shape {bv.shape} != ({wv.shape[1]},)")
    out = xv @ wv
    out += bv
    need_x = _needs_grad(x)

    def bwd(g):
        gx = (g @ wv.T) if need_x else None
        return gx, xv.T @ g, g.sum(axis=0)

    return _make(out, (x, w, b), bwd, "linear")


def _suffix_broadcast_ok(ashape, bshape):
    # implicit broadcasting only over leading axes: b must be a suffix of a
    if len(bshape) > len(ashape):
        return False
    return bshape == ashape[len(ashape) - len(bshape):]


def _reduce_to(g, shape):
    # sum gradient over the broadcast leading axes
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    return g


def _binary(a, b, fwd, bwd_a, bwd_b, op):
    if not isinstance(b, Tensor):
        b = _wrap(b, a)
    av, bv = a.value, b.value
    if av.shape != bv.shape and not (
            _suffix_broadcast_ok(av.shape, bv.shape)
            or _suffix_broadcast_ok(bv.shape, av.shape)):
        _shape_err(op, f"shapes {av.shape} and {bv.shape} are not "
                       f"leading-axis broadcastable")
    out = fwd(av, bv)

    def bwd(g):
        return (_reduce_to(bwd_a(g, av, bv), av.shape),
                _reduce_to(bwd_b(g, av, bv), bv.shape))

    return _make(out, (a, b), bwd, op)


def add(a: Tensor, b: Tensor) -> Tensor:
    return _binary(a, b, lambda x, y: x + y,
                   lambda g, x, y: g, lambda g, x, y: g, "add")


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    return _binary(a, b, lambda x, y: x * y,
                   lambda g, x, y: g * y, lambda g, x, y: g * x, "mul")


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a)
    return _binary(a, b, lambda x, y: x / y,
                   lambda g, x, y: g / y,
                   lambda g, x, y: -g * x / (y * y), "div")


# subgradient floor below which the sqrt backward is clamped; sqrt is not
# differentiable at 0 and training-mode EMD hits exact zeros on perfect pairs
_SQRT_GRAD_FLOOR = 1e-12


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.value)

    def bwd(g):
        denom = np.maximum(out, _SQRT_GRAD_FLOOR)
        return (g * 0.5 / denom,)

    return _make(out, (a,), bwd, "sqrt")


def relu(a: Tensor, consume=False) -> Tensor:
    """Elementwise max(x, 0). ``consume=True`` overwrites the operand's
    buffer; only safe when the operand is a single-consumer intermediate
    whose backward rule does not read its own output (e.g. a linear layer
    feeding only this relu)."""
    if consume and a._parents:
        out = np.maximum(a.value, 0, out=a.value)
    else:
        out = np.maximum(a.value, 0)

    def bwd(g):
        # out > 0 exactly where the preactivation was > 0
        return (np.where(out > 0, g, 0),)

    return _make(out, (a,), bwd, "relu")


def softmax(a: Tensor, axis=-1) -> Tensor:
    v = a.value
    m = v.max(axis=axis, keepdims=True)
    out = np.exp(v - m)
    out /= out.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        tmp = g - dot
        tmp *= out
        return (tmp,)

    return _make(out, (a,), bwd, "softmax")


def reduce_sum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    out = a.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, a.value.shape).astype(g.dtype, copy=True),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.value.shape).astype(g.dtype, copy=True),)

    return _make(np.asarray(out), (a,), bwd, "reduce_sum")


def reduce_max(a: Tensor, axis: int, keepdims=False) -> Tensor:
    """Max along one axis; gradient routes to the first argmax on ties.

    The routing indices are recovered in the backward pass from the max
    values (an equality scan is cheaper than a strided argmax, and
    inference never pays for it).
    """
    v = a.value
    out = v.max(axis=axis, keepdims=keepdims)

    def bwd(g):
        m = out if keepdims else np.expand_dims(out, axis)
        idx = (v == m).argmax(axis=axis)
        gg = g if keepdims else np.expand_dims(g, axis)
        ga = np.zeros_like(v)
        np.put_along_axis(ga, np.expand_dims(idx, axis), gg, axis)
        return (ga,)

    return _make(out, (a,), bwd, "reduce_max")


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        _shape_err("concat", "needs at least one operand")
    ref = tensors[0].value.shape
    for t in tensors[1:]:
        s = t.value.shape
        if len(s) != len(ref) or any(
                i != axis and s[i] != ref[i] for i in range(len(ref))):
            _shape_err("concat", f"shape {s} incompatible with {ref} on axis {axis}")
    out = np.concatenate([t.value for t in tensors], axis=axis)
    sizes = [t.value.shape[axis] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def bwd(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tuple(tensors), bwd, "concat")


def slice_(a: Tensor, key) -> Tensor:
    """Basic (possibly strided) slicing; ``key`` is a slice or tuple of slices."""
    if not isinstance(key, tuple):
        key = (key,)
    if not all(isinstance(k, slice) for k in key):
        _shape_err("slice", "only slice objects are supported")
    out = a.value[key].copy()

    def bwd(g):
        ga = np.zeros_like(a.value)
        ga[key] = g
        return (ga,)

    return _make(out, (a,), bwd, "slice")


def gather(a: Tensor, indices, scatter_matrix=None) -> Tensor:
    """Select rows of ``a`` (axis 0) by an integer index array.

    Output shape is ``indices.shape + a.shape[1:]``. ``scatter_matrix`` may
    supply a precomputed sparse accumulation matrix (rows x flat-index) to
    speed up the backward scatter on hot paths; it must equal the one-hot
    selection operator for ``indices``.
    """
    idx = np.asarray(indices)
    if idx.size and (idx.min() < 0 or idx.max() >= a.value.shape[0]):
        _shape_err("gather", f"index out of range for extent {a.value.shape[0]}")
    out = a.value[idx.reshape(-1)].reshape(idx.shape + a.value.shape[1:])

    def bwd(g):
        gflat = g.reshape(idx.size, -1)
        if scatter_matrix is not None:
            ga = (scatter_matrix @ gflat).astype(a.value.dtype, copy=False)
        else:
            ga = np.zeros((a.value.shape[0], gflat.shape[1]), dtype=g.dtype)
            np.add.at(ga, idx.reshape(-1), gflat)
        return (ga.reshape(a.value.shape),)

    return _make(out, (a,), bwd, "gather")


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        _shape_err("reshape", f"cannot reshape {a.value.shape} to {shape}")

    def bwd(g):
        return (g.reshape(a.value.shape),)

    return _make(out, (a,), bwd, "reshape")


def broadcast(a: Tensor, axis: int, n: int) -> Tensor:
    """Materialize ``n`` copies of ``a`` along a new axis inserted at ``axis``."""
    if not 0 <= axis <= a.value.ndim:
        _shape_err("broadcast", f"axis {axis} out of range for rank {a.value.ndim}")
    expanded = np.expand_dims(a.value, axis)
    out = np.broadcast_to(expanded, expanded.shape[:axis] + (n,)
                          + expanded.shape[axis + 1:]).copy()

    def bwd(g):
        return (g.sum(axis=axis),)

    return _make(out, (a,), bwd, "broadcast")


# ---------------------------------------------------------------------------
# composites used throughout the model code
# ---------------------------------------------------------------------------

def reduce_min(a: Tensor, axis: int, keepdims=False) -> Tensor:
    return mul(reduce_max(mul(a, -1.0), axis, keepdims), -1.0)


def mean_all(a: Tensor) -> Tensor:
    return mul(reduce_sum(a), 1.0 / a.size)


def clamp_min(a: Tensor, floor: float) -> Tensor:
    # max(a, floor) == relu(a - floor) + floor
    return add(relu(add(a, -float(floor))), float(floor))


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _toposort(root: Tensor):
    order = []
    seen = set()
    stack = [(root, False)]
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
            if id(p) not in seen and p._parents:
                stack.append((p, False))
    return order  # parents before children


def backward(loss: Tensor, params=None) -> None:
    """Accumulate d(loss)/d(t) into ``t.grad`` for every tensor in the graph.

    ``loss`` must be scalar and must have been produced by recorded ops.
    Tensors in ``params`` that do not participate in the graph receive a
    zero gradient rather than None.
    """
    if loss.value.size != 1:
        raise GraphError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss._parents:
        raise GraphError("backward before forward: loss has no recorded graph")
    grads = {id(loss): np.ones_like(loss.value)}
    order = _toposort(loss)
    # accumulation never mutates in place: backward rules may return the
    # upstream gradient itself (add) or views of it (concat)
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        parent_grads = node._backward_fn(g)
        for p, pg in zip(node._parents, parent_grads):
            if pg is None or not (p.requires_grad or p._parents):
                continue
            pg = np.asarray(pg, dtype=p.value.dtype)
            if p._parents:
                key = id(p)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
            elif p.requires_grad:
                if p.grad is None:
                    p.grad = pg
                else:
                    p.grad = p.grad + pg
    if params is not None:
        for p in params:
            if p.requires_grad and p.grad is None:
                p.grad = np.zeros_like(p.value)


def zero_grads(tensors) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# numerical gradient reference (shared by the test suite)
# ---------------------------------------------------------------------------

def numerical_grad(f, x: np.ndarray, eps=1e-5) -> np.ndarray:
    """Central finite differences of scalar-valued ``f`` at ``x`` (float64)."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + eps
        hi = f(x)
        flat[i] = orig - eps
        lo = f(x)
        flat[i] = orig
        gf[i] = (hi - lo) / (2 * eps)
    return g
