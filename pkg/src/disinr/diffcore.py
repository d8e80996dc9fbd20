"""Minimal reverse-mode differentiation over dense numpy arrays.

Every op returns a new :class:`Tensor` that remembers its parents and a
backward rule mapping the output gradient to one gradient per parent.
Calling :meth:`Tensor.backward` on a scalar orders the recorded graph
topologically (the tape) and walks it once in reverse.  Only leaves, i.e.
tensors created by the user with ``requires_grad=True``, accumulate into
``.grad``; intermediate gradients live only for the duration of the sweep.

Broadcasting is intentionally restricted to equal shapes and
scalar-vs-tensor, plus the row-wise bias of :func:`linear`.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import DimensionError, EvaluationError

_DTYPE = np.float32
_DEBUG = False
_GRAD_ENABLED = True


def get_dtype():
    return _DTYPE


def set_precision(bits: int) -> None:
    """Select 32- or 64-bit reals for tensors created from now on."""
    global _DTYPE
    if bits == 32:
        _DTYPE = np.float32
    elif bits == 64:
        _DTYPE = np.float64
    else:
        raise ValueError(f"precision must be 32 or 64, got {bits}")


@contextlib.contextmanager
def precision(bits: int):
    previous = _DTYPE
    set_precision(bits)
    try:
        yield
    finally:
        globals()["_DTYPE"] = previous


def set_debug(flag: bool) -> None:
    """When on, every op checks its output for NaN/Inf and raises."""
    global _DEBUG
    _DEBUG = bool(flag)


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording a graph."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=_DTYPE)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self._backward is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Tensor{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into every reachable leaf's ``.grad``."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar output")
            grad = np.ones_like(self.data)
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(build_tape(self)):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
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

    # operator sugar; the functional forms below are the reference API
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return scale(self, -1.0)


def build_tape(root: Tensor) -> list[Tensor]:
    """Return the graph under ``root`` in topological order (inputs first).

    Each node appears once; traversal order is fixed by parent order so
    repeated sweeps are reproducible.
    """
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
        for parent in reversed(node._parents):
            if id(parent) not in seen and parent.requires_grad:
                stack.append((parent, False))
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def make_node(data, parents, backward) -> Tensor:
    """Wrap an op result; ``backward(g)`` must return one gradient per parent."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    if _DEBUG and not np.all(np.isfinite(data)):
        raise EvaluationError("non-finite value produced by op")
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _check_broadcast(a: Tensor, b: Tensor, opname: str):
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(f"{opname}: incompatible shapes {a.shape} and {b.shape}")


def _reduce_to(g, t: Tensor):
    if g.shape == t.shape:
        return g
    return np.asarray(g.sum(), dtype=g.dtype).reshape(t.shape)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        return (g @ bd.T if a.requires_grad else None,
                ad.T @ g if b.requires_grad else None)

    return make_node(ad @ bd, (a, b), backward)


def linear(x, weight, bias=None) -> Tensor:
    """Affine map ``x @ weight + bias`` with the bias broadcast over rows."""
    x, weight = as_tensor(x), as_tensor(weight)
    if x.data.ndim != 2 or weight.data.ndim != 2 or x.shape[1] != weight.shape[0]:
        raise DimensionError(f"linear: cannot apply {weight.shape} to {x.shape}")
    if bias is None:
        return matmul(x, weight)
    xd, wd = x.data, weight.data
    out = xd @ wd
    bias = as_tensor(bias)
    if bias.shape != (wd.shape[1],):
        raise DimensionError(f"linear: bias {bias.shape} does not match {wd.shape}")
    out += bias.data

    def backward(g):
        return (g @ wd.T if x.requires_grad else None,
                xd.T @ g if weight.requires_grad else None,
                g.sum(axis=0) if bias.requires_grad else None)

    return make_node(out, (x, weight, bias), backward)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "add")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(g, b)

    return make_node(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "sub")

    def backward(g):
        return _reduce_to(g, a), _reduce_to(-g, b)

    return make_node(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (_reduce_to(g * bd, a) if a.requires_grad else None,
                _reduce_to(g * ad, b) if b.requires_grad else None)

    return make_node(ad * bd, (a, b), backward)


def scale(x, factor: float) -> Tensor:
    x = as_tensor(x)
    factor = x.data.dtype.type(factor)
    return make_node(x.data * factor, (x,), lambda g: (g * factor,))


def relu(x) -> Tensor:
    x = as_tensor(x)
    out = np.maximum(x.data, 0)
    return make_node(out, (x,), lambda g: (g * (out > 0),))


def sin(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    return make_node(np.sin(xd), (x,), lambda g: (g * np.cos(xd),))


_ELEMENTWISE = {"add": add, "sub": sub, "mul": mul, "relu": relu, "sin": sin, "scale": scale}


def elementwise(kind: str, *args) -> Tensor:
    """Dispatch by name to add/sub/mul/relu/sin/scale."""
    try:
        fn = _ELEMENTWISE[kind]
    except KeyError:
        raise ValueError(f"unknown elementwise op {kind!r}") from None
    return fn(*args)


def concat(a, b) -> Tensor:
    """Stack columns: ``a``'s columns first, then ``b``'s."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[0] != b.shape[0]:
        raise DimensionError(f"concat: row counts differ, {a.shape} vs {b.shape}")
    p = a.shape[1]
    return make_node(np.concatenate([a.data, b.data], axis=1), (a, b),
                     lambda g: (g[:, :p], g[:, p:]))


def slice_cols(x, start: int, stop: int) -> Tensor:
    x = as_tensor(x)
    if x.data.ndim != 2:
        raise DimensionError("slice_cols expects a matrix")
    shape, dtype = x.shape, x.data.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[:, start:stop] = g
        return (full,)

    return make_node(x.data[:, start:stop].copy(), (x,), backward)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(str(exc)) from None
    return make_node(out, (x,), lambda g: (g.reshape(old),))


def total(x) -> Tensor:
    x = as_tensor(x)
    shape = x.shape
    return make_node(np.asarray(x.data.sum()), (x,),
                     lambda g: (np.broadcast_to(g, shape).copy(),))


def mean(x) -> Tensor:
    x = as_tensor(x)
    shape, n = x.shape, x.size
    return make_node(np.asarray(x.data.mean()), (x,),
                     lambda g: (np.broadcast_to(g / n, shape).astype(x.data.dtype),))


def l1_loss(pred, target) -> Tensor:
    """Mean absolute deviation; the subgradient uses sign(0) = 0."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise DimensionError(f"l1_loss: {pred.shape} vs {target.shape}")
    resid = pred.data - target.data
    n = resid.size
    dtype = pred.data.dtype

    def backward(g):
        d = np.sign(resid) * (g / n)
        return d, (-d if target.requires_grad else None)

    return make_node(np.asarray(np.abs(resid).mean(), dtype=dtype), (pred, target), backward)


def linear_operator(op, x) -> Tensor:
    """Apply a forward operator; the backward pass is its adjoint.

    ``op`` needs ``image_shape``, ``forward(array)`` and ``adjoint(array)``.
    """
    x = as_tensor(x)
    if tuple(x.shape) != tuple(op.image_shape):
        raise DimensionError(f"operator expects {tuple(op.image_shape)}, got {x.shape}")
    dtype = x.data.dtype
    out = np.asarray(op.forward(x.data), dtype=dtype)
    return make_node(out, (x,), lambda g: (np.asarray(op.adjoint(g), dtype=dtype),))


def _leaves(params):
    tensors = params.tensors() if hasattr(params, "tensors") else list(params)
    return [t for t in tensors if isinstance(t, Tensor)]


def grad_check(f, params, h: float = 1e-3, n_coords: int = 32, seed: int = 0,
               nonzero_fraction: float = 0.5) -> float:
    """Compare analytic and central-difference gradients of a scalar function.

    ``f`` takes no arguments and returns a scalar Tensor built from ``params``
    (a ParameterSet or an iterable of Tensors).  Coordinates are sampled
    uniformly over all parameters, with ``nonzero_fraction`` of them drawn
    from entries whose analytic gradient is nonzero so that sparse
    parameters (hash tables) are actually exercised.

    Returns ``max |analytic - numeric| / max(1, |numeric|)``.
    """
    leaves = _leaves(params)
    for t in leaves:
        t.grad = None
    loss = f()
    if not np.isfinite(loss.data).all():
        raise EvaluationError("f is not finite at the base point")
    loss.backward()
    analytic = [t.grad if t.grad is not None else np.zeros_like(t.data) for t in leaves]

    sizes = np.array([t.size for t in leaves])
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    flat_grad = np.concatenate([g.ravel() for g in analytic])
    rng = np.random.default_rng(seed)
    nonzero = np.flatnonzero(flat_grad)
    n_nz = min(len(nonzero), int(round(n_coords * nonzero_fraction)))
    picks = list(rng.choice(nonzero, size=n_nz, replace=False)) if n_nz else []
    picks += list(rng.integers(0, offsets[-1], size=n_coords - n_nz))

    worst = 0.0
    with no_grad():
        for flat in picks:
            which = int(np.searchsorted(offsets, flat, side="right") - 1)
            tensor, k = leaves[which], int(flat - offsets[which])
            view = tensor.data.reshape(-1)
            original = view[k].copy()
            view[k] = original + h
            up_x = float(view[k])
            f_up = float(f().data)
            view[k] = original - h
            down_x = float(view[k])
            f_down = float(f().data)
            view[k] = original
            if not (np.isfinite(f_up) and np.isfinite(f_down)):
                raise EvaluationError("f is not finite under perturbation")
            numeric = (f_up - f_down) / (up_x - down_x)
            err = abs(float(flat_grad[flat]) - numeric) / max(1.0, abs(numeric))
            worst = max(worst, err)
    return worst
