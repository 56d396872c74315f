"""Dense tensors with reverse-mode automatic differentiation.

Deliberately small: 2-D matmul, elementwise arithmetic, reductions,
basic slicing, and the fused ops the rest of the package needs
(softmax, layer-norm, SiLU, L2 norm). float32 by default; float64 is
used by the gradient-check suite. Broadcasting is limited to
scalar-with-tensor — anything else needs an explicit reshape or tile.

Tensors are never mutated in place except by the optimizer step, which
reassigns `.data` wholesale, so recorded graphs stay valid. Graph
recording and backward are single-threaded per training step; frozen
tensors are safe for concurrent read-only use.
"""

from __future__ import annotations

import numpy as np

FLOAT_DTYPES = (np.float32, np.float64)
DEFAULT_DTYPE = np.float32


class DimensionError(ValueError):
    """Shape, dtype, or axis mismatch between operands."""


class GraphError(RuntimeError):
    """Misuse of the recorded compute graph."""


class _Node:
    """One recorded op: parent tensors plus the vector-Jacobian closure."""

    __slots__ = ("parents", "vjp", "consumed")

    def __init__(self, parents, vjp):
        self.parents = parents
        self.vjp = vjp  # grad_out -> tuple of per-parent grads (or None)
        self.consumed = False


def _as_array(data, dtype):
    if dtype is not None:
        return np.asarray(data, dtype=dtype)
    # Typed float arrays keep their precision; everything else defaults to 32-bit.
    if isinstance(data, np.ndarray) and data.dtype in FLOAT_DTYPES:
        return data
    return np.asarray(data, dtype=DEFAULT_DTYPE)


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_node")

    def __init__(self, data, dtype=None, requires_grad=False):
        self.data = _as_array(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None

    # -- basics ------------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        if self.size != 1:
            raise DimensionError(f"item() needs a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return np.array(self.data, copy=True)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.dtype)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.data.dtype.name}{flag})"

    # -- graph plumbing ----------------------------------------------------

    def _tracked(self) -> bool:
        return self.requires_grad or self._node is not None

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into every tracked leaf's .grad.

        `self` must be a scalar with a recorded graph; running backward a
        second time on the same graph is an error. Frozen leaves
        (requires_grad=False) are never touched.
        """
        if self.size != 1:
            raise GraphError(f"backward() needs a scalar loss, got shape {self.shape}")
        if self._node is None:
            raise GraphError("backward() needs a recorded graph; this tensor is a leaf")

        # Iterative topological order (graphs can be deep).
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                order.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            if t._node is not None:
                if t._node.consumed:
                    raise GraphError("backward() already ran on this graph; re-record first")
                for p in t._node.parents:
                    if p._tracked() and id(p) not in seen:
                        stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for t in reversed(order):
            node = t._node
            if node is None:
                continue
            g = grads.pop(id(t), None)
            node.consumed = True
            if g is None:
                continue
            parent_grads = node.vjp(g)
            for p, pg in zip(node.parents, parent_grads):
                if pg is None or not p._tracked():
                    continue
                if p._node is None:
                    if p.requires_grad:
                        p.grad = pg if p.grad is None else p.grad + pg
                else:
                    acc = grads.get(id(p))
                    grads[id(p)] = pg if acc is None else acc + pg


def _result(data: np.ndarray, parents: tuple[Tensor, ...], vjp) -> Tensor:
    out = Tensor(data, dtype=data.dtype)
    if any(p._tracked() for p in parents):
        out._node = _Node(parents, vjp)
    return out


def _coerce(t: Tensor, other) -> Tensor:
    if isinstance(other, Tensor):
        return other
    return Tensor(np.asarray(other, dtype=t.dtype))


def _check_pair(a: Tensor, b: Tensor, op: str) -> None:
    if a.dtype != b.dtype:
        raise DimensionError(f"{op}: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.shape != b.shape and a.size != 1 and b.size != 1:
        raise DimensionError(
            f"{op}: shapes {a.shape} and {b.shape} differ and neither is scalar"
        )


def _operand(t: Tensor) -> np.ndarray:
    # Scalars participate via () so numpy broadcasts them against anything.
    return t.data.reshape(()) if t.size == 1 and t.ndim > 0 else t.data


def _fit(shape: tuple, g: np.ndarray) -> np.ndarray:
    """Reduce a broadcasted gradient back to the operand's shape."""
    if g.shape == shape:
        return g
    return g.sum(dtype=g.dtype).reshape(shape)


# -- arithmetic --------------------------------------------------------------


def add(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _check_pair(a, b, "add")
    data = _operand(a) + _operand(b)

    def vjp(g):
        return _fit(a.shape, g), _fit(b.shape, g)

    return _result(data, (a, b), vjp)


def sub(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _check_pair(a, b, "sub")
    data = _operand(a) - _operand(b)

    def vjp(g):
        return _fit(a.shape, g), _fit(b.shape, -g)

    return _result(data, (a, b), vjp)


def mul(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _check_pair(a, b, "mul")
    da, db = _operand(a), _operand(b)
    data = da * db

    def vjp(g):
        return _fit(a.shape, g * db), _fit(b.shape, g * da)

    return _result(data, (a, b), vjp)


def div(a: Tensor, b) -> Tensor:
    b = _coerce(a, b)
    _check_pair(a, b, "div")
    da, db = _operand(a), _operand(b)
    data = da / db

    def vjp(g):
        return _fit(a.shape, g / db), _fit(b.shape, -g * da / (db * db))

    return _result(data, (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a plain Python scalar (no gradient to the scalar)."""
    c = float(c)
    return _result(a.data * np.asarray(c, dtype=a.dtype), (a,), lambda g: (g * c,))


# -- linear algebra -----------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if not isinstance(b, Tensor):
        raise DimensionError("matmul: both operands must be tensors")
    if a.dtype != b.dtype:
        raise DimensionError(f"matmul: dtype mismatch {a.dtype} vs {b.dtype}")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    data = a.data @ b.data

    def vjp(g):
        return g @ b.data.T, a.data.T @ g

    return _result(data, (a, b), vjp)


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))

    def vjp(g):
        return (g.transpose(inv),)

    return _result(a.data.transpose(axes), (a,), vjp)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    data = a.data.reshape(shape)
    src = a.shape

    def vjp(g):
        return (g.reshape(src),)

    return _result(data, (a,), vjp)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise DimensionError("concat: need at least one tensor")
    dt = tensors[0].dtype
    for t in tensors:
        if t.dtype != dt:
            raise DimensionError(f"concat: dtype mismatch {dt} vs {t.dtype}")
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]

    def vjp(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(splits)

    return _result(data, tuple(tensors), vjp)


# -- slicing ------------------------------------------------------------------


def _check_key(key) -> tuple:
    if not isinstance(key, tuple):
        key = (key,)
    for k in key:
        if not isinstance(k, slice):
            raise DimensionError("slicing supports slice objects only (no int indexing)")
    return key


def slice_(a: Tensor, key) -> Tensor:
    key = _check_key(key)
    data = a.data[key]

    def vjp(g):
        full = np.zeros_like(a.data)
        full[key] = g
        return (full,)

    return _result(data, (a,), vjp)


def assign_slice(base: Tensor, key, patch: Tensor) -> Tensor:
    """Functional slice assignment: a copy of `base` with `base[key] = patch`."""
    key = _check_key(key)
    if base.dtype != patch.dtype:
        raise DimensionError(f"assign_slice: dtype mismatch {base.dtype} vs {patch.dtype}")
    target_shape = base.data[key].shape
    if target_shape != patch.shape:
        raise DimensionError(
            f"assign_slice: slice shape {target_shape} != patch shape {patch.shape}"
        )
    data = base.data.copy()
    data[key] = patch.data

    def vjp(g):
        g_base = g.copy()
        g_base[key] = 0
        return g_base, g[key].copy()

    return _result(data, (base, patch), vjp)


# -- reductions ---------------------------------------------------------------


def _restore_axis(g: np.ndarray, shape: tuple, axis, keepdims: bool) -> np.ndarray:
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)), shape)
    if not keepdims:
        g = np.expand_dims(g, axis)
    return np.broadcast_to(g, shape)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        return (_restore_axis(g, a.shape, axis, keepdims).astype(a.dtype, copy=False),)

    return _result(np.asarray(data, dtype=a.dtype), (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else a.shape[axis]
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def vjp(g):
        spread = _restore_axis(g, a.shape, axis, keepdims).astype(a.dtype, copy=False)
        return (spread / count,)

    return _result(np.asarray(data, dtype=a.dtype), (a,), vjp)


# -- fused ops ----------------------------------------------------------------


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    """Numerically stabilized softmax along one axis."""
    if not -a.ndim <= axis < a.ndim:
        raise DimensionError(f"softmax: axis {axis} invalid for shape {a.shape}")
    if a.shape[axis] == 0:
        raise DimensionError(f"softmax: empty axis {axis} in shape {a.shape}")
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return (out * (g - dot),)

    return _result(out, (a,), vjp)


def l2_norm(a: Tensor) -> Tensor:
    """sqrt(sum(x^2)) over all elements, as a scalar tensor."""
    norm = np.sqrt((a.data.astype(a.dtype) ** 2).sum())
    norm = np.asarray(norm, dtype=a.dtype)

    def vjp(g):
        if norm == 0:
            # Subgradient choice at the origin.
            return (np.zeros_like(a.data),)
        return (g * a.data / norm,)

    return _result(norm.reshape(()), (a,), vjp)


def layer_norm(a: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis, then apply a learned affine map."""
    d = a.shape[-1]
    if gamma.shape != (d,) or beta.shape != (d,):
        raise DimensionError(
            f"layer_norm: affine params must have shape ({d},), "
            f"got {gamma.shape} and {beta.shape}"
        )
    mu = a.data.mean(axis=-1, keepdims=True)
    centered = a.data - mu
    var = (centered**2).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    normed = centered * inv
    out = normed * gamma.data + beta.data

    def vjp(g):
        dy = g * gamma.data
        dx = inv * (
            dy
            - dy.mean(axis=-1, keepdims=True)
            - normed * (dy * normed).mean(axis=-1, keepdims=True)
        )
        lead = tuple(range(a.ndim - 1))
        dgamma = (g * normed).sum(axis=lead)
        dbeta = g.sum(axis=lead)
        return dx.astype(a.dtype, copy=False), dgamma, dbeta

    return _result(out.astype(a.dtype, copy=False), (a, gamma, beta), vjp)


def silu(a: Tensor) -> Tensor:
    """x * sigmoid(x)."""
    s = 1.0 / (1.0 + np.exp(-a.data))
    out = a.data * s

    def vjp(g):
        return (g * s * (1.0 + a.data * (1.0 - s)),)

    return _result(out, (a,), vjp)


# -- construction helpers -----------------------------------------------------


def zeros(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.zeros(shape, dtype=dtype))


def ones(shape, dtype=DEFAULT_DTYPE) -> Tensor:
    return Tensor(np.ones(shape, dtype=dtype))


def tile_rows(row: Tensor, n: int) -> Tensor:
    """Repeat a length-d vector into an (n, d) matrix, differentiably.

    Implemented as ones(n,1) @ row so no general broadcasting is needed.
    """
    if row.ndim == 1:
        row = reshape(row, (1, row.shape[0]))
    return matmul(ones((n, 1), dtype=row.dtype), row)


# -- method sugar -------------------------------------------------------------

Tensor.__add__ = lambda self, o: add(self, o)
Tensor.__radd__ = lambda self, o: add(self, o)
Tensor.__sub__ = lambda self, o: sub(self, o)
Tensor.__rsub__ = lambda self, o: add(neg(self), o)
Tensor.__mul__ = lambda self, o: mul(self, o)
Tensor.__rmul__ = lambda self, o: mul(self, o)
Tensor.__truediv__ = lambda self, o: div(self, o)
Tensor.__neg__ = lambda self: neg(self)
Tensor.__matmul__ = lambda self, o: matmul(self, o)
Tensor.__getitem__ = lambda self, key: slice_(self, key)
Tensor.reshape = lambda self, shape: reshape(self, shape)
Tensor.transpose = lambda self, axes=None: transpose(self, axes)
Tensor.sum = lambda self, axis=None, keepdims=False: tsum(self, axis, keepdims)
Tensor.mean = lambda self, axis=None, keepdims=False: mean(self, axis, keepdims)
Tensor.softmax = lambda self, axis=-1: softmax(self, axis)
