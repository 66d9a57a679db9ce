"""Small reverse-mode differentiation engine over float64 numpy arrays.

Only the operations needed to push a classification loss back through a
temporal convolutional network *and* the Gaussian-process posterior that
produces its input are provided. Every op returns a :class:`Node` that
records its inputs and a closure computing the vector-Jacobian product.

>>> x = leaf([1.0, 2.0, 3.0])
>>> loss = sum(relu(x - 2.0))
>>> grads = backward(loss)
>>> grads[x]
array([0., 0., 1.])
"""

import builtins

import numpy as np
from scipy.linalg import lapack, solve_triangular

from .errors import ContractError, FactorizationError, ShapeError

__all__ = [
    "Node", "leaf", "constant", "forward_op", "backward", "OPS",
    "add", "sub", "neg", "elementwise_mul", "matmul", "kron_structured_matvec",
    "exp", "log", "relu", "sigmoid", "softplus", "layer_norm",
    "causal_dilated_conv", "cholesky", "triangular_solve", "sum", "mean",
    "bce_with_logits", "reshape", "transpose", "index",
]


class Node:
    """A value in the computation graph.

    ``parents`` and ``op`` form the provenance record; ``grad`` is filled in
    by :func:`backward` for leaves and reads as zeros until then.
    """

    __slots__ = ("value", "parents", "op", "requires_grad", "name", "_vjp", "_grad")
    __array_ufunc__ = None

    def __init__(self, value, parents=(), op="leaf", vjp=None, requires_grad=None, name=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.op = op
        self._vjp = vjp
        if requires_grad is None:
            requires_grad = builtins.any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.name = name
        self._grad = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def grad(self):
        if self._grad is None:
            return np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g):
        self._grad = None if g is None else np.asarray(g, dtype=np.float64)

    @property
    def is_leaf(self):
        return not self.parents

    def __repr__(self):
        label = f" {self.name!r}" if self.name else ""
        return f"Node<{self.op}{label} shape={self.shape}>"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return elementwise_mul(self, other)

    def __rmul__(self, other):
        return elementwise_mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, key):
        return index(self, key)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None):
        return sum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def leaf(value, name=None, requires_grad=True):
    """Trainable input. Values are copied."""
    return Node(np.array(value, dtype=np.float64), requires_grad=requires_grad, name=name)


def constant(value, name=None):
    return Node(value, requires_grad=False, name=name)


def _as_node(x):
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op, a, b):
    try:
        return np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# ---------------------------------------------------------------- elementwise

def add(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("add", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return Node(a.value + b.value, (a, b), "add", vjp)


def sub(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("sub", a, b)

    def vjp(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return Node(a.value - b.value, (a, b), "sub", vjp)


def neg(a):
    a = _as_node(a)
    return Node(-a.value, (a,), "neg", lambda g: (-g,))


def elementwise_mul(a, b):
    a, b = _as_node(a), _as_node(b)
    _broadcast_shape("elementwise_mul", a, b)

    def vjp(g):
        return _unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)

    return Node(a.value * b.value, (a, b), "elementwise_mul", vjp)


def exp(a):
    a = _as_node(a)
    out = np.exp(a.value)
    return Node(out, (a,), "exp", lambda g: (g * out,))


def log(a):
    a = _as_node(a)
    return Node(np.log(a.value), (a,), "log", lambda g: (g / a.value,))


def relu(a):
    a = _as_node(a)
    mask = a.value > 0
    return Node(np.where(mask, a.value, 0.0), (a,), "relu", lambda g: (g * mask,))


def _sigmoid(x):
    # split by sign so neither branch overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a):
    a = _as_node(a)
    out = _sigmoid(np.atleast_1d(a.value)).reshape(a.shape)
    return Node(out, (a,), "sigmoid", lambda g: (g * out * (1.0 - out),))


def softplus(a):
    a = _as_node(a)
    x = a.value
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    slope = _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    return Node(out, (a,), "softplus", lambda g: (g * slope,))


def bce_with_logits(logits, labels):
    """Elementwise binary cross-entropy of ``sigmoid(logits)`` against ``labels``."""
    z = _as_node(logits)
    y = np.asarray(labels.value if isinstance(labels, Node) else labels, dtype=np.float64)
    try:
        y = np.broadcast_to(y, z.shape)
    except ValueError:
        raise ShapeError(f"bce_with_logits: labels {y.shape} vs logits {z.shape}") from None
    x = z.value
    out = np.maximum(x, 0.0) - x * y + np.log1p(np.exp(-np.abs(x)))
    p = _sigmoid(np.atleast_1d(x)).reshape(x.shape)
    return Node(out, (z,), "bce_with_logits", lambda g: (g * (p - y),))


# ---------------------------------------------------------------- reductions

def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def sum(a, axis=None):
    a = _as_node(a)
    axes = _norm_axes(axis, a.value.ndim)
    out = a.value.sum(axis=axes)

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape).copy(),)

    return Node(out, (a,), "sum", vjp)


def mean(a, axis=None):
    a = _as_node(a)
    axes = _norm_axes(axis, a.value.ndim)
    count = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    out = a.value.mean(axis=axes) if axes else a.value.copy()

    def vjp(g):
        return (np.broadcast_to(np.expand_dims(g, axes), a.shape) / count,)

    return Node(out, (a,), "mean", vjp)


# ---------------------------------------------------------------- structural

def reshape(a, shape):
    a = _as_node(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {a.shape} into {tuple(shape)}") from None
    return Node(out, (a,), "reshape", lambda g: (g.reshape(a.shape),))


def transpose(a, axes=None):
    a = _as_node(a)
    if axes is None:
        axes = tuple(reversed(range(a.value.ndim)))
    inverse = np.argsort(axes)
    return Node(np.transpose(a.value, axes), (a,), "transpose",
                lambda g: (np.transpose(g, inverse),))


def _fancy(key):
    items = key if isinstance(key, tuple) else (key,)
    return builtins.any(isinstance(k, (np.ndarray, list)) for k in items)


def index(a, key):
    """``a[key]`` for basic or integer-array keys; repeated indices accumulate."""
    a = _as_node(a)
    out = a.value[key]
    fancy = _fancy(key)

    def vjp(g):
        full = np.zeros_like(a.value)
        if fancy:
            np.add.at(full, key, g)
        else:
            full[key] += g
        return (full,)

    return Node(np.array(out, dtype=np.float64), (a,), "index", vjp)


# ---------------------------------------------------------------- linear algebra

def matmul(a, b):
    a, b = _as_node(a), _as_node(b)
    av, bv = a.value, b.value
    if av.ndim == 0 or bv.ndim == 0:
        raise ShapeError(f"matmul: scalar operand, shapes {av.shape} and {bv.shape}")
    k_a = av.shape[-1]
    k_b = bv.shape[0] if bv.ndim == 1 else bv.shape[-2]
    if k_a != k_b:
        raise ShapeError(f"matmul: inner dimensions differ, {av.shape} @ {bv.shape} ({k_a} != {k_b})")
    out = av @ bv

    def vjp(g):
        a2 = av[None, :] if av.ndim == 1 else av
        b2 = bv[:, None] if bv.ndim == 1 else bv
        g2 = g
        if av.ndim == 1:
            g2 = np.expand_dims(g2, -2)
        if bv.ndim == 1:
            g2 = np.expand_dims(g2, -1)
        ga = g2 @ np.swapaxes(b2, -1, -2)
        gb = np.swapaxes(a2, -1, -2) @ g2
        if av.ndim == 1:
            ga = ga.reshape(ga.shape[:-2] + (ga.shape[-1],))
        if bv.ndim == 1:
            gb = gb.reshape(gb.shape[:-2] + (gb.shape[-2],))
        return _unbroadcast(ga, av.shape), _unbroadcast(gb, bv.shape)

    return Node(out, (a, b), "matmul", vjp)


def kron_structured_matvec(a, b, v):
    """``(A ⊗ B) v`` without forming the Kronecker product.

    ``v`` is indexed ``i * B.cols + j``; the result is indexed
    ``p * B.rows + q`` (outer factor major), i.e. ``vec(A V Bᵀ)``.
    """
    a, b, v = _as_node(a), _as_node(b), _as_node(v)
    A, B = a.value, b.value
    if A.ndim != 2 or B.ndim != 2 or v.value.ndim != 1:
        raise ShapeError(f"kron_structured_matvec: expected 2-d, 2-d, 1-d, got "
                         f"{A.shape}, {B.shape}, {v.value.shape}")
    if v.value.size != A.shape[1] * B.shape[1]:
        raise ShapeError(f"kron_structured_matvec: vector length {v.value.size} != "
                         f"{A.shape[1]} * {B.shape[1]}")
    V = v.value.reshape(A.shape[1], B.shape[1])
    out = (A @ V @ B.T).ravel()

    def vjp(g):
        G = g.reshape(A.shape[0], B.shape[0])
        return G @ B @ V.T, G.T @ A @ V, (A.T @ G @ B).ravel()

    return Node(out, (a, b, v), "kron_structured_matvec", vjp)


def _phi(x):
    out = np.tril(x)
    out[np.diag_indices_from(out)] *= 0.5
    return out


def _chol_rev_symbolic(L, Lbar):
    P = _phi(L.T @ Lbar)
    S = P + P.T
    S = solve_triangular(L, S, lower=True, trans="T", check_finite=False)
    S = solve_triangular(L, S.T, lower=True, trans="T", check_finite=False).T
    return _phi(S)


def _chol_rev_blocked(L, Lbar, block=64):
    """Reverse-mode sensitivity of ``A = L Lᵀ`` by the blocked (level-3) recurrence.

    Walks the factor from the bottom-right in column blocks. Returns
    ``tril(Abar)``.
    """
    n = L.shape[0]
    Abar = np.tril(Lbar).copy()
    for k in range(n, 0, -block):
        j = max(0, k - block)
        R, D, B, C = L[j:k, :j], L[j:k, j:k], L[k:, :j], L[k:, j:k]
        Cbar = Abar[k:, j:k]
        if Cbar.size:
            Cbar[:] = solve_triangular(D, Cbar.T, lower=True, trans="T", check_finite=False).T
            Abar[k:, :j] -= Cbar @ R
            Abar[j:k, j:k] = np.tril(Abar[j:k, j:k]) - np.tril(Cbar.T @ C)
        Dbar = _chol_rev_symbolic(D, np.tril(Abar[j:k, j:k]))
        Abar[j:k, j:k] = Dbar
        Abar[j:k, :j] -= Cbar.T @ B + (Dbar + Dbar.T) @ R
    return np.tril(Abar)


def cholesky(a, block=64):
    """Lower Cholesky factor of the symmetric part of ``a``.

    Reading ``(A + Aᵀ) / 2`` makes the op a smooth function of every entry,
    so the returned gradient is symmetric.
    """
    a = _as_node(a)
    A = a.value
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ShapeError(f"cholesky: expected a square matrix, got {A.shape}")
    sym = 0.5 * (A + A.T)
    L, info = lapack.dpotrf(sym, lower=1, clean=1)
    if info > 0:
        raise FactorizationError(
            f"cholesky: matrix not positive definite (pivot {info - 1})", pivot=info - 1)
    if info < 0:
        raise FactorizationError(f"cholesky: illegal argument {-info}")

    def vjp(g):
        S = _chol_rev_blocked(L, g, block)
        return (0.5 * (S + S.T),)

    return Node(L, (a,), "cholesky", vjp)


def triangular_solve(l, b, trans=False):
    """Solve ``L X = B`` (or ``Lᵀ X = B`` with ``trans``) for lower-triangular ``L``."""
    l, b = _as_node(l), _as_node(b)
    L, B = l.value, b.value
    if L.ndim != 2 or L.shape[0] != L.shape[1]:
        raise ShapeError(f"triangular_solve: factor must be square, got {L.shape}")
    if B.ndim not in (1, 2) or B.shape[0] != L.shape[0]:
        raise ShapeError(f"triangular_solve: rhs {B.shape} incompatible with factor {L.shape}")
    X = solve_triangular(L, B, lower=True, trans="T" if trans else "N", check_finite=False)

    def vjp(g):
        Bbar = solve_triangular(L, g, lower=True, trans="N" if trans else "T", check_finite=False)
        X2, Bb2 = (X[:, None], Bbar[:, None]) if X.ndim == 1 else (X, Bbar)
        Lbar = -(X2 @ Bb2.T) if trans else -(Bb2 @ X2.T)
        return np.tril(Lbar), Bbar

    return Node(X, (l, b), "triangular_solve", vjp)


# ---------------------------------------------------------------- network ops

def layer_norm(x, gain, bias, axis=-1, eps=1e-5):
    """Normalise ``x`` over ``axis`` (population variance), then scale and shift.

    ``gain`` and ``bias`` have length ``x.shape[axis]``.
    """
    x, gain, bias = _as_node(x), _as_node(gain), _as_node(bias)
    xv = x.value
    axis = axis % xv.ndim
    n = xv.shape[axis]
    if gain.shape != (n,) or bias.shape != (n,):
        raise ShapeError(f"layer_norm: gain {gain.shape} / bias {bias.shape} must be ({n},)")
    bshape = [1] * xv.ndim
    bshape[axis] = n
    g_v = gain.value.reshape(bshape)
    mu = xv.mean(axis=axis, keepdims=True)
    xc = xv - mu
    inv = 1.0 / np.sqrt((xc * xc).mean(axis=axis, keepdims=True) + eps)
    xhat = xc * inv
    out = xhat * g_v + bias.value.reshape(bshape)
    other = tuple(i for i in range(xv.ndim) if i != axis)

    def vjp(g):
        dxhat = g * g_v
        dx = inv * (dxhat - dxhat.mean(axis=axis, keepdims=True)
                    - xhat * (dxhat * xhat).mean(axis=axis, keepdims=True))
        return dx, (g * xhat).sum(axis=other), g.sum(axis=other)

    return Node(out, (x, gain, bias), "layer_norm", vjp)


def causal_dilated_conv(x, kernel, dilation=1):
    """Causal dilated convolution along the last axis.

    ``x`` is ``(..., C_in, T)`` and ``kernel`` is ``(C_out, C_in, W)``; tap
    ``j`` multiplies ``x[t - dilation * j]``, with zeros before the start.
    Output is ``(..., C_out, T)``.
    """
    x, kernel = _as_node(x), _as_node(kernel)
    xv, K = x.value, kernel.value
    if dilation < 1:
        raise ContractError(f"causal_dilated_conv: dilation must be >= 1, got {dilation}")
    if K.ndim != 3 or xv.ndim < 2 or xv.shape[-2] != K.shape[1]:
        raise ShapeError(f"causal_dilated_conv: input {xv.shape} incompatible with kernel {K.shape}")
    T = xv.shape[-1]
    W = K.shape[2]
    pad = (W - 1) * dilation
    xp = np.concatenate([np.zeros(xv.shape[:-1] + (pad,)), xv], axis=-1)
    taps = [xp[..., pad - dilation * j: pad - dilation * j + T] for j in range(W)]
    out = np.zeros(xv.shape[:-2] + (K.shape[0], T))
    for j in range(W):
        out += K[:, :, j] @ taps[j]

    def vjp(g):
        gxp = np.zeros_like(xp)
        gK = np.zeros_like(K)
        lead = tuple(range(g.ndim - 2))
        for j in range(W):
            start = pad - dilation * j
            gxp[..., start:start + T] += K[:, :, j].T @ g
            gK[:, :, j] = (g @ np.swapaxes(taps[j], -1, -2)).sum(axis=lead) if lead else g @ taps[j].T
        return gxp[..., pad:], gK

    return Node(out, (x, kernel), "causal_dilated_conv", vjp)


OPS = {
    "matmul": matmul,
    "kron_structured_matvec": kron_structured_matvec,
    "add": add,
    "sub": sub,
    "neg": neg,
    "elementwise_mul": elementwise_mul,
    "exp": exp,
    "log": log,
    "relu": relu,
    "sigmoid": sigmoid,
    "softplus": softplus,
    "layer_norm": layer_norm,
    "causal_dilated_conv": causal_dilated_conv,
    "cholesky": cholesky,
    "triangular_solve": triangular_solve,
    "sum": sum,
    "mean": mean,
    "bce_with_logits": bce_with_logits,
    "reshape": reshape,
    "transpose": transpose,
    "index": index,
}


def forward_op(kind, *inputs, **attrs):
    """Dispatch by op name, e.g. ``forward_op("relu", x)``."""
    try:
        fn = OPS[kind]
    except KeyError:
        raise ContractError(f"unknown op {kind!r}") from None
    return fn(*inputs, **attrs)


def _topological(root):
    order, seen = [], set()
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
        for p in reversed(node.parents):
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss):
    """Accumulate ``d loss / d leaf`` into every trainable leaf reachable from ``loss``.

    Returns a dict ``{leaf: gradient}``. Gradients are recomputed from
    scratch on every call (no accumulation across calls).
    """
    if loss.value.size != 1:
        raise ContractError(f"backward: loss must be scalar, got shape {loss.shape}")
    order = _topological(loss)
    leaves = [n for n in order if n.is_leaf and n.requires_grad]
    for n in leaves:
        n.grad = None
    grads = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None or not node.requires_grad:
            continue
        if node.is_leaf:
            node.grad = g
            continue
        for parent, pg in zip(node.parents, node._vjp(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else pg
    return {n: n.grad for n in leaves}
