"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

A Tensor wraps a numpy array and, when it is the result of an operation,
remembers its parents and how to push gradients back to them.  Calling
``backward()`` on a scalar result walks the recorded tape once; the tape is
single-use and gradients accumulate additively across multiple uses of the
same tensor.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Tensor",
    "TapeError",
    "ShapeMismatchError",
    "add",
    "sub",
    "mul",
    "scale",
    "neg",
    "matmul",
    "relu",
    "sigmoid",
    "tanh",
    "reshape",
    "concat",
    "tsum",
    "conv2d",
    "conv_transpose2d",
    "mse",
    "bce",
    "sq_norm_mean",
]

BCE_CLAMP = 1e-7


class TapeError(RuntimeError):
    """Backward called on a tape that was already consumed."""


class ShapeMismatchError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward_fn", "_consumed")

    def __init__(self, data, requires_grad=False, name=None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self.name = name
        self._parents = ()
        self._backward_fn = None
        self._consumed = False

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def zero_grad(self):
        self.grad = None

    def detach(self):
        return Tensor(self.data, requires_grad=False, name=self.name)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar (constants are treated as non-differentiable)
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        if np.isscalar(other):
            return scale(self, float(other))
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return self.__mul__(other)

    def __neg__(self):
        return neg(self)

    def backward(self):
        """Populate ``grad`` on every reachable tensor with requires_grad."""
        if self.data.size != 1:
            raise ValueError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if self._consumed:
            raise TapeError("backward() already called on this tape")

        order = _toposort(self)
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward_fn is not None and node.grad is not None:
                node._backward_fn(node.grad)
                node._consumed = True
        self._consumed = True


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _toposort(root):
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def _accum(t, g):
    if not t.requires_grad and t._backward_fn is None:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g, dtype=np.float64)
    else:
        t.grad = t.grad + g


def _make(data, parents, backward_fn):
    out = Tensor(data)
    if any(p.requires_grad or p._backward_fn is not None for p in parents):
        out.requires_grad = False  # only leaves carry requires_grad semantics
        out._parents = tuple(parents)
        out._backward_fn = backward_fn
    return out


def _unbroadcast(g, shape):
    """Reduce gradient g back to `shape` after a broadcasting op."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# ---------------------------------------------------------------- arithmetic

def add(a, b):
    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), back)


def sub(a, b):
    def back(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(-g, b.data.shape))

    return _make(a.data - b.data, (a, b), back)


def mul(a, b):
    def back(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), back)


def scale(a, c):
    c = float(c)

    def back(g):
        _accum(a, g * c)

    return _make(a.data * c, (a,), back)


def neg(a):
    return scale(a, -1.0)


def matmul(a, b):
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeMismatchError(f"matmul: {a.data.shape} @ {b.data.shape}")

    def back(g):
        _accum(a, g @ b.data.T)
        _accum(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), back)


# --------------------------------------------------------------- activations

def relu(a):
    mask = a.data > 0

    def back(g):
        _accum(a, g * mask)

    return _make(a.data * mask, (a,), back)


def sigmoid(a):
    y = 1.0 / (1.0 + np.exp(-a.data))

    def back(g):
        _accum(a, g * y * (1.0 - y))

    return _make(y, (a,), back)


def tanh(a):
    y = np.tanh(a.data)

    def back(g):
        _accum(a, g * (1.0 - y * y))

    return _make(y, (a,), back)


# -------------------------------------------------------------- shape/reduce

def reshape(a, shape):
    old = a.data.shape

    def back(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), back)


def concat(tensors, axis=1):
    tensors = list(tensors)
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, back)


def tsum(a):
    def back(g):
        _accum(a, np.broadcast_to(g, a.data.shape).astype(np.float64))

    return _make(a.data.sum(), (a,), back)


# -------------------------------------------------------------- convolutions

def _conv_out_extent(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv2d(x, w, b, stride=1, pad=0):
    """x: (N,C,H,W), w: (O,C,k,k), b: (O,).  Zero padding, square kernel."""
    N, C, H, W = x.data.shape
    O, Cw, k, _ = w.data.shape
    if Cw != C:
        raise ShapeMismatchError(f"conv2d: input channels {C} vs kernel channels {Cw}")
    s, p = stride, pad
    Ho, Wo = _conv_out_extent(H, k, s, p), _conv_out_extent(W, k, s, p)
    if Ho < 1 or Wo < 1:
        raise ShapeMismatchError(f"conv2d: {x.data.shape} too small for kernel {k} stride {s} pad {p}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (p, p), (p, p))) if p else x.data
    cols = np.empty((N, Ho, Wo, C, k, k))
    for a in range(k):
        for c in range(k):
            cols[:, :, :, :, a, c] = xp[:, :, a:a + s * Ho:s, c:c + s * Wo:s].transpose(0, 2, 3, 1)
    cols2d = cols.reshape(N * Ho * Wo, C * k * k)
    w2d = w.data.reshape(O, C * k * k).T
    y = (cols2d @ w2d).reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2) + b.data[None, :, None, None]

    def back(g):
        g2d = g.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
        _accum(w, (cols2d.T @ g2d).T.reshape(O, C, k, k))
        _accum(b, g.sum(axis=(0, 2, 3)))
        dcols = (g2d @ w2d.T).reshape(N, Ho, Wo, C, k, k)
        dxp = np.zeros((N, C, H + 2 * p, W + 2 * p))
        for a in range(k):
            for c in range(k):
                dxp[:, :, a:a + s * Ho:s, c:c + s * Wo:s] += dcols[:, :, :, :, a, c].transpose(0, 3, 1, 2)
        _accum(x, dxp[:, :, p:p + H, p:p + W] if p else dxp)

    return _make(y, (x, w, b), back)


def conv_transpose2d(x, w, b, stride=1, pad=0, out_pad=0):
    """x: (N,C,H,W), w: (C,O,k,k).  out = (in-1)*stride + k - 2*pad + out_pad."""
    N, C, H, W = x.data.shape
    Cw, O, k, _ = w.data.shape
    if Cw != C:
        raise ShapeMismatchError(f"conv_transpose2d: input channels {C} vs kernel channels {Cw}")
    s, p, op = stride, pad, out_pad
    Ho = (H - 1) * s + k - 2 * p + op
    Wo = (W - 1) * s + k - 2 * p + op
    if Ho < 1 or Wo < 1:
        raise ShapeMismatchError(f"conv_transpose2d: degenerate output for input {x.data.shape}")

    full_h, full_w = (H - 1) * s + k + op, (W - 1) * s + k + op
    x2d = x.data.transpose(0, 2, 3, 1).reshape(N * H * W, C)
    w2d = w.data.reshape(C, O * k * k)
    cols = (x2d @ w2d).reshape(N, H, W, O, k, k)
    yfull = np.zeros((N, O, full_h, full_w))
    for a in range(k):
        for c in range(k):
            yfull[:, :, a:a + s * H:s, c:c + s * W:s] += cols[:, :, :, :, a, c].transpose(0, 3, 1, 2)
    y = yfull[:, :, p:p + Ho, p:p + Wo] + b.data[None, :, None, None]

    def back(g):
        _accum(b, g.sum(axis=(0, 2, 3)))
        gfull = np.zeros((N, O, full_h, full_w))
        gfull[:, :, p:p + Ho, p:p + Wo] = g
        dcols = np.empty((N, H, W, O, k, k))
        for a in range(k):
            for c in range(k):
                dcols[:, :, :, :, a, c] = gfull[:, :, a:a + s * H:s, c:c + s * W:s].transpose(0, 2, 3, 1)
        dcols2d = dcols.reshape(N * H * W, O * k * k)
        _accum(x, (dcols2d @ w2d.T).reshape(N, H, W, C).transpose(0, 3, 1, 2))
        _accum(w, (x2d.T @ dcols2d).reshape(C, O, k, k))

    return _make(y, (x, w, b), back)


# -------------------------------------------------------------------- losses

def mse(pred, target):
    """Mean over all elements of the squared difference."""
    target = _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeMismatchError(f"mse: pred {pred.data.shape} vs target {target.data.shape}")
    d = sub(pred, target)
    return scale(tsum(mul(d, d)), 1.0 / pred.data.size)


def sq_norm_mean(pred, target):
    """Mean over the batch (leading axis) of the per-sample squared L2 norm."""
    target = _as_tensor(target)
    if pred.data.shape != target.data.shape:
        raise ShapeMismatchError(f"sq_norm_mean: pred {pred.data.shape} vs target {target.data.shape}")
    d = sub(pred, target)
    return scale(tsum(mul(d, d)), 1.0 / pred.data.shape[0])


def bce(prob, label):
    """Binary cross-entropy, mean over elements; probabilities clamped to
    [1e-7, 1-1e-7] (no gradient through the clamp)."""
    prob = _as_tensor(prob)
    lab = np.broadcast_to(np.asarray(label, dtype=np.float64), prob.data.shape)
    pc = np.clip(prob.data, BCE_CLAMP, 1.0 - BCE_CLAMP)
    inside = (prob.data > BCE_CLAMP) & (prob.data < 1.0 - BCE_CLAMP)
    n = prob.data.size
    val = -(lab * np.log(pc) + (1.0 - lab) * np.log(1.0 - pc)).sum() / n

    def back(g):
        dp = (-(lab / pc) + (1.0 - lab) / (1.0 - pc)) * inside / n
        _accum(prob, g * dp)

    return _make(val, (prob,), back)
