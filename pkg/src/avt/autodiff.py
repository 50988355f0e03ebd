"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the handful of primitives needed by feed-forward classifiers and
interval bound propagation are provided.  Every op builds a node that
remembers its parents and a closure mapping the upstream gradient to
gradients for those parents; :func:`backward` walks the recorded graph
in reverse topological order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad=False, _parents=(), _backward=None, op=""):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        tag = f", op={self.op}" if self.op else ""
        return f"Tensor(shape={self.shape}{tag})"

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only supported by a constant")
        return mul(self, 1.0 / np.asarray(other, dtype=np.float64))

    def sum(self, axis=None):
        return sum_(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents, backward_fn, op):
    parents = tuple(parents)
    if not any(p.requires_grad for p in parents):
        return Tensor(data, op=op)
    return Tensor(data, True, parents, backward_fn, op)


def _unbroadcast(grad, shape):
    """Sum ``grad`` down to ``shape`` (undo numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


# -- elementwise ----------------------------------------------------------

def add(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(a.data + b.data, (a, b), backward, "add")


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _node(a.data - b.data, (a, b), backward, "sub")


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(a.data * b.data, (a, b), backward, "mul")


def neg(a):
    return _node(-a.data, (a,), lambda g: (-g,), "neg")


def abs_(a):
    # d|w|/dw taken as sign(w); 0 at w == 0
    return _node(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(x):
    """Elementwise max(0, x); the subgradient at exactly 0 is 0.  NaN propagates."""
    x = as_tensor(x)
    mask = x.data > 0
    return _node(np.maximum(x.data, 0.0), (x,), lambda g: (g * mask,), "relu")


def where(cond, a, b):
    """Select from ``a`` where the constant boolean ``cond`` holds, else ``b``."""
    cond = np.asarray(cond, dtype=bool)
    a, b = as_tensor(a), as_tensor(b)

    def backward(g):
        return (_unbroadcast(np.where(cond, g, 0.0), a.shape),
                _unbroadcast(np.where(cond, 0.0, g), b.shape))

    return _node(np.where(cond, a.data, b.data), (a, b), backward, "where")


# -- shape ----------------------------------------------------------------

def reshape(a, shape):
    old = a.shape
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a):
    """Swap the last two axes."""
    return _node(np.swapaxes(a.data, -1, -2), (a,),
                 lambda g: (np.swapaxes(g, -1, -2),), "transpose")


def sum_(a, axis=None):
    shape = a.shape

    def backward(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _node(a.data.sum(axis=axis), (a,), backward, "sum")


def mean(a, axis=None):
    n = a.size if axis is None else a.shape[axis]
    return sum_(a, axis) / n


# -- linear algebra -------------------------------------------------------

def matmul(a, b):
    """numpy ``matmul`` semantics (2-D or stacked), gradients for both sides."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul needs at least 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _node(np.matmul(a.data, b.data), (a, b), backward, "matmul")


def conv_output_size(size, kernel, stride, padding):
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x, kernels, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` ([C,H,W] or [B,C,H,W]) with ``kernels`` [F,C,kh,kw]."""
    x, kernels = as_tensor(x), as_tensor(kernels)
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4 or kernels.ndim != 4:
        raise ValueError(f"conv2d expects [B,C,H,W] input and [F,C,kh,kw] kernels, "
                         f"got {x.shape} and {kernels.shape}")
    B, C, H, W = xd.shape
    F, Ck, kh, kw = kernels.shape
    if C != Ck:
        raise ValueError(f"conv2d channel mismatch: input has {C}, kernels expect {Ck}")
    if stride < 1 or padding < 0:
        raise ValueError("conv2d needs stride >= 1 and padding >= 0")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise ValueError(f"conv2d geometry yields empty output ({Ho}x{Wo})")

    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    # [B, C, Ho, Wo, kh, kw]
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    out = np.tensordot(win, kernels.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    parents = [x, kernels]
    if bias is not None:
        bias = as_tensor(bias)
        out = out + bias.data[None, :, None, None]
        parents.append(bias)
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gk = np.tensordot(g4, win, axes=([0, 2, 3], [0, 2, 3]))
        cols = np.tensordot(g4, kernels.data, axes=([1], [0]))  # [B, Ho, Wo, C, kh, kw]
        gxp = np.zeros_like(xp)
        for i in range(kh):
            for j in range(kw):
                gxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += \
                    cols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, padding:padding + H, padding:padding + W] if padding else gxp
        grads = [gx[0] if single else gx, gk]
        if bias is not None:
            grads.append(g4.sum(axis=(0, 2, 3)))
        return tuple(grads)

    return _node(out, parents, backward, "conv2d")


# -- losses ---------------------------------------------------------------

def softmax_cross_entropy(logits, target):
    """log(sum_j exp(z_j)) - z_y, max-shifted for stability.

    ``logits`` of shape [n] with an int target gives a scalar; shape [B, n]
    with B targets gives the [B] vector of per-sample losses.
    """
    logits = as_tensor(logits)
    z = logits.data
    single = z.ndim == 1
    z2 = z[None] if single else z
    t = np.atleast_1d(np.asarray(target))
    n = z2.shape[-1]
    if n < 2:
        raise ValueError("cross-entropy needs at least two logits")
    if t.shape != (z2.shape[0],):
        raise ValueError(f"expected {z2.shape[0]} targets, got shape {t.shape}")
    if not np.issubdtype(t.dtype, np.integer) or (t < 0).any() or (t >= n).any():
        raise ValueError(f"target out of range for {n} classes: {target!r}")
    rows = np.arange(z2.shape[0])
    top = z2.max(axis=1, keepdims=True)
    e = np.exp(z2 - top)
    s = e.sum(axis=1, keepdims=True)
    loss = np.log(s[:, 0]) + top[:, 0] - z2[rows, t]

    def backward(g):
        p = e / s
        p[rows, t] -= 1.0
        gz = p * np.reshape(g, (-1, 1))
        return (gz[0] if single else gz,)

    return _node(loss[0] if single else loss, (logits,), backward, "xent")


# -- reverse pass ---------------------------------------------------------

class Tape:
    """Operations reachable from ``output``, in the order they were recorded."""

    def __init__(self, output):
        self.output = output
        self.nodes = []
        seen = set()
        stack = [(output, False)]
        while stack:
            t, expanded = stack.pop()
            if expanded:
                self.nodes.append(t)
                continue
            if id(t) in seen:
                continue
            seen.add(id(t))
            stack.append((t, True))
            for p in t._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

    def leaves(self):
        return [t for t in self.nodes if t._backward is None]

    def run(self):
        grads = {id(self.output): np.ones_like(self.output.data)}
        for t in reversed(self.nodes):
            g = grads.pop(id(t), None)
            if g is None:
                continue
            if t._backward is None:
                t.grad = g if t.grad is None else t.grad + g
                continue
            for p, pg in zip(t._parents, t._backward(g)):
                if not p.requires_grad:
                    continue
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg


def backward(output, params=None):
    """Reverse-mode gradients of a scalar ``output``.

    Leaf tensors reached from the output get ``.grad`` set (any previous
    value is discarded).  If ``params`` is given, returns one gradient array
    per parameter, zeros for those the output does not depend on.
    """
    if output.size != 1:
        raise ValueError(f"backward needs a scalar output, got shape {output.shape}")
    if params is not None:
        for p in params:
            p.grad = None
    if output.requires_grad:
        tape = Tape(output)
        for leaf in tape.leaves():
            leaf.grad = None
        tape.run()
    if params is None:
        return None
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
