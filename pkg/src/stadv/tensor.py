"""Dense float64 tensors with reverse-mode automatic differentiation.

Only the operations needed by the warp, losses, models and attacks are
provided. Every op records its parents and a closure that maps the output
gradient to one gradient per parent; :meth:`Tensor.backward` replays those
closures in reverse topological order and then discards them, so a graph can
be differentiated exactly once.

Broadcasting is limited to tensor-vs-scalar (a Python number or a 0-d / size-1
tensor). Adding a bias vector to a batch goes through :func:`bias_add`.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "ShapeError",
    "TapeError",
    "make_op",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "absolute",
    "sqrt",
    "maximum",
    "exp",
    "log",
    "tanh",
    "relu",
    "total",
    "amax",
    "reshape",
    "transpose",
    "take",
    "bias_add",
    "matmul",
    "conv2d",
    "pad_edge",
    "avgpool2d",
    "softmax",
    "log_softmax",
    "cross_entropy",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested op."""

    def __init__(self, op, *shapes):
        self.op = op
        self.shapes = tuple(tuple(s) for s in shapes)
        desc = " vs ".join(str(s) for s in self.shapes)
        super().__init__(f"{op}: incompatible shapes {desc}")


class TapeError(RuntimeError):
    """Raised on a second backward pass over an already-consumed graph."""


class Tensor:
    """An n-d float64 array that optionally participates in differentiation.

    ``grad`` is ``None`` until a backward pass reaches the tensor; gradients of
    leaves accumulate across passes, like a parameter buffer would.
    """

    __array_ufunc__ = None  # ndarray <op> Tensor defers to the Tensor operators

    def __init__(self, data, requires_grad=False):
        # aliases float64 arrays rather than copying them
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None
        self._consumed = False
        self.op = "leaf"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.op == "leaf"

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else self.data.item()

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self.op}{flag})"

    def __len__(self):
        return len(self.data)

    # operators -----------------------------------------------------------
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

    def __abs__(self):
        return absolute(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, index):
        return _getitem(self, index)

    def sum(self, axis=None):
        return total(self, axis)

    def mean(self, axis=None):
        n = self.data.size if axis is None else self.data.shape[axis]
        return total(self, axis) / float(n)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def detach(self):
        return Tensor(self.data)

    # backward ------------------------------------------------------------
    def backward(self, seed=None):
        """Populate ``grad`` on every ``requires_grad`` ancestor of this scalar."""
        if self.data.size != 1:
            raise ShapeError("backward (loss must be scalar)", self.shape)
        if self._consumed:
            raise TapeError("graph already consumed by a previous backward pass")
        if not self.requires_grad:
            raise TapeError("loss does not depend on any tensor with requires_grad=True")

        order = _topological(self)
        for node in order:
            if node._consumed:
                raise TapeError(f"tensor produced by '{node.op}' belongs to a consumed graph")
        if seed is None:
            seed = np.ones_like(self.data)
        self.grad = np.asarray(seed, dtype=np.float64).reshape(self.shape).copy()

        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            grads = node._backward(node.grad)
            for parent, g in zip(node._parents, grads):
                if g is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    parent.grad = np.array(g, dtype=np.float64).reshape(parent.shape)
                else:
                    parent.grad = parent.grad + np.reshape(g, parent.shape)

        for node in order:
            if not node.is_leaf:
                node._backward = None
                node._parents = ()
                node._consumed = True


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
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def make_op(data, parents, backward, op):
    """Wrap ``data`` as the output of a primitive.

    ``backward(grad_out)`` must return one gradient (or ``None``) per parent.
    Used by modules that define their own primitives, e.g. the bilinear warp.
    """
    out = Tensor.__new__(Tensor)
    out.data = np.asarray(data, dtype=np.float64)
    out.grad = None
    out.op = op
    out._consumed = False
    out.requires_grad = any(p.requires_grad for p in parents)
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def _is_scalar(t):
    return t.data.size == 1 and t.data.ndim <= 1


def _binary_operands(op, a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape and not (_is_scalar(a) or _is_scalar(b)):
        raise ShapeError(op, a.shape, b.shape)
    return a, b


def _unbroadcast(g, t):
    if g.shape == t.shape:
        return g
    return np.sum(g).reshape(t.shape)


# elementwise -------------------------------------------------------------


def add(a, b):
    a, b = _binary_operands("add", a, b)
    return make_op(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a), _unbroadcast(g, b)),
        "add",
    )


def sub(a, b):
    a, b = _binary_operands("sub", a, b)
    return make_op(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a), _unbroadcast(-g, b)),
        "sub",
    )


def mul(a, b):
    a, b = _binary_operands("mul", a, b)
    return make_op(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a), _unbroadcast(g * a.data, b)),
        "mul",
    )


def div(a, b):
    a, b = _binary_operands("div", a, b)
    out = a.data / b.data

    def backward(g):
        return _unbroadcast(g / b.data, a), _unbroadcast(-g * out / b.data, b)

    return make_op(out, (a, b), backward, "div")


def neg(a):
    a = as_tensor(a)
    return make_op(-a.data, (a,), lambda g: (-g,), "neg")


def absolute(a):
    # subgradient at 0 is 0
    a = as_tensor(a)
    return make_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def sqrt(a):
    # d/dx sqrt(x) at x == 0 is taken as 0; callers needing smoothness add an offset
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def backward(g):
        with np.errstate(divide="ignore", invalid="ignore"):
            d = np.where(out > 0, 0.5 / np.where(out > 0, out, 1.0), 0.0)
        return (g * d,)

    return make_op(out, (a,), backward, "sqrt")


def maximum(a, b):
    """Elementwise max; on ties the gradient goes to ``b``."""
    a, b = _binary_operands("max_elem", a, b)
    pick_a = a.data > b.data
    out = np.where(pick_a, a.data, b.data)

    def backward(g):
        return _unbroadcast(g * pick_a, a), _unbroadcast(g * ~pick_a, b)

    return make_op(out, (a, b), backward, "max_elem")


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.data)
    return make_op(out, (a,), lambda g: (g * out,), "exp")


def log(a):
    a = as_tensor(a)
    return make_op(np.log(a.data), (a,), lambda g: (g / a.data,), "log")


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.data)
    return make_op(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def relu(a):
    # subgradient at 0 is 0
    a = as_tensor(a)
    mask = a.data > 0
    return make_op(a.data * mask, (a,), lambda g: (g * mask,), "relu")


# reductions and shape ops -------------------------------------------------


def total(a, axis=None):
    a = as_tensor(a)
    out = np.sum(a.data, axis=axis)

    def backward(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape),)

    return make_op(out, (a,), backward, "sum")


def amax(a, axis=None):
    """Max reduction; gradient flows to the first maximal entry only."""
    a = as_tensor(a)
    if axis is None:
        flat = int(np.argmax(a.data))
        out = a.data.reshape(-1)[flat]

        def backward(g):
            d = np.zeros(a.data.size)
            d[flat] = g
            return (d.reshape(a.shape),)

        return make_op(out, (a,), backward, "max")

    idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
    out = np.take_along_axis(a.data, idx, axis=axis).squeeze(axis)

    def backward(g):
        d = np.zeros(a.shape)
        np.put_along_axis(d, idx, np.expand_dims(g, axis), axis=axis)
        return (d,)

    return make_op(out, (a,), backward, "max")


def reshape(a, shape):
    a = as_tensor(a)
    return make_op(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None):
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return make_op(
        np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose"
    )


def _getitem(a, index):
    out = a.data[index]

    def backward(g):
        d = np.zeros(a.shape)
        np.add.at(d, index, g)
        return (d,)

    return make_op(np.array(out, dtype=np.float64), (a,), backward, "getitem")


def take(a, indices, axis):
    """Gather along ``axis`` with repeated indices allowed (scatter-add backward)."""
    a = as_tensor(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.data, indices, axis=axis)

    def backward(g):
        d = np.zeros(a.shape)
        sl = [slice(None)] * a.ndim
        sl[axis] = indices
        np.add.at(d, tuple(sl), g)
        return (d,)

    return make_op(out, (a,), backward, "take")


def bias_add(x, b, axis=1):
    """Add a 1-d bias ``b`` along ``axis`` of ``x`` (channel or feature axis)."""
    x, b = as_tensor(x), as_tensor(b)
    if b.ndim != 1 or x.shape[axis] != b.shape[0]:
        raise ShapeError("bias_add", x.shape, b.shape)
    shape = [1] * x.ndim
    shape[axis] = b.shape[0]
    other = tuple(i for i in range(x.ndim) if i != axis)
    return make_op(
        x.data + b.data.reshape(shape),
        (x, b),
        lambda g: (g, g.sum(axis=other)),
        "bias_add",
    )


# linear algebra and convolution ------------------------------------------


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_op(a.data @ b.data, (a, b), backward, "matmul")


_CHUNK_FLOATS = 1_000_000  # cap on patch-matrix size; large temporaries are slow to fault in


def _im2col(xp, kh, kw, stride, ho, wo):
    """(N,C,Hp,Wp) -> (N, C*kh*kw, ho*wo) patch matrix, built from slice copies."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, ho, wo))
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride]
    return cols.reshape(n, c * kh * kw, ho * wo)


def _chunks(n, per_sample):
    step = max(1, _CHUNK_FLOATS // max(1, per_sample))
    return [(s, min(n, s + step)) for s in range(0, n, step)]


def conv2d(x, w, stride=1, padding=0):
    """2-d cross-correlation of ``x`` (N,C,H,W) with ``w`` (F,C,kh,kw), no bias.

    Output size is ``(H + 2*padding - kh) // stride + 1``; trailing rows and
    columns that do not fill a whole stride are ignored.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or x.shape[1] != w.shape[1]:
        raise ShapeError("conv2d", x.shape, w.shape)
    n, c, h, wd = x.shape
    f, _, kh, kw = w.shape
    hp, wp = h + 2 * padding, wd + 2 * padding
    if hp < kh or wp < kw:
        raise ShapeError("conv2d (kernel larger than padded input)", x.shape, w.shape)
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wmat = w.data.reshape(f, -1)
    chunks = _chunks(n, c * kh * kw * ho * wo)
    out = np.empty((n, f, ho * wo))
    for s, e in chunks:
        np.matmul(wmat, _im2col(xp[s:e], kh, kw, stride, ho, wo), out=out[s:e])
    out = out.reshape(n, f, ho, wo)

    def backward(g):
        g3 = g.reshape(n, f, ho * wo)
        gw = np.zeros((f, c * kh * kw)) if w.requires_grad else None
        gx = np.zeros((n, c, hp, wp)) if x.requires_grad else None
        for s, e in chunks:
            if gw is not None:
                cols = _im2col(xp[s:e], kh, kw, stride, ho, wo)
                gw += np.matmul(g3[s:e], cols.transpose(0, 2, 1)).sum(axis=0)
            if gx is None:
                continue
            if stride == 1 and c >= f:
                # full correlation beats scattering patch gradients when channels don't shrink
                gx[s:e] = _conv_input_grad(g[s:e], w.data)
            else:
                dcols = np.matmul(wmat.T, g3[s:e]).reshape(e - s, c, kh, kw, ho, wo)
                for i in range(kh):
                    for j in range(kw):
                        gx[s:e, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                            dcols[:, :, i, j]
                        )
        if gx is not None and padding:
            gx = gx[:, :, padding : padding + h, padding : padding + wd]
        return gx, None if gw is None else gw.reshape(w.shape)

    return make_op(out, (x, w), backward, "conv2d")


def _conv_input_grad(g, w):
    """Gradient w.r.t. the (padded) input of a stride-1 conv: full correlation
    of the output gradient with the flipped, channel-swapped kernel."""
    f, c, kh, kw = w.shape
    n, _, ho, wo = g.shape
    gp = np.pad(g, ((0, 0), (0, 0), (kh - 1, kh - 1), (kw - 1, kw - 1)))
    hp, wp = ho + kh - 1, wo + kw - 1
    cols = _im2col(gp, kh, kw, 1, hp, wp)
    kmat = w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3).reshape(c, f * kh * kw)
    return np.matmul(kmat, cols).reshape(n, c, hp, wp)


def pad_edge(x, pad):
    """Replicate the border of the last two axes ``pad`` times on each side."""
    x = as_tensor(x)
    h, w = x.shape[-2:]
    rows = np.clip(np.arange(-pad, h + pad), 0, h - 1)
    cols = np.clip(np.arange(-pad, w + pad), 0, w - 1)
    return take(take(x, rows, axis=x.ndim - 2), cols, axis=x.ndim - 1)


def avgpool2d(x, k, stride=None, same=False):
    """Mean over k×k windows of an (N,C,H,W) tensor.

    With ``same=True`` the input is edge-replicated by (k-1)//2 on each side and
    stride is forced to 1, so the output keeps the input's spatial size (k odd).
    """
    x = as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("avgpool2d", x.shape)
    if same:
        if k % 2 == 0:
            raise ValueError("avgpool2d same-size mode needs an odd window")
        x = pad_edge(x, (k - 1) // 2)
        stride = 1
    stride = k if stride is None else stride
    n, c, h, w = x.shape
    if k > h or k > w:
        raise ShapeError(f"avgpool2d (window {k} larger than input)", x.shape)
    ho, wo = (h - k) // stride + 1, (w - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    out = win.mean(axis=(-2, -1))

    def backward(g):
        d = np.zeros(x.shape)
        gk = g / (k * k)
        for i in range(k):
            for j in range(k):
                d[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += gk
        return (d,)

    return make_op(out, (x,), backward, "avgpool2d")


# probabilistic heads -----------------------------------------------------


def _logsumexp(z, axis=-1):
    m = np.max(z, axis=axis, keepdims=True)
    return m + np.log(np.sum(np.exp(z - m), axis=axis, keepdims=True))


def softmax(logits, axis=-1):
    logits = as_tensor(logits)
    out = np.exp(logits.data - _logsumexp(logits.data, axis))

    def backward(g):
        return (out * (g - np.sum(g * out, axis=axis, keepdims=True)),)

    return make_op(out, (logits,), backward, "softmax")


def log_softmax(logits, axis=-1):
    logits = as_tensor(logits)
    out = logits.data - _logsumexp(logits.data, axis)

    def backward(g):
        return (g - np.exp(out) * np.sum(g, axis=axis, keepdims=True),)

    return make_op(out, (logits,), backward, "log_softmax")


def cross_entropy(logits, labels, reduction="mean"):
    """``logsumexp(z) - z[label]`` for a vector + int, or a batch + int array.

    Batched input is averaged (``reduction="mean"``) or summed (``"sum"``).
    """
    logits = as_tensor(logits)
    single = logits.ndim == 1
    z = logits.data[None, :] if single else logits.data
    if z.ndim != 2:
        raise ShapeError("cross_entropy", logits.shape)
    labels = np.atleast_1d(np.asarray(labels))
    if labels.shape != (z.shape[0],):
        raise ShapeError("cross_entropy (labels)", logits.shape, labels.shape)
    k = z.shape[1]
    if not np.issubdtype(labels.dtype, np.integer) or labels.min() < 0 or labels.max() >= k:
        raise ValueError(f"cross_entropy: labels must be integers in [0, {k}), got {labels}")
    rows = np.arange(z.shape[0])
    lse = _logsumexp(z, axis=1)[:, 0]
    losses = lse - z[rows, labels]
    scale = 1.0 / z.shape[0] if reduction == "mean" else 1.0
    out = losses.sum() * scale

    def backward(g):
        p = np.exp(z - lse[:, None])
        p[rows, labels] -= 1.0
        d = p * (g * scale)
        return (d[0] if single else d,)

    return make_op(out, (logits,), backward, "cross_entropy")
