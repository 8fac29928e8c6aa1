"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Values are plain ``numpy.ndarray`` objects of dtype float64 (row-major).
A :class:`Node` pairs such a value with an accumulated gradient and a
backward rule.  Only the operations the segmentation / distillation
pipeline needs are provided; there is no broadcasting apart from the
scalar factor of :func:`scale`.

Example
-------
>>> x = Node(np.array([1.0, 2.0, 3.0]))
>>> y = sum_all(mul(x, x))
>>> backward(y)
>>> x.grad
array([2., 4., 6.])
"""

from itertools import product

import numpy as np

from .exceptions import EmptyMaskError, ShapeError, DegenerateVectorError

__all__ = [
    "Node",
    "as_tensor",
    "backward",
    "conv",
    "relu",
    "add",
    "mul",
    "scale",
    "sum_all",
    "mean_all",
    "take",
    "reshape",
    "stack",
    "masked_mean",
    "pearson_distance",
    "softmax_cross_entropy",
    "soft_dice_loss",
    "softmax",
]

#: below this product of standard deviations a vector is treated as constant
PEARSON_EPS = 1e-12


def as_tensor(data):
    """Return a read-only, C-contiguous float64 copy of ``data``."""
    arr = np.array(data, dtype=np.float64, order="C", copy=True)
    arr.setflags(write=False)
    return arr


class Node:
    """A vertex in the autodiff graph.

    ``value`` is immutable once the node exists.  ``grad`` has the same
    shape and starts at zero; :func:`backward` adds into it.
    """

    __slots__ = ("value", "grad", "parents", "_backward", "op")

    def __init__(self, value, parents=(), backward=None, op="leaf"):
        if isinstance(value, np.ndarray) and value.dtype == np.float64 and not value.flags.writeable:
            self.value = value
        else:
            value = np.array(value, dtype=np.float64)
            value.setflags(write=False)
            self.value = value
        self.grad = np.zeros(self.value.shape)
        self.parents = tuple(parents)
        self._backward = backward
        self.op = op

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = np.zeros(self.value.shape)

    def __repr__(self):
        return f"Node(op={self.op!r}, shape={self.value.shape})"

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Node):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __getitem__(self, index):
        return take(self, index)


def _node(x):
    return x if isinstance(x, Node) else Node(x)


def _topological_order(root):
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
        for parent in reversed(node.parents):
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(root):
    """Accumulate d(root)/d(node) into ``node.grad`` for every reachable node.

    Gradients propagate through a per-call buffer, so calling this twice
    without :meth:`Node.zero_grad` adds the derivative twice (and not the
    already accumulated gradients of intermediates).
    """
    if root.value.shape != ():
        raise ShapeError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topological_order(root)
    upstream = {id(root): np.ones(())}
    for node in reversed(order):
        g = upstream.pop(id(node), None)
        if g is None:
            continue
        node.grad = node.grad + g
        if node._backward is None:
            continue
        for parent, pg in zip(node.parents, node._backward(g)):
            if pg is None:
                continue
            key = id(parent)
            if key in upstream:
                upstream[key] = upstream[key] + pg
            else:
                upstream[key] = pg


# --------------------------------------------------------------------------
# convolution


def conv(x, kernel, bias, dims):
    """Stride-1, zero "same"-padded cross-correlation.

    ``x`` is ``B x Cin x spatial`` with ``dims`` spatial axes, ``kernel`` is
    ``Cout x Cin x k^dims`` with odd ``k`` per axis and ``bias`` has length
    ``Cout``.
    """
    x, kernel, bias = _node(x), _node(kernel), _node(bias)
    xv, wv, bv = x.value, kernel.value, bias.value
    if dims not in (2, 3):
        raise ShapeError(f"conv supports dims 2 or 3, got {dims}")
    if xv.ndim != dims + 2:
        raise ShapeError(f"conv{dims}d expects input of rank {dims + 2}, got shape {xv.shape}")
    if wv.ndim != dims + 2:
        raise ShapeError(f"conv{dims}d expects kernel of rank {dims + 2}, got shape {wv.shape}")
    cout, cin = wv.shape[:2]
    ksize = wv.shape[2:]
    if xv.shape[1] != cin:
        raise ShapeError(f"input has {xv.shape[1]} channels but kernel expects {cin}")
    if any(k % 2 == 0 for k in ksize):
        raise ShapeError(f"kernel spatial size must be odd, got {ksize}")
    if bv.shape != (cout,):
        raise ShapeError(f"bias shape {bv.shape} does not match {cout} output channels")

    spatial = xv.shape[2:]
    pads = [k // 2 for k in ksize]
    xp = np.pad(xv, [(0, 0), (0, 0)] + [(p, p) for p in pads])
    offsets = list(product(*[range(k) for k in ksize]))

    def window(arr, off):
        return arr[(slice(None), slice(None)) + tuple(slice(o, o + s) for o, s in zip(off, spatial))]

    # out[b, o, s] = sum_offsets sum_c w[o, c, off] * xp[b, c, s + off]
    out = np.zeros((cout, xv.shape[0]) + spatial)
    for off in offsets:
        out += np.tensordot(wv[(slice(None), slice(None)) + off], window(xp, off), axes=([1], [1]))
    out = np.moveaxis(out, 0, 1) + bv.reshape((1, cout) + (1,) * dims)

    def _backward(g):
        sum_axes = (0,) + tuple(range(2, dims + 2))
        gb = g.sum(axis=sum_axes)
        gw = np.zeros(wv.shape)
        gxp = np.zeros(xp.shape)
        for off in offsets:
            idx = (slice(None), slice(None)) + off
            xs = window(xp, off)
            gw[idx] = np.tensordot(g, xs, axes=(sum_axes, sum_axes))
            gxp_win = window(gxp, off)
            gxp_win += np.moveaxis(np.tensordot(wv[idx], g, axes=([0], [1])), 0, 1)
        gx = gxp[(slice(None), slice(None)) + tuple(slice(p, p + s) for p, s in zip(pads, spatial))]
        return gx, gw, gb

    return Node(out, (x, kernel, bias), _backward, f"conv{dims}d")


# --------------------------------------------------------------------------
# elementwise and structural ops


def relu(x):
    """max(x, 0); the derivative at exactly 0 is taken as 0."""
    x = _node(x)
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0.0), (x,), lambda g: (g * mask,), "relu")


def add(a, b):
    a, b = _node(a), _node(b)
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")
    return Node(a.value + b.value, (a, b), lambda g: (g, g), "add")


def mul(a, b):
    a, b = _node(a), _node(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")
    av, bv = a.value, b.value
    return Node(av * bv, (a, b), lambda g: (g * bv, g * av), "mul")


def scale(a, factor):
    """Multiply every element by a Python / numpy scalar."""
    a = _node(a)
    if np.ndim(factor) != 0:
        raise ShapeError("scale expects a scalar factor")
    factor = float(factor)
    return Node(a.value * factor, (a,), lambda g: (g * factor,), "scale")


def sum_all(a):
    a = _node(a)
    shape = a.shape
    return Node(a.value.sum(), (a,), lambda g: (np.full(shape, float(g)),), "sum")


def mean_all(a):
    a = _node(a)
    shape, n = a.shape, a.value.size
    return Node(a.value.mean(), (a,), lambda g: (np.full(shape, float(g) / n),), "mean")


def take(a, index):
    """Differentiable ``a.value[index]`` (basic or advanced indexing)."""
    a = _node(a)
    shape = a.shape

    def _backward(g):
        out = np.zeros(shape)
        np.add.at(out, index, g)
        return (out,)

    return Node(a.value[index], (a,), _backward, "take")


def reshape(a, shape):
    a = _node(a)
    old = a.shape
    return Node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def stack(nodes, axis=0):
    nodes = [_node(n) for n in nodes]
    if not nodes:
        raise ShapeError("stack needs at least one node")
    first = nodes[0].shape
    for n in nodes[1:]:
        if n.shape != first:
            raise ShapeError(f"stack: shapes {first} and {n.shape} differ")

    def _backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(nodes)))

    return Node(np.stack([n.value for n in nodes], axis=axis), nodes, _backward, "stack")


# --------------------------------------------------------------------------
# reductions used by prototypes and losses


def masked_mean(features, mask):
    """Per-channel average of ``features`` (CH x spatial) over ``mask`` == 1.

    Raises :class:`EmptyMaskError` when the mask selects nothing.
    """
    features = _node(features)
    mask = np.asarray(mask, dtype=np.float64)
    if features.value.ndim < 2 or features.shape[1:] != mask.shape:
        raise ShapeError(f"masked_mean: features {features.shape} vs mask {mask.shape}")
    count = mask.sum()
    if count <= 0:
        raise EmptyMaskError("masked_mean over an empty mask")
    ch = features.shape[0]
    flat_f = features.value.reshape(ch, -1)
    flat_m = mask.reshape(-1)
    # same reduction as ndarray.mean(axis=1) so a full mask is bit-identical
    out = (flat_f * flat_m).sum(axis=1) / count

    def _backward(g):
        return (np.multiply.outer(g / count, mask),)

    return Node(out, (features,), _backward, "masked_mean")


def pearson_distance(x, y):
    """1 - Pearson correlation of ``x`` (Node) with the constant vector ``y``.

    Population moments; the result lies in [0, 2].  Raises
    :class:`DegenerateVectorError` when either vector is constant.
    """
    x = _node(x)
    y = np.asarray(y.value if isinstance(y, Node) else y, dtype=np.float64)
    if x.value.ndim != 1 or y.shape != x.shape:
        raise ShapeError(f"pearson_distance: shapes {x.shape} and {y.shape}")
    n = x.shape[0]
    if n < 2:
        raise ShapeError("pearson_distance needs at least 2 elements")
    xc = x.value - x.value.mean()
    yc = y - y.mean()
    sx = np.sqrt((xc @ xc) / n)
    sy = np.sqrt((yc @ yc) / n)
    if sx * sy < PEARSON_EPS:
        raise DegenerateVectorError(f"constant vector in correlation (sx={sx:.3g}, sy={sy:.3g})")
    rho = (xc @ yc) / n / (sx * sy)
    rho = min(1.0, max(-1.0, rho))

    def _backward(g):
        # d rho / dx = (yc / (sx sy) - rho xc / sx^2) / n
        drho = (yc / (sx * sy) - rho * xc / (sx * sx)) / n
        return (-g * drho,)

    return Node(1.0 - rho, (x,), _backward, "pearson_distance")


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def _one_hot(labels, ch):
    labels = np.asarray(labels)
    return np.moveaxis(np.eye(ch)[labels.astype(np.intp)], -1, 1)


def softmax_cross_entropy(logits, labels):
    """Pixel-mean softmax cross-entropy; logits ``B x CH x spatial``."""
    logits = _node(logits)
    lv = logits.value
    labels = np.asarray(labels)
    if lv.ndim < 3 or labels.shape != (lv.shape[0],) + lv.shape[2:]:
        raise ShapeError(f"cross entropy: logits {lv.shape} vs labels {labels.shape}")
    ch = lv.shape[1]
    z = lv - lv.max(axis=1, keepdims=True)
    logsum = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsum
    onehot = _one_hot(labels, ch)
    npix = labels.size
    loss = -(logp * onehot).sum() / npix

    def _backward(g):
        return (g * (np.exp(logp) - onehot) / npix,)

    return Node(loss, (logits,), _backward, "cross_entropy")


def soft_dice_loss(logits, labels, smooth=1e-5):
    """1 - mean soft Dice over the classes that occur in ``labels``.

    Sums run over the whole batch.  ``smooth`` is added to numerator and
    denominator.
    """
    logits = _node(logits)
    lv = logits.value
    labels = np.asarray(labels)
    if lv.ndim < 3 or labels.shape != (lv.shape[0],) + lv.shape[2:]:
        raise ShapeError(f"dice: logits {lv.shape} vs labels {labels.shape}")
    ch = lv.shape[1]
    present = np.unique(labels).astype(np.intp)
    p = softmax(lv, axis=1)
    onehot = _one_hot(labels, ch)
    axes = (0,) + tuple(range(2, lv.ndim))
    inter = (p * onehot).sum(axis=axes)[present]
    psum = p.sum(axis=axes)[present]
    gsum = onehot.sum(axis=axes)[present]
    num = 2.0 * inter + smooth
    den = psum + gsum + smooth
    dice = num / den
    loss = 1.0 - dice.mean()

    def _backward(g):
        # d loss / d p[c] for present classes, then through the softmax
        dp = np.zeros(lv.shape)
        coef = -g / len(present)
        shape = (1, -1) + (1,) * (lv.ndim - 2)
        d_num = np.zeros(ch)
        d_den = np.zeros(ch)
        d_num[present] = coef * 2.0 / den
        d_den[present] = -coef * num / den**2
        dp += onehot * d_num.reshape(shape) + d_den.reshape(shape)
        # softmax jacobian-vector product
        dz = p * (dp - (dp * p).sum(axis=1, keepdims=True))
        return (dz,)

    return Node(loss, (logits,), _backward, "soft_dice")
