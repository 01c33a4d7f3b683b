"""A small tape-free reverse-mode autodiff over numpy arrays.

Each :class:`Node` keeps its value, its parents and a closure mapping the
upstream gradient to one gradient per parent.  ``loss.backward()`` walks
the graph in reverse topological order.  Gradients reaching the same node
along several paths are summed.

Only what the depthwise-quantized autoencoder needs is here: elementwise
arithmetic with broadcasting, reductions, reshapes, concatenation,
2-D convolution, nearest-neighbour upsampling, ReLU, a fused categorical
negative log-likelihood and :func:`stop_gradient`.
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "Node",
    "constant",
    "parameter",
    "stop_gradient",
    "concat",
    "pad_axis",
    "relu",
    "exp",
    "log",
    "conv2d",
    "upsample_nearest",
    "take_rows",
    "categorical_nll",
    "mse",
]


class Node:
    __array_priority__ = 1000

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None, name=None):
        self.value = value if isinstance(value, np.ndarray) else np.asarray(value, dtype=np.float64)
        self.parents = tuple(parents)
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self.parents)
        self.requires_grad = requires_grad
        self.grad = None
        self.name = name

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Node{tag}(shape={self.value.shape}, dtype={self.value.dtype})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(node) into ``node.grad`` for every ancestor.

        Leaves accumulate across calls (call :meth:`zero_grad` between
        steps); interior nodes are overwritten.
        """
        if grad is None:
            if self.value.size != 1:
                raise ValueError(f"backward() needs a scalar, got shape {self.value.shape}")
            grad = np.ones_like(self.value)
        order = _topo(self)
        grads = {id(self): np.asarray(grad, dtype=self.value.dtype)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.parents:
                node.grad = g
                for p, pg in zip(node.parents, node.backward_fn(g)):
                    if pg is None or not p.requires_grad:
                        continue
                    k = id(p)
                    grads[k] = grads[k] + pg if k in grads else pg
            else:
                node.grad = g if node.grad is None else node.grad + g

    # arithmetic ---------------------------------------------------------
    def __add__(self, other):
        return _add(self, _wrap(other, self))

    __radd__ = __add__

    def __sub__(self, other):
        return _add(self, -_wrap(other, self))

    def __rsub__(self, other):
        return _add(_wrap(other, self), -self)

    def __neg__(self):
        return Node(-self.value, (self,), lambda g: (-g,))

    def __mul__(self, other):
        return _mul(self, _wrap(other, self))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = _wrap(other, self)
        if other.requires_grad:
            return _mul(self, other ** -1.0)
        return _mul(self, Node(1.0 / other.value))

    def __pow__(self, p):
        p = float(p)
        x = self.value
        return Node(x ** p, (self,), lambda g: (g * p * x ** (p - 1.0),))

    def __matmul__(self, other):
        other = _wrap(other, self)
        a, b = self.value, other.value

        def bw(g):
            return g @ np.swapaxes(b, -1, -2), np.swapaxes(a, -1, -2) @ g

        return Node(a @ b, (self, other), bw)

    def __getitem__(self, idx):
        shape = self.value.shape
        dtype = self.value.dtype

        def bw(g):
            out = np.zeros(shape, dtype=dtype)
            np.add.at(out, idx, g)
            return (out,)

        return Node(self.value[idx], (self,), bw)

    # reductions / shape -------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        shape = self.value.shape

        def bw(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Node(self.value.sum(axis=axis, keepdims=keepdims), (self,), bw)

    def mean(self, axis=None, keepdims=False):
        n = self.value.size if axis is None else np.prod([self.value.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def reshape(self, *shape):
        old = self.value.shape
        return Node(self.value.reshape(*shape), (self,), lambda g: (g.reshape(old),))

    def transpose(self, *axes):
        axes = axes or tuple(reversed(range(self.ndim)))
        inv = np.argsort(axes)
        return Node(self.value.transpose(axes), (self,), lambda g: (g.transpose(inv),))

    @property
    def T(self):
        return self.transpose()


def _wrap(x, like: Node | None = None) -> Node:
    if isinstance(x, Node):
        return x
    dtype = like.value.dtype if like is not None else np.float64
    return Node(np.asarray(x, dtype=dtype))


def _unbroadcast(g, shape):
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def _add(a: Node, b: Node) -> Node:
    sa, sb = a.value.shape, b.value.shape
    return Node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def _mul(a: Node, b: Node) -> Node:
    av, bv = a.value, b.value

    def bw(g):
        return (_unbroadcast(g * bv, av.shape) if a.requires_grad else None,
                _unbroadcast(g * av, bv.shape) if b.requires_grad else None)

    return Node(av * bv, (a, b), bw)


def _topo(root: Node) -> list[Node]:
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    order.reverse()
    return order


def constant(x, dtype=None) -> Node:
    return Node(np.asarray(x, dtype=dtype), requires_grad=False)


def parameter(x, name=None) -> Node:
    return Node(np.asarray(x), requires_grad=True, name=name)


def stop_gradient(x: Node) -> Node:
    """Same value as ``x``; no gradient flows back into ``x``."""
    return Node(x.value, requires_grad=False)


def concat(nodes, axis: int = 0) -> Node:
    nodes = list(nodes)
    sizes = [n.value.shape[axis] for n in nodes]
    cuts = np.cumsum(sizes)[:-1]
    return Node(np.concatenate([n.value for n in nodes], axis=axis), nodes,
                lambda g: tuple(np.split(g, cuts, axis=axis)))


def pad_axis(x: Node, axis: int, after: int) -> Node:
    """Append ``after`` zeros along ``axis``."""
    if after == 0:
        return x
    widths = [(0, 0)] * x.ndim
    widths[axis] = (0, after)
    n = x.value.shape[axis]
    return Node(np.pad(x.value, widths), (x,), lambda g: (np.take(g, np.arange(n), axis=axis),))


def relu(x: Node) -> Node:
    mask = x.value > 0
    return Node(np.where(mask, x.value, 0).astype(x.value.dtype, copy=False), (x,), lambda g: (g * mask,))


def exp(x: Node) -> Node:
    y = np.exp(x.value)
    return Node(y, (x,), lambda g: (g * y,))


def log(x: Node) -> Node:
    v = x.value
    return Node(np.log(v), (x,), lambda g: (g / v,))


def take_rows(table: Node, idx) -> Node:
    """``table.value[idx]`` with gradients scattered back to the rows."""
    idx = np.asarray(idx)
    shape = table.value.shape

    def bw(g):
        out = np.zeros(shape, dtype=g.dtype)
        np.add.at(out, idx, g)
        return (out,)

    return Node(table.value[idx], (table,), bw)


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int, Ho: int, Wo: int) -> np.ndarray:
    """``(B*Ho*Wo, kh*kw*C)`` patch matrix of an already padded input."""
    B, C = xp.shape[:2]
    xh = np.ascontiguousarray(xp.transpose(0, 2, 3, 1))
    cols = np.empty((B, Ho, Wo, kh, kw, C), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, :, i, j] = xh[:, i:i + stride * Ho:stride, j:j + stride * Wo:stride]
    return cols.reshape(B * Ho * Wo, kh * kw * C)


def conv2d(x: Node, w: Node, b: Node | None = None, stride: int = 1, padding: int = 0) -> Node:
    """2-D cross-correlation on ``(B, C, H, W)`` with ``(O, C, k, k)`` kernels."""
    xv, wv = x.value, w.value
    B, C, H, W = xv.shape
    O, C2, kh, kw = wv.shape
    if C != C2:
        raise ValueError(f"conv2d: input has {C} channels, kernel expects {C2}")
    s, p = stride, padding
    Ho = (H + 2 * p - kh) // s + 1
    Wo = (W + 2 * p - kw) // s + 1
    if kh == kw == 1 and s == 1 and p == 0:
        cols = xv.transpose(0, 2, 3, 1).reshape(-1, C)
    else:
        xp = np.pad(xv, ((0, 0), (0, 0), (p, p), (p, p))) if p else xv
        cols = _im2col(xp, kh, kw, s, Ho, Wo)
    wm = wv.transpose(0, 2, 3, 1).reshape(O, -1)
    out = cols @ wm.T
    if b is not None:
        out += b.value
    out = out.reshape(B, Ho, Wo, O).transpose(0, 3, 1, 2)
    parents = (x, w) if b is None else (x, w, b)

    def bw(g):
        g2 = g.transpose(0, 2, 3, 1).reshape(-1, O)
        gw = (g2.T @ cols).reshape(O, kh, kw, C).transpose(0, 3, 1, 2) if w.requires_grad else None
        gx = None
        if x.requires_grad:
            if kh == kw == 1 and s == 1 and p == 0:
                gx = (g2 @ wv.reshape(O, C)).reshape(B, H, W, C).transpose(0, 3, 1, 2)
            else:
                # input gradient = stride-1 correlation of the zero-dilated
                # output gradient with the flipped, transposed kernel
                Hd, Wd = (Ho - 1) * s + 1, (Wo - 1) * s + 1
                top, left = kh - 1 - p, kw - 1 - p
                bottom, right = H - Hd - top + kh - 1, W - Wd - left + kw - 1
                gd = np.zeros((B, O, Hd + top + max(bottom, 0), Wd + left + max(right, 0)), dtype=g.dtype)
                gd[:, :, top:top + Hd:s, left:left + Wd:s] = g
                gd = gd[:, :, :gd.shape[2] + min(bottom, 0), :gd.shape[3] + min(right, 0)]
                wf = wv[:, :, ::-1, ::-1].transpose(1, 2, 3, 0).reshape(C, -1)
                gx = (_im2col(gd, kh, kw, 1, H, W) @ wf.T).reshape(B, H, W, C).transpose(0, 3, 1, 2)
        if b is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return Node(out, parents, bw)


def upsample_nearest(x: Node, factor: int = 2) -> Node:
    """Repeat each pixel ``factor`` times along both spatial axes."""
    if factor == 1:
        return x
    B, C, H, W = x.value.shape
    y = x.value.repeat(factor, axis=2).repeat(factor, axis=3)
    return Node(y, (x,), lambda g: (g.reshape(B, C, H, factor, W, factor).sum(axis=(3, 5)),))


def categorical_nll(logits: Node, targets, axis: int = 1) -> Node:
    """Mean negative log-likelihood (nats) of integer ``targets``.

    ``logits`` carries the class scores along ``axis``; ``targets`` has the
    logits' shape with that axis removed.
    """
    z = logits.value
    targets = np.asarray(targets, dtype=np.int64)
    zmax = z.max(axis=axis, keepdims=True)
    e = np.exp(z - zmax)
    tot = e.sum(axis=axis, keepdims=True)
    logp_t = np.take_along_axis(z - zmax, np.expand_dims(targets, axis), axis=axis) - np.log(tot)
    n = logp_t.size
    val = -logp_t.sum(dtype=np.float64) / n

    def bw(g):
        grad = e / tot
        onehot = np.zeros_like(grad)
        np.put_along_axis(onehot, np.expand_dims(targets, axis), 1.0, axis=axis)
        return ((grad - onehot) * (g / n),)

    return Node(np.asarray(val, dtype=z.dtype), (logits,), bw)


def mse(a: Node, b) -> Node:
    d = a - b
    return (d * d).mean()
