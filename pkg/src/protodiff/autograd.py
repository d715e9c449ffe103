"""Tape-based reverse-mode differentiation over numpy arrays.

A :class:`Tensor` wraps an ndarray and, while gradients are enabled, records
the op that produced it together with a closure that pushes the output
gradient back to its inputs. :meth:`Tensor.backward` walks the recorded
graph in reverse topological order.

Image tensors are NHWC throughout. Convolution weights are laid out as
(kh, kw, Cin, Cout) and linear weights as (in, out).
"""

import contextlib

import numpy as np

from . import kernels

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad=False, name=None):
        self.data = data if isinstance(data, np.ndarray) else np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None
        self.name = name

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{label})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def numpy(self):
        return self.data

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ValueError("backward() without a gradient needs a scalar output")
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = grad if self.grad is None else self.grad + grad
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                if node._parents:
                    # interior nodes do not keep gradients once propagated
                    node.grad = None
                    node._backward = None
                    node._parents = ()

    # operator sugar
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
        return mul(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division by a Tensor is not supported")
        return mul(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Tensor(arr)


def _result(data, parents, backward):
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _accum(t, g):
    if t.requires_grad:
        t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _operand(x, like):
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


# elementwise arithmetic

def add(a, b):
    a = as_tensor(a)
    b = _operand(b, a)
    a = _operand(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(g, b.shape))

    return _result(a.data + b.data, (a, b), backward)


def sub(a, b):
    a = as_tensor(a)
    b = _operand(b, a)
    a = _operand(a, b)

    def backward(g):
        _accum(a, _unbroadcast(g, a.shape))
        _accum(b, _unbroadcast(-g, b.shape))

    return _result(a.data - b.data, (a, b), backward)


def mul(a, b):
    a = as_tensor(a)
    if not isinstance(b, Tensor):
        scalar = b

        def backward_scalar(g):
            _accum(a, g * scalar)

        return _result(a.data * scalar, (a,), backward_scalar)

    def backward(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.shape))

    return _result(a.data * b.data, (a, b), backward)


def square(a):
    def backward(g):
        _accum(a, 2.0 * g * a.data)

    return _result(a.data * a.data, (a,), backward)


def sum_(a, axis=None, keepdims=False):
    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.shape).copy())

    return _result(np.asarray(a.data.sum(axis=axis, keepdims=keepdims)), (a,), backward)


def mean(a, axis=None, keepdims=False):
    if axis is None:
        count = a.data.size
    else:
        axes = axis if isinstance(axis, tuple) else (axis,)
        count = int(np.prod([a.shape[i] for i in axes]))
    scale = 1.0 / count

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g * scale, a.shape).astype(a.dtype))

    out = np.asarray(a.data.mean(axis=axis, keepdims=keepdims))
    return _result(out, (a,), backward)


def reshape(a, shape):
    def backward(g):
        _accum(a, g.reshape(a.shape))

    return _result(a.data.reshape(shape), (a,), backward)


def concat(tensors, axis=-1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    bounds = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accum(t, np.ascontiguousarray(g[tuple(idx)]))

    return _result(np.concatenate([t.data for t in tensors], axis=axis), tensors, backward)


def matmul(a, b):
    def backward(g):
        if a.requires_grad:
            _accum(a, g @ b.data.T)
        if b.requires_grad:
            _accum(b, a.data.T @ g)

    return _result(a.data @ b.data, (a, b), backward)


# activations

def silu(x):
    """x * sigmoid(x)."""
    sig = 1.0 / (1.0 + np.exp(-x.data))
    out = x.data * sig

    def backward(g):
        _accum(x, g * (sig * (1.0 + x.data * (1.0 - sig))))

    return _result(out, (x,), backward)


def relu(x):
    mask = x.data > 0

    def backward(g):
        _accum(x, g * mask)

    return _result(np.where(mask, x.data, 0).astype(x.dtype), (x,), backward)


# layers

def linear(x, weight, bias=None):
    """``x @ weight + bias`` for x (N, in), weight (in, out)."""
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        if x.requires_grad:
            _accum(x, g @ weight.data.T)
        if weight.requires_grad:
            _accum(weight, x.data.T @ g)
        if bias is not None and bias.requires_grad:
            _accum(bias, g.sum(axis=0))

    return _result(out, parents, backward)


_CHUNK_BYTES = 1 << 21


def _chunk(n, rows_per_sample, k, itemsize):
    """Samples per im2col chunk so the unfolded patches stay cache-sized."""
    per = rows_per_sample * k * itemsize
    return max(1, min(n, _CHUNK_BYTES // max(per, 1)))


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-D cross-correlation on NHWC input with a (kh, kw, Cin, Cout) kernel.

    Output spatial size is ``(H + 2*padding - kh) // stride + 1``. Patches are
    unfolded a few samples at a time and recomputed in the backward pass
    rather than stored.
    """
    n, h, w, cin = x.shape
    kh, kw, wcin, cout = weight.shape
    if wcin != cin:
        raise ValueError(f"conv2d: input has {cin} channels, kernel expects {wcin}")
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (w + 2 * padding - kw) // stride + 1
    if ho < 1 or wo < 1:
        raise ValueError(f"conv2d: kernel {kh}x{kw} larger than padded input {h}x{w}")
    k = kh * kw * cin
    m = ho * wo
    pointwise = kh == 1 and kw == 1 and stride == 1 and padding == 0
    xd = np.ascontiguousarray(x.data)
    w2 = np.ascontiguousarray(weight.data.reshape(k, cout))
    out = np.empty((n * m, cout), dtype=np.result_type(xd.dtype, w2.dtype))
    cs = n if pointwise else _chunk(n, m, k, xd.itemsize)

    def cols_of(lo, hi):
        if pointwise:
            return xd[lo:hi].reshape(-1, k)
        return kernels.im2col(xd[lo:hi], kh, kw, stride, padding).reshape(-1, k)

    for lo in range(0, n, cs):
        hi = min(n, lo + cs)
        np.matmul(cols_of(lo, hi), w2, out=out[lo * m:hi * m])
    if bias is not None:
        out += bias.data
    out = out.reshape(n, ho, wo, cout)
    parents = (x, weight) if bias is None else (x, weight, bias)

    def backward(g):
        g2 = np.ascontiguousarray(g).reshape(-1, cout)
        if bias is not None and bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        need_w, need_x = weight.requires_grad, x.requires_grad
        if not (need_w or need_x):
            return
        dw = np.zeros_like(w2) if need_w else None
        dx = np.empty_like(xd) if need_x else None
        for lo in range(0, n, cs):
            hi = min(n, lo + cs)
            gc = g2[lo * m:hi * m]
            if need_w:
                dw += cols_of(lo, hi).T @ gc
            if need_x:
                dcols = (gc @ w2.T).reshape(hi - lo, ho, wo, k)
                dx[lo:hi] = dcols if pointwise else kernels.col2im(dcols, h, w, kh, kw, stride, padding)
        if need_w:
            _accum(weight, dw.reshape(weight.shape))
        if need_x:
            _accum(x, dx)

    return _result(out, parents, backward)


def group_norm(x, gamma, beta, groups, eps=1e-5, act=None):
    """Group normalization over (H, W, C/groups) per sample, per-channel affine.

    ``act="silu"`` fuses a trailing SiLU into the same kernel.
    """
    c = x.shape[-1]
    if c % groups:
        raise ValueError(f"group_norm: {c} channels not divisible into {groups} groups")
    if act not in (None, "silu"):
        raise ValueError(f"group_norm: unsupported activation {act!r}")
    fuse = act == "silu"
    gd = np.ascontiguousarray(gamma.data, dtype=x.dtype)
    bd = np.ascontiguousarray(beta.data, dtype=x.dtype)
    out, xhat, rstd = kernels.group_norm_act_forward(x.data, gd, bd, groups, eps, fuse)

    def backward(g):
        dx, dgamma, dbeta = kernels.group_norm_act_backward(g, xhat, gd, bd, rstd, groups, fuse)
        _accum(gamma, dgamma.astype(gamma.dtype, copy=False))
        _accum(beta, dbeta.astype(beta.dtype, copy=False))
        _accum(x, dx)

    return _result(out, (x, gamma, beta), backward)


def dropout(x, rate, rng=None, train=False):
    """Inverted dropout; the identity when not training or ``rate == 0``."""
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(x.shape, dtype=np.float32) >= rate).astype(x.dtype)
    keep /= 1.0 - rate

    def backward(g):
        _accum(x, g * keep)

    return _result(x.data * keep, (x,), backward)


def nearest_upsample(x, factor=2):
    n, h, w, c = x.shape
    out = np.broadcast_to(x.data[:, :, None, :, None, :], (n, h, factor, w, factor, c))
    out = out.reshape(n, h * factor, w * factor, c)

    def backward(g):
        _accum(x, g.reshape(n, h, factor, w, factor, c).sum(axis=(2, 4)))

    return _result(out, (x,), backward)


def avg_downsample(x, factor=2):
    """Non-overlapping ``factor`` x ``factor`` average pooling."""
    n, h, w, c = x.shape
    if h % factor or w % factor:
        raise ValueError(f"avg_downsample: {h}x{w} not divisible by {factor}")
    ho, wo = h // factor, w // factor
    out = x.data.reshape(n, ho, factor, wo, factor, c).mean(axis=(2, 4))
    scale = 1.0 / (factor * factor)

    def backward(g):
        gg = np.broadcast_to((g * scale)[:, :, None, :, None, :], (n, ho, factor, wo, factor, c))
        _accum(x, gg.reshape(n, h, w, c).astype(x.dtype))

    return _result(out.astype(x.dtype), (x,), backward)


def global_avg_pool(x):
    return mean(x, axis=(1, 2))


def channel_bias(x, b):
    """Add per-sample, per-channel ``b`` (N, C) to NHWC ``x``."""
    n, c = b.shape
    return add(x, reshape(b, (n, 1, 1, c)))


def embedding(table, index):
    """Row lookup ``table[index]`` with scatter-add gradient."""
    index = np.asarray(index)

    def backward(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, index, g)
        _accum(table, gt)

    return _result(table.data[index], (table,), backward)


def mse(pred, target):
    """Mean of squared differences over all elements; ``target`` is a constant."""
    target = target.data if isinstance(target, Tensor) else target
    diff = pred.data - target
    scale = 2.0 / diff.size

    def backward(g):
        _accum(pred, (g * scale) * diff)

    return _result(np.asarray(np.mean(diff * diff), dtype=pred.dtype), (pred,), backward)
