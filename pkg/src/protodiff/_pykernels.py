"""Pure-numpy reference kernels.

Same signatures as the compiled ``_ckernels`` extension. Image tensors are
NHWC and C-contiguous. ``im2col``/``col2im`` are bit-identical to the
compiled versions; the group-norm reductions agree to rounding only.
"""

import numpy as np


def _out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, kh, kw, stride, pad):
    """Unfold ``x`` (N, H, W, C) into patches (N, Ho, Wo, kh*kw*C).

    Patch layout is (kh, kw, C) with C fastest, matching a (kh, kw, Cin, Cout)
    weight reshaped to (kh*kw*Cin, Cout).
    """
    n, h, w, c = x.shape
    ho = _out_size(h, kh, stride, pad)
    wo = _out_size(w, kw, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    cols = np.empty((n, ho, wo, kh * kw * c), dtype=x.dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            cols[..., k:k + c] = x[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :]
            k += c
    return cols


def col2im(cols, h, w, kh, kw, stride, pad):
    """Adjoint of :func:`im2col`: scatter-add patches back to (N, H, W, C)."""
    n, ho, wo, kc = cols.shape
    c = kc // (kh * kw)
    out = np.zeros((n, h + 2 * pad, w + 2 * pad, c), dtype=cols.dtype)
    k = 0
    for i in range(kh):
        for j in range(kw):
            out[:, i:i + stride * ho:stride, j:j + stride * wo:stride, :] += cols[..., k:k + c]
            k += c
    if pad:
        out = np.ascontiguousarray(out[:, pad:pad + h, pad:pad + w, :])
    return out


def _stats(x, groups, eps):
    n, c = x.shape[0], x.shape[-1]
    xg = x.reshape(n, -1, groups, c // groups).astype(np.float64)
    mean = xg.mean(axis=(1, 3), keepdims=True)
    xc = xg - mean
    var = (xc * xc).mean(axis=(1, 3), keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    return (xc * rstd).reshape(x.shape).astype(x.dtype), rstd.reshape(n, groups).astype(x.dtype)


def _sigmoid(u):
    return 1.0 / (1.0 + np.exp(-u))


def group_norm_act_forward(x, gamma, beta, groups, eps, silu):
    """Group-normalize NHWC ``x`` per (sample, group), apply the affine, then SiLU if asked.

    Returns ``(y, xhat, rstd)`` with ``rstd`` shaped (N, groups).
    """
    xhat, rstd = _stats(x, groups, eps)
    u = xhat * gamma + beta
    y = u * _sigmoid(u) if silu else u
    return y.astype(x.dtype, copy=False), xhat, rstd


def group_norm_act_backward(dy, xhat, gamma, beta, rstd, groups, silu):
    """Returns ``(dx, dgamma, dbeta)`` for :func:`group_norm_act_forward`."""
    n, c = xhat.shape[0], xhat.shape[-1]
    if silu:
        u = xhat * gamma + beta
        s = _sigmoid(u)
        du = dy * (s * (1.0 + u * (1.0 - s)))
    else:
        du = dy
    dgamma = (du * xhat).reshape(-1, c).sum(axis=0)
    dbeta = du.reshape(-1, c).sum(axis=0)
    g = (du * gamma).reshape(n, -1, groups, c // groups)
    xh = xhat.reshape(g.shape)
    m1 = g.mean(axis=(1, 3), keepdims=True)
    m2 = (g * xh).mean(axis=(1, 3), keepdims=True)
    dx = (g - m1 - xh * m2) * rstd.reshape(n, 1, groups, 1)
    return dx.reshape(xhat.shape).astype(xhat.dtype, copy=False), dgamma, dbeta
