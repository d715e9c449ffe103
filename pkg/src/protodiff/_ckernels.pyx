# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled NHWC kernels for convolution unfolding and group normalization.

Drop-in replacement for ``protodiff._pykernels``. The im2col/col2im loops
visit kernel offsets in the same order as the numpy fallback so results are
bit-identical; group-norm statistics accumulate in double precision.
"""

import numpy as np
cimport numpy as cnp
from libc.math cimport exp, expf, sqrt

cnp.import_array()

ctypedef fused floating:
    float
    double


cdef inline Py_ssize_t _out_size(Py_ssize_t size, int k, int stride, int pad) noexcept nogil:
    return (size + 2 * pad - k) // stride + 1


def im2col(floating[:, :, :, ::1] x, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = x.shape[0], h = x.shape[1], w = x.shape[2], c = x.shape[3]
    cdef Py_ssize_t ho = _out_size(h, kh, stride, pad)
    cdef Py_ssize_t wo = _out_size(w, kw, stride, pad)
    cdef Py_ssize_t kc = kh * kw * c
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((n, ho, wo, kc), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oh, ow, ih, iw, ch
    cdef int i, j
    cdef floating *dst
    cdef floating *src
    with nogil:
        for b in range(n):
            for oh in range(ho):
                for ow in range(wo):
                    dst = &out[b, oh, ow, 0]
                    for i in range(kh):
                        ih = oh * stride - pad + i
                        for j in range(kw):
                            iw = ow * stride - pad + j
                            if 0 <= ih < h and 0 <= iw < w:
                                src = &x[b, ih, iw, 0]
                                for ch in range(c):
                                    dst[ch] = src[ch]
                            else:
                                for ch in range(c):
                                    dst[ch] = 0
                            dst = dst + c
    return out_arr


def col2im(floating[:, :, :, ::1] cols, Py_ssize_t h, Py_ssize_t w, int kh, int kw, int stride, int pad):
    cdef Py_ssize_t n = cols.shape[0], ho = cols.shape[1], wo = cols.shape[2]
    cdef Py_ssize_t c = cols.shape[3] // (kh * kw)
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.zeros((n, h, w, c), dtype=dtype)
    cdef floating[:, :, :, ::1] out = out_arr
    cdef Py_ssize_t b, oh, ow, ih, iw, k, ch
    cdef int i, j
    cdef floating *dst
    cdef floating *src
    with nogil:
        for b in range(n):
            # kernel offsets outer: per-element accumulation order matches the fallback
            for i in range(kh):
                for j in range(kw):
                    k = (i * kw + j) * c
                    for oh in range(ho):
                        ih = oh * stride - pad + i
                        if ih < 0 or ih >= h:
                            continue
                        for ow in range(wo):
                            iw = ow * stride - pad + j
                            if iw < 0 or iw >= w:
                                continue
                            dst = &out[b, ih, iw, 0]
                            src = &cols[b, oh, ow, k]
                            for ch in range(c):
                                dst[ch] = dst[ch] + src[ch]
    return out_arr


def group_norm_act_forward(floating[:, :, :, ::1] x, floating[::1] gamma, floating[::1] beta,
                           int groups, double eps, bint silu):
    """Returns ``(y, xhat, rstd)`` with ``y = act(xhat * gamma + beta)``."""
    cdef Py_ssize_t n = x.shape[0], c = x.shape[3]
    cdef Py_ssize_t hw = x.shape[1] * x.shape[2]
    cdef Py_ssize_t cg = c // groups
    cdef double count = <double>(hw * cg)
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((x.shape[0], x.shape[1], x.shape[2], c), dtype=dtype)
    xhat_arr = np.empty_like(y_arr)
    rstd_arr = np.empty((n, groups), dtype=dtype)
    cdef floating *px = &x[0, 0, 0, 0]
    cdef floating *py = <floating *>cnp.PyArray_DATA(y_arr)
    cdef floating *ph = <floating *>cnp.PyArray_DATA(xhat_arr)
    cdef floating[:, ::1] rstd = rstd_arr
    cdef double[::1] cs1 = np.empty(c)
    cdef double[::1] cs2 = np.empty(c)
    scale_arr = np.empty(c, dtype=dtype)
    shift_arr = np.empty(c, dtype=dtype)
    cdef floating[::1] scale = scale_arr
    cdef floating[::1] shift = shift_arr
    cdef floating *row
    cdef floating *hrow
    cdef floating *yrow
    cdef Py_ssize_t b, p, g, cc, ch
    cdef double a, q, mu, var, rs
    cdef floating v, u
    with nogil:
        for b in range(n):
            for ch in range(c):
                cs1[ch] = 0.0
                cs2[ch] = 0.0
            for p in range(hw):
                row = px + (b * hw + p) * c
                for ch in range(c):
                    cs1[ch] += row[ch]
                    cs2[ch] += <double>row[ch] * row[ch]
            for g in range(groups):
                a = 0.0
                q = 0.0
                for cc in range(cg):
                    a += cs1[g * cg + cc]
                    q += cs2[g * cg + cc]
                mu = a / count
                var = q / count - mu * mu
                if var < 0.0:
                    var = 0.0
                rs = 1.0 / sqrt(var + eps)
                rstd[b, g] = <floating>rs
                for cc in range(cg):
                    scale[g * cg + cc] = <floating>rs
                    shift[g * cg + cc] = <floating>(-mu * rs)
            for p in range(hw):
                row = px + (b * hw + p) * c
                hrow = ph + (b * hw + p) * c
                yrow = py + (b * hw + p) * c
                for ch in range(c):
                    v = row[ch] * scale[ch] + shift[ch]
                    hrow[ch] = v
                    yrow[ch] = v * gamma[ch] + beta[ch]
                if silu:
                    for ch in range(c):
                        u = yrow[ch]
                        if floating is float:
                            yrow[ch] = u / (1.0 + expf(-u))
                        else:
                            yrow[ch] = u / (1.0 + exp(-u))
    return y_arr, xhat_arr, rstd_arr


def group_norm_act_backward(floating[:, :, :, ::1] dy, floating[:, :, :, ::1] xhat,
                            floating[::1] gamma, floating[::1] beta, floating[:, ::1] rstd,
                            int groups, bint silu):
    """Returns ``(dx, dgamma, dbeta)`` for :func:`group_norm_act_forward`."""
    cdef Py_ssize_t n = xhat.shape[0], c = xhat.shape[3]
    cdef Py_ssize_t hw = xhat.shape[1] * xhat.shape[2]
    cdef Py_ssize_t cg = c // groups
    cdef double count = <double>(hw * cg)
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.empty((xhat.shape[0], xhat.shape[1], xhat.shape[2], c), dtype=dtype)
    cdef floating *pdy = &dy[0, 0, 0, 0]
    cdef floating *ph = &xhat[0, 0, 0, 0]
    cdef floating *pdx = <floating *>cnp.PyArray_DATA(dx_arr)
    cdef double[::1] dgam = np.zeros(c)
    cdef double[::1] dbet = np.zeros(c)
    cdef double[::1] c1 = np.empty(c)
    cdef double[::1] c2 = np.empty(c)
    m1_arr = np.empty(c, dtype=dtype)
    m2_arr = np.empty(c, dtype=dtype)
    rs_arr = np.empty(c, dtype=dtype)
    cdef floating[::1] m1 = m1_arr
    cdef floating[::1] m2 = m2_arr
    cdef floating[::1] rsc = rs_arr
    cdef floating *drow
    cdef floating *hrow
    cdef floating *xrow
    cdef Py_ssize_t b, p, g, cc, ch
    cdef double a, q
    cdef floating xh, u, s, du, dxh
    with nogil:
        for b in range(n):
            for ch in range(c):
                c1[ch] = 0.0
                c2[ch] = 0.0
            for p in range(hw):
                drow = pdy + (b * hw + p) * c
                hrow = ph + (b * hw + p) * c
                xrow = pdx + (b * hw + p) * c
                for ch in range(c):
                    xh = hrow[ch]
                    du = drow[ch]
                    if silu:
                        u = xh * gamma[ch] + beta[ch]
                        if floating is float:
                            s = 1.0 / (1.0 + expf(-u))
                        else:
                            s = 1.0 / (1.0 + exp(-u))
                        du = du * s * (1 + u * (1 - s))
                    dgam[ch] += du * xh
                    dbet[ch] += du
                    dxh = du * gamma[ch]
                    c1[ch] += dxh
                    c2[ch] += dxh * xh
                    xrow[ch] = dxh
            for g in range(groups):
                a = 0.0
                q = 0.0
                for cc in range(cg):
                    a += c1[g * cg + cc]
                    q += c2[g * cg + cc]
                for cc in range(cg):
                    m1[g * cg + cc] = <floating>(a / count)
                    m2[g * cg + cc] = <floating>(q / count)
                    rsc[g * cg + cc] = rstd[b, g]
            for p in range(hw):
                hrow = ph + (b * hw + p) * c
                xrow = pdx + (b * hw + p) * c
                for ch in range(c):
                    xrow[ch] = (xrow[ch] - m1[ch] - hrow[ch] * m2[ch]) * rsc[ch]
    return dx_arr, np.asarray(dgam).astype(dtype), np.asarray(dbet).astype(dtype)
