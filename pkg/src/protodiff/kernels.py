"""Hot-kernel dispatch.

The compiled extension ``protodiff._ckernels`` is used when it imports;
otherwise the numpy fallback in ``protodiff._pykernels`` is selected. Set
``PROTODIFF_KERNELS=numpy`` to force the fallback.
"""

import os

from . import _pykernels

numpy_impl = _pykernels
compiled_impl = None

if os.environ.get("PROTODIFF_KERNELS", "").lower() not in ("numpy", "python", "py"):
    try:
        from . import _ckernels as compiled_impl
    except ImportError:  # extension not built
        compiled_impl = None

_impl = compiled_impl if compiled_impl is not None else numpy_impl
BACKEND = "cython" if compiled_impl is not None and _impl is compiled_impl else "numpy"


def _contig(a):
    return a if a.flags.c_contiguous else a.copy()


def im2col(x, kh, kw, stride=1, pad=0):
    return _impl.im2col(_contig(x), kh, kw, stride, pad)


def col2im(cols, h, w, kh, kw, stride=1, pad=0):
    return _impl.col2im(_contig(cols), h, w, kh, kw, stride, pad)


def group_norm_act_forward(x, gamma, beta, groups, eps=1e-5, silu=False):
    return _impl.group_norm_act_forward(_contig(x), _contig(gamma), _contig(beta), groups, eps, silu)


def group_norm_act_backward(dy, xhat, gamma, beta, rstd, groups, silu=False):
    return _impl.group_norm_act_backward(_contig(dy), _contig(xhat), _contig(gamma), _contig(beta),
                                         _contig(rstd), groups, silu)
