import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from protodiff import _pykernels as py
from protodiff import kernels

needs_compiled = pytest.mark.skipif(kernels.compiled_impl is None, reason="compiled kernels not built")


def test_backend_flag():
    assert kernels.BACKEND in ("cython", "numpy")


@needs_compiled
@given(n=st.integers(1, 3), h=st.integers(3, 9), c=st.integers(1, 5), k=st.sampled_from([1, 2, 3]),
       stride=st.sampled_from([1, 2]), pad=st.sampled_from([0, 1]), dt=st.sampled_from([np.float32, np.float64]),
       seed=st.integers(0, 2**16))
def test_unfold_backends_bit_identical(n, h, c, k, stride, pad, dt, seed):
    x = np.random.default_rng(seed).standard_normal((n, h, h, c)).astype(dt)
    a = py.im2col(x, k, k, stride, pad)
    b = kernels.compiled_impl.im2col(x, k, k, stride, pad)
    np.testing.assert_array_equal(a, b)
    g = np.random.default_rng(seed + 1).standard_normal(a.shape).astype(dt)
    np.testing.assert_array_equal(py.col2im(g, h, h, k, k, stride, pad),
                                  kernels.compiled_impl.col2im(g, h, h, k, k, stride, pad))


@needs_compiled
@pytest.mark.parametrize("silu", [False, True])
@pytest.mark.parametrize("dt,tol", [(np.float64, 1e-10), (np.float32, 2e-5)])
def test_group_norm_backends_agree(rng, silu, dt, tol):
    x = (rng.standard_normal((3, 5, 5, 16)) * 2 + 1).astype(dt)
    g = rng.standard_normal(16).astype(dt)
    b = rng.standard_normal(16).astype(dt)
    ya, ha, ra = py.group_norm_act_forward(x, g, b, 8, 1e-5, silu)
    yb, hb, rb = kernels.compiled_impl.group_norm_act_forward(x, g, b, 8, 1e-5, silu)
    for u, v in ((ya, yb), (ha, hb), (ra, rb)):
        np.testing.assert_allclose(u, v, rtol=tol, atol=tol)
    dy = rng.standard_normal(x.shape).astype(dt)
    for u, v in zip(py.group_norm_act_backward(dy, ha, g, b, ra, 8, silu),
                    kernels.compiled_impl.group_norm_act_backward(dy, ha, g, b, ra, 8, silu)):
        np.testing.assert_allclose(u, v, rtol=tol * 10, atol=tol * 10)


def test_col2im_is_adjoint_of_im2col(rng):
    x = rng.standard_normal((2, 6, 6, 3))
    cols = kernels.im2col(x, 3, 3, 2, 1)
    g = rng.standard_normal(cols.shape)
    lhs = float(np.sum(cols * g))
    rhs = float(np.sum(x * kernels.col2im(g, 6, 6, 3, 3, 2, 1)))
    assert abs(lhs - rhs) < 1e-10 * max(1.0, abs(lhs))
