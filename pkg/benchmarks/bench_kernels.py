"""Compiled vs numpy kernels: per-kernel timings plus one full denoiser training step.

    python3 benchmarks/bench_kernels.py --repeat 5
"""

import argparse
import time

import numpy as np

from protodiff import autograd as ag
from protodiff import kernels
from protodiff.denoiser import UNetConfig, build_unet, forward


def best_of(fn, repeat):
    fn()  # warm-up
    times = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        times.append(time.perf_counter() - t0)
    return min(times)


def kernel_cases(batch, rng):
    x = rng.standard_normal((batch, 16, 16, 32)).astype(np.float32)
    gamma = rng.standard_normal(32).astype(np.float32)
    beta = rng.standard_normal(32).astype(np.float32)
    cols = kernels.numpy_impl.im2col(x, 3, 3, 1, 1)
    y, xhat, rstd = kernels.numpy_impl.group_norm_act_forward(x, gamma, beta, 8, 1e-5, True)
    dy = rng.standard_normal(x.shape).astype(np.float32)
    return {
        "im2col 3x3": lambda impl: impl.im2col(x, 3, 3, 1, 1),
        "col2im 3x3": lambda impl: impl.col2im(cols, 16, 16, 3, 3, 1, 1),
        "group_norm+silu fwd": lambda impl: impl.group_norm_act_forward(x, gamma, beta, 8, 1e-5, True),
        "group_norm+silu bwd": lambda impl: impl.group_norm_act_backward(dy, xhat, gamma, beta, rstd, 8, True),
    }


def train_step_fn(batch, rng):
    cfg = UNetConfig(base_channels=16, ch_mult=(1, 2), blocks_per_res=1, cond_dim=256)
    params = build_unet(cfg, 0)
    xt = rng.standard_normal((batch, 16, 16, 3)).astype(np.float32)
    z = rng.standard_normal((batch, 256)).astype(np.float32)
    eps = rng.standard_normal(xt.shape).astype(np.float32)

    def step():
        P = {k: ag.Tensor(v, requires_grad=True) for k, v in params.items()}
        ag.mse(forward(P, xt, z, cfg, train=True, rng=np.random.default_rng(0)), eps).backward()

    return step


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--batch", type=int, default=64)
    p.add_argument("--repeat", type=int, default=5)
    args = p.parse_args(argv)
    if kernels.compiled_impl is None:
        print("compiled kernels unavailable; only the numpy fallback can be timed")
    impls = {"numpy": kernels.numpy_impl}
    if kernels.compiled_impl is not None:
        impls["cython"] = kernels.compiled_impl
    rng = np.random.default_rng(0)
    rows = []
    for name, fn in kernel_cases(args.batch, rng).items():
        rows.append((name, {k: best_of(lambda: fn(impl), args.repeat) for k, impl in impls.items()}))
    step = train_step_fn(args.batch, rng)
    timings = {}
    saved = kernels._impl
    try:
        for k, impl in impls.items():
            kernels._impl = impl
            timings[k] = best_of(step, max(1, args.repeat // 2))
    finally:
        kernels._impl = saved
    rows.append((f"train step (batch {args.batch})", timings))

    print(f"{'kernel':<28}" + "".join(f"{k + ' ms':>12}" for k in impls) + ("   speedup" if len(impls) > 1 else ""))
    for name, t in rows:
        line = f"{name:<28}" + "".join(f"{t[k] * 1e3:12.2f}" for k in impls)
        if len(impls) > 1:
            line += f"{t['numpy'] / t['cython']:9.2f}x"
        print(line)


if __name__ == "__main__":
    main()
