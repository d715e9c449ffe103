"""Forward-process bookkeeping for Gaussian diffusion.

Steps are indexed from 0: index ``t`` here is step ``t + 1`` of a chain that
runs ``1..T``. All schedule arrays are float64; callers cast at the use site.
"""

from dataclasses import dataclass

import numpy as np


class ScheduleError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    """Precomputed variance schedule over ``T`` steps."""

    T: int
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_variances: np.ndarray
    beta_start: float
    beta_end: float
    family: str = "linear"

    def params(self):
        return {"T": self.T, "beta_start": self.beta_start, "beta_end": self.beta_end,
                "family": self.family}

    @property
    def alpha_bars_prev(self):
        return np.concatenate([[1.0], self.alpha_bars[:-1]])

    def reverse_variance(self, t, kind="posterior"):
        """Variance of the reverse step at ``t``: ``"posterior"`` or ``"beta"``."""
        if kind == "posterior":
            return self.posterior_variances[t]
        if kind == "beta":
            return self.betas[t]
        raise ScheduleError(f"unknown reverse variance {kind!r}")


def _freeze(a):
    a.setflags(write=False)
    return a


def make_linear_schedule(T, beta_start=1e-4, beta_end=0.02):
    """Linear betas from ``beta_start`` to ``beta_end`` inclusive."""
    if int(T) != T or T < 1:
        raise ScheduleError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_start <= beta_end < 1.0):
        raise ScheduleError(
            f"need 0 < beta_start <= beta_end < 1, got beta_start={beta_start}, beta_end={beta_end}")
    T = int(T)
    betas = np.linspace(beta_start, beta_end, T, dtype=np.float64)
    if T == 1:
        betas = np.array([beta_start], dtype=np.float64)
    return schedule_from_betas(betas, family="linear")


def schedule_from_betas(betas, family="custom"):
    """Schedule with explicit per-step variances (each in (0, 1))."""
    betas = np.array(betas, dtype=np.float64)
    if betas.ndim != 1 or betas.size < 1:
        raise ScheduleError("betas must be a non-empty 1-D sequence")
    if not ((betas > 0) & (betas < 1)).all():
        raise ScheduleError("every beta must lie strictly between 0 and 1")
    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    prev = np.concatenate([[1.0], alpha_bars[:-1]])
    post = betas * (1.0 - prev) / (1.0 - alpha_bars)
    return NoiseSchedule(betas.size, _freeze(betas), _freeze(alphas), _freeze(alpha_bars),
                         _freeze(post), float(betas[0]), float(betas[-1]), family)


def schedule_from_params(params):
    if params.get("family", "linear") != "linear":
        raise ScheduleError(f"unsupported schedule family {params['family']!r}")
    return make_linear_schedule(params["T"], params["beta_start"], params["beta_end"])


def _check_t(t, sched):
    ta = np.asarray(t)
    if ta.dtype.kind not in "iu":
        raise ScheduleError(f"step index must be integral, got {ta.dtype}")
    if ta.size and (ta.min() < 0 or ta.max() >= sched.T):
        raise ScheduleError(f"step index out of range [0, {sched.T}): {t!r}")
    return ta


def _coef(values, t, x):
    """Gather per-example coefficients and shape them to broadcast against ``x``."""
    c = values[t]
    if np.ndim(c) == 0:
        return x.dtype.type(c) if x.dtype.kind == "f" else c
    c = np.asarray(c, dtype=x.dtype if x.dtype.kind == "f" else np.float64)
    return c.reshape((-1,) + (1,) * (x.ndim - 1))


def _check_shapes(a, b, what):
    if np.shape(a) != np.shape(b):
        raise ScheduleError(f"{what}: shape mismatch {np.shape(a)} vs {np.shape(b)}")


def q_sample(x0, t, eps, sched):
    """Draw ``x_t`` from ``q(x_t | x_0)`` given the unit-Gaussian noise ``eps``.

    ``t`` is a scalar index or one index per leading-axis example.
    """
    x0 = np.asarray(x0)
    eps = np.asarray(eps)
    _check_shapes(x0, eps, "q_sample")
    t = _check_t(t, sched)
    a = _coef(np.sqrt(sched.alpha_bars), t, x0)
    s = _coef(np.sqrt(1.0 - sched.alpha_bars), t, x0)
    return a * x0 + s * eps


def predict_x0(xt, t, eps_hat, sched):
    """Invert :func:`q_sample` for ``x_0`` given a noise estimate."""
    xt = np.asarray(xt)
    eps_hat = np.asarray(eps_hat)
    _check_shapes(xt, eps_hat, "predict_x0")
    t = _check_t(t, sched)
    s = _coef(np.sqrt(1.0 - sched.alpha_bars), t, xt)
    r = _coef(1.0 / np.sqrt(sched.alpha_bars), t, xt)
    return (xt - s * eps_hat) * r


def posterior_mean(xt, t, eps_hat, sched):
    """Reverse-step mean ``(x_t - beta_t / sqrt(1 - abar_t) * eps_hat) / sqrt(alpha_t)``."""
    xt = np.asarray(xt)
    eps_hat = np.asarray(eps_hat)
    _check_shapes(xt, eps_hat, "posterior_mean")
    t = _check_t(t, sched)
    k = _coef(sched.betas / np.sqrt(1.0 - sched.alpha_bars), t, xt)
    r = _coef(1.0 / np.sqrt(sched.alphas), t, xt)
    return (xt - k * eps_hat) * r


def posterior_mean_from_x0(x0_hat, xt, t, sched):
    """Mean of ``q(x_{t-1} | x_t, x_0)`` written in terms of an ``x_0`` estimate.

    Agrees with :func:`posterior_mean` when ``x0_hat = predict_x0(xt, t, eps_hat)``.
    """
    t = _check_t(t, sched)
    prev = sched.alpha_bars_prev
    c0 = sched.betas * np.sqrt(prev) / (1.0 - sched.alpha_bars)
    ct = (1.0 - prev) * np.sqrt(sched.alphas) / (1.0 - sched.alpha_bars)
    return _coef(c0, t, xt) * x0_hat + _coef(ct, t, xt) * xt
