"""Ancestral sampling with classifier-free guidance."""

from dataclasses import dataclass

import numpy as np
from PIL import Image

from .embed import NULL, build_conditioning_batch
from .schedule import posterior_mean, posterior_mean_from_x0, predict_x0


class SamplerError(ValueError):
    pass


@dataclass
class SampleRequest:
    label: int = NULL
    guidance_weight: float = 0.5
    n_samples: int = 16
    seed: int = 0
    clamp_x0: bool = True
    variance: str = "posterior"

    def validate(self, num_classes=None):
        if self.n_samples < 1:
            raise SamplerError(f"n_samples must be >= 1, got {self.n_samples}")
        if self.guidance_weight < 0:
            raise SamplerError(f"guidance weight must be >= 0, got {self.guidance_weight}")
        if num_classes is not None and not (self.label == NULL or 0 <= self.label < num_classes):
            raise SamplerError(f"label {self.label} outside [0, {num_classes}) and not NULL")
        return self


def guided_noise(eps_cond, eps_uncond, w):
    """``(1 + w) * eps_cond - w * eps_uncond``.

    Evaluated as ``eps_cond + w * (eps_cond - eps_uncond)`` so agreement of
    the two predictions returns ``eps_cond`` exactly for every ``w``.
    """
    eps_cond = np.asarray(eps_cond)
    eps_uncond = np.asarray(eps_uncond)
    if eps_cond.shape != eps_uncond.shape:
        raise SamplerError(f"guidance shape mismatch {eps_cond.shape} vs {eps_uncond.shape}")
    if w < 0:
        raise SamplerError(f"guidance weight must be >= 0, got {w}")
    if w == 0:
        return eps_cond
    dt = eps_cond.dtype.type if eps_cond.dtype.kind == "f" else float
    return eps_cond + dt(w) * (eps_cond - eps_uncond)


def ddpm_sample(eps_model, table, sched, request, d_t, image_shape, skip_uncond_at_zero=True,
                dtype=np.float32):
    """Run the reverse chain from ``x_T ~ N(0, I)`` down to ``x_0``.

    ``eps_model(xt, t, z)`` predicts noise for a batch given per-example
    conditioning rows. With ``skip_uncond_at_zero`` the unconditional pass is
    skipped when ``w == 0``; the result is bit-identical either way because
    the conditional and unconditional passes are separate calls.
    """
    request.validate(table.num_classes)
    n = request.n_samples
    rng = np.random.default_rng(request.seed)
    x = rng.standard_normal((n,) + tuple(image_shape)).astype(dtype)
    w = float(request.guidance_weight)
    labels = np.full(n, request.label, dtype=np.int64)
    nulls = np.full(n, NULL, dtype=np.int64)
    for t in range(sched.T - 1, -1, -1):
        z_c = build_conditioning_batch(t, labels, table, d_t).astype(dtype, copy=False)
        eps_c = np.asarray(eps_model(x, t, z_c))
        if w == 0 and skip_uncond_at_zero:
            eps = eps_c
        else:
            z_u = build_conditioning_batch(t, nulls, table, d_t).astype(dtype, copy=False)
            eps = guided_noise(eps_c, np.asarray(eps_model(x, t, z_u)), w)
        if request.clamp_x0:
            x0 = np.clip(predict_x0(x, t, eps, sched), -1.0, 1.0)
            mean = posterior_mean_from_x0(x0, x, t, sched)
        else:
            mean = posterior_mean(x, t, eps, sched)
        if t > 0:
            sd = dtype(np.sqrt(sched.reverse_variance(t, request.variance)))
            x = (mean + sd * rng.standard_normal(x.shape).astype(dtype)).astype(dtype, copy=False)
        else:
            x = mean.astype(dtype, copy=False)
        if not np.isfinite(x).all():
            raise FloatingPointError(f"sampler state became non-finite at step {t}")
    return np.clip(x, -1.0, 1.0) if request.clamp_x0 else x


def sample_classes(eps_model, table, sched, per_class, w, seed, d_t, image_shape, labels=None,
                   clamp_x0=True, variance="posterior"):
    """One :func:`ddpm_sample` call per class; returns ``(images, labels)`` grouped by class."""
    if per_class < 1:
        raise SamplerError(f"per_class must be >= 1, got {per_class}")
    classes = range(table.num_classes) if labels is None else labels
    imgs, labs = [], []
    for c in classes:
        req = SampleRequest(label=int(c), guidance_weight=w, n_samples=per_class,
                            seed=int(np.random.SeedSequence([seed, int(c)]).generate_state(1)[0]),
                            clamp_x0=clamp_x0, variance=variance)
        imgs.append(ddpm_sample(eps_model, table, sched, req, d_t, image_shape))
        labs.append(np.full(per_class, c, dtype=np.int64))
    return np.concatenate(imgs), np.concatenate(labs)


def to_uint8(images):
    """[-1, 1] floats to 8-bit pixels."""
    return np.round((np.clip(images, -1.0, 1.0) + 1.0) * 127.5).astype(np.uint8)


def tile(images, rows, pad=1):
    """Arrange ``rows * cols`` NHWC images into one HWC uint8 canvas, row-major."""
    px = to_uint8(images)
    n, h, w, c = px.shape
    if n % rows:
        raise SamplerError(f"{n} images do not fill {rows} rows")
    cols = n // rows
    canvas = np.zeros((rows * (h + pad) + pad, cols * (w + pad) + pad, c), dtype=np.uint8)
    for i in range(n):
        r, k = divmod(i, cols)
        y, x = pad + r * (h + pad), pad + k * (w + pad)
        canvas[y:y + h, x:x + w] = px[i]
    return canvas


def write_png(path, canvas):
    Image.fromarray(canvas, mode="RGB" if canvas.shape[-1] == 3 else "L").save(path, format="PNG")


def read_png(path):
    with Image.open(path) as im:
        return np.asarray(im).copy()


def sample_grid(eps_model, table, sched, per_class, w, seed, d_t, image_shape, path=None, **kw):
    """Row-per-class grid. Returns ``(canvas, images, labels)`` and writes a PNG if ``path``."""
    images, labels = sample_classes(eps_model, table, sched, per_class, w, seed, d_t, image_shape, **kw)
    canvas = tile(images, rows=table.num_classes if kw.get("labels") is None else len(kw["labels"]))
    if path is not None:
        write_png(path, canvas)
    return canvas, images, labels
