"""Datasets: the synthetic hue-shapes generator, the CIFAR-10 binary reader and resizing.

Images are float32 NHWC arrays scaled to [-1, 1]; labels are int64.
"""

import colorsys
from dataclasses import asdict, dataclass

import numpy as np

from . import container

SHAPES = ("disc", "square", "cross", "ring")
CIFAR_RECORD = 1 + 3 * 32 * 32


class DatasetError(ValueError):
    pass


@dataclass
class SyntheticDatasetSpec:
    C: int = 3
    n_per_class: int = 700
    image_size: int = 16
    seed: int = 0
    generator: str = "hue-shapes"
    noise_sigma: float = 0.02
    n_total: int = 0  # overrides C * n_per_class when > 0; classes stay balanced to within one

    @property
    def size(self):
        return self.n_total if self.n_total > 0 else self.C * self.n_per_class

    def validate(self):
        if self.generator != "hue-shapes":
            raise DatasetError(f"unknown generator {self.generator!r}")
        if self.C < 1 or self.n_per_class < 1 or self.image_size < 8:
            raise DatasetError("need C >= 1, n_per_class >= 1 and image_size >= 8")
        return self


@dataclass
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    num_classes: int
    meta: dict

    def __len__(self):
        return self.images.shape[0]

    def split(self, fraction, seed=0):
        """Stratified split into (first, second) with ``fraction`` of each class in the first."""
        rng = np.random.default_rng(seed)
        a, b = [], []
        for c in range(self.num_classes):
            idx = rng.permutation(np.flatnonzero(self.labels == c))
            k = int(round(fraction * idx.size))
            a.append(idx[:k])
            b.append(idx[k:])
        a, b = np.sort(np.concatenate(a)), np.sort(np.concatenate(b))
        return (Dataset(self.images[a], self.labels[a], self.num_classes, dict(self.meta)),
                Dataset(self.images[b], self.labels[b], self.num_classes, dict(self.meta)))


def _shape_mask(kind, size, cy, cx, r):
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    dy, dx = yy - cy, xx - cx
    if kind == "disc":
        return dy ** 2 + dx ** 2 <= r ** 2
    if kind == "square":
        return (np.abs(dy) <= r * 0.85) & (np.abs(dx) <= r * 0.85)
    if kind == "cross":
        arm = max(r * 0.35, 0.75)
        return ((np.abs(dy) <= arm) & (np.abs(dx) <= r)) | ((np.abs(dx) <= arm) & (np.abs(dy) <= r))
    if kind == "ring":
        d2 = dy ** 2 + dx ** 2
        return (d2 <= r ** 2) & (d2 >= (0.55 * r) ** 2)
    raise DatasetError(f"unknown shape {kind!r}")


def class_style(c, C):
    """Hue band centre and shape for class ``c``."""
    return (c + 0.5) / C, SHAPES[c % len(SHAPES)]


def _render(rng, c, spec):
    s = spec.image_size
    hue_c, kind = class_style(c, spec.C)
    hue = (hue_c + rng.uniform(-0.25, 0.25) / spec.C) % 1.0
    sat = rng.uniform(0.75, 1.0)
    val = rng.uniform(0.8, 1.0)
    rgb = np.array(colorsys.hsv_to_rgb(hue, sat, val))
    r = s * rng.uniform(0.26, 0.36)
    cy = s / 2 + rng.uniform(-0.12, 0.12) * s
    cx = s / 2 + rng.uniform(-0.12, 0.12) * s
    mask = _shape_mask(kind, s, cy, cx, r)
    img = np.full((s, s, 3), -0.8)
    img[mask] = rgb * 2.0 - 1.0
    img += rng.normal(0.0, spec.noise_sigma, size=img.shape)
    return np.clip(img, -1.0, 1.0)


def hue_shapes(spec):
    """Generate a class-balanced hue-shapes dataset, ordered by a seeded shuffle."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    n = spec.size
    labels = (np.arange(n) % spec.C).astype(np.int64)[rng.permutation(n)]
    images = np.stack([_render(rng, int(c), spec) for c in labels]).astype(np.float32)
    return Dataset(images, labels, spec.C, {"source": "hue-shapes", "spec": asdict(spec)})


def nearest_centroid_accuracy(train, test):
    """Accuracy of a raw-pixel nearest-centroid classifier fit on ``train``."""
    xs = train.images.reshape(len(train), -1).astype(np.float64)
    cents = np.stack([xs[train.labels == c].mean(axis=0) for c in range(train.num_classes)])
    xt = test.images.reshape(len(test), -1).astype(np.float64)
    d = ((xt[:, None, :] - cents[None]) ** 2).sum(-1)
    return float(np.mean(np.argmin(d, axis=1) == test.labels))


def self_test(spec, threshold=0.99):
    """Generator check: nearest-centroid accuracy on a held-out split."""
    ds = hue_shapes(spec)
    train, test = ds.split(0.5, seed=spec.seed + 1)
    acc = nearest_centroid_accuracy(train, test)
    if acc < threshold:
        raise DatasetError(f"hue-shapes self-test failed: nearest-centroid accuracy {acc:.4f} < {threshold}")
    return acc


def read_cifar10_binary(path):
    """Parse a CIFAR-10 binary batch file: 3073-byte records, label byte then R, G, B planes."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if not raw:
        raise DatasetError(f"{path}: empty dataset file")
    if len(raw) % CIFAR_RECORD:
        whole = len(raw) // CIFAR_RECORD
        raise DatasetError(
            f"{path}: truncated record {whole} at byte offset {whole * CIFAR_RECORD} "
            f"(file size {len(raw)} is not a multiple of {CIFAR_RECORD})")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise DatasetError(f"{path}: label byte {labels[i]} > 9 in record {i} at byte offset {i * CIFAR_RECORD}")
    planes = rec[:, 1:].reshape(-1, 3, 32, 32).transpose(0, 2, 3, 1)
    images = (planes.astype(np.float32) / 127.5 - 1.0).astype(np.float32)
    return Dataset(np.ascontiguousarray(images), labels, 10, {"source": "cifar10-binary", "path": str(path)})


def resize(images, size, method="nearest"):
    """Resize an NHWC batch to ``size`` x ``size`` (nearest or bilinear, half-pixel centres)."""
    images = np.asarray(images)
    n, h, w, c = images.shape
    if method == "nearest":
        ys = np.minimum(((np.arange(size) + 0.5) * h / size).astype(int), h - 1)
        xs = np.minimum(((np.arange(size) + 0.5) * w / size).astype(int), w - 1)
        return images[:, ys][:, :, xs]
    if method != "bilinear":
        raise DatasetError(f"unknown resize method {method!r}")

    def axis(src, dst):
        pos = np.clip((np.arange(dst) + 0.5) * src / dst - 0.5, 0, src - 1)
        lo = np.floor(pos).astype(int)
        hi = np.minimum(lo + 1, src - 1)
        return lo, hi, pos - lo

    y0, y1, fy = axis(h, size)
    x0, x1, fx = axis(w, size)
    fy = fy[None, :, None, None]
    fx = fx[None, None, :, None]
    top = images[:, y0][:, :, x0] * (1 - fx) + images[:, y0][:, :, x1] * fx
    bot = images[:, y1][:, :, x0] * (1 - fx) + images[:, y1][:, :, x1] * fx
    return (top * (1 - fy) + bot * fy).astype(images.dtype)


def save_dataset(path, ds, extra_header=None):
    header = {"kind": "dataset", "num_classes": ds.num_classes, "meta": ds.meta}
    header.update(extra_header or {})
    container.save(path, header, {"images": ds.images, "labels": ds.labels})


def load_dataset(path):
    header, t = container.load(path)
    if header.get("kind") != "dataset":
        raise DatasetError(f"{path}: not a dataset file (kind={header.get('kind')!r})")
    return Dataset(t["images"], t["labels"], int(header["num_classes"]), header.get("meta", {})), header
