"""Convolutional prototype learning.

A feature extractor maps images to ``dim``-vectors and a codebook holds
``K`` learnable prototypes per class. Classification picks the class owning
the nearest prototype. Training minimizes a distance-based cross-entropy
plus a pull term on the distance to the nearest prototype.
"""

import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag
from .optim import Adam

log = logging.getLogger(__name__)


class ProtoError(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(eq=False)
class Codebook:
    """``prototypes`` has shape (C, K, dim)."""

    prototypes: np.ndarray

    def __post_init__(self):
        if self.prototypes.ndim != 3:
            raise ProtoError(f"prototypes must be (C, K, dim), got {self.prototypes.shape}")
        if not np.isfinite(self.prototypes).all():
            raise ProtoError("codebook contains non-finite prototype entries")

    @property
    def C(self):
        return self.prototypes.shape[0]

    @property
    def K(self):
        return self.prototypes.shape[1]

    @property
    def dim(self):
        return self.prototypes.shape[2]


@dataclass
class ProtoTrainConfig:
    gamma: float = 1.0
    lam: float = 0.01
    epochs: int = 20
    batch_size: int = 512
    learning_rate: float = 1e-4
    seed: int = 0
    dim: int = 128
    K: int = 1
    arch: str = "conv4"
    width: int = 16
    proto_init_scale: float = 0.1

    def validate(self):
        if not self.gamma > 0:
            raise ProtoError(f"gamma must be > 0, got {self.gamma}")
        if self.lam < 0:
            raise ProtoError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise ProtoError("epochs >= 0, batch_size >= 1 and learning_rate > 0 required")
        if self.arch not in ARCHS:
            raise ProtoError(f"unknown extractor arch {self.arch!r}; choose from {sorted(ARCHS)}")
        return self


# ----------------------------------------------------------------------------
# distances, assignment and the loss on single samples


def _check_dim(features, codebook):
    f = np.asarray(features, dtype=np.float64)
    if f.shape[-1] != codebook.dim:
        raise ProtoError(f"feature size {f.shape[-1]} != codebook dim {codebook.dim}")
    return f


def squared_distances(features, codebook):
    """``||f - e_ij||^2`` with shape (..., C, K)."""
    f = _check_dim(features, codebook)
    e = np.asarray(codebook.prototypes, dtype=np.float64)
    diff = f[..., None, None, :] - e
    return np.einsum("...d,...d->...", diff, diff)


def assign_class(features, codebook):
    """Class of the nearest prototype; ties go to the lowest class index."""
    d = squared_distances(features, codebook)
    return np.argmin(d.min(axis=-1), axis=-1)


def _log_softmax_flat(logits):
    m = logits.max(axis=-1, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def proto_probabilities(features, codebook, gamma):
    """Softmax of ``-gamma * ||f - e_ij||^2`` over all (class, prototype) pairs, shaped (..., C, K)."""
    if not gamma > 0:
        raise ProtoError(f"gamma must be > 0, got {gamma}")
    d = squared_distances(features, codebook)
    lead = d.shape[:-2]
    logp = _log_softmax_flat((-gamma * d).reshape(lead + (-1,)))
    return np.exp(logp).reshape(d.shape)


def class_probabilities(features, codebook, gamma):
    """Per-class posterior: :func:`proto_probabilities` summed over prototypes."""
    return proto_probabilities(features, codebook, gamma).sum(axis=-1)


def cpl_loss(features, label, codebook, gamma, lam):
    """Distance cross-entropy for ``label`` plus ``lam`` times the squared distance to the
    globally nearest prototype."""
    if not (0 <= label < codebook.C):
        raise ProtoError(f"label {label} outside [0, {codebook.C})")
    if not gamma > 0:
        raise ProtoError(f"gamma must be > 0, got {gamma}")
    d = squared_distances(features, codebook)
    logits = (-gamma * d).ravel()
    m = logits.max()
    lse_all = m + math.log(np.exp(logits - m).sum())
    own = -gamma * d[label]
    mo = own.max()
    lse_own = mo + math.log(np.exp(own - mo).sum())
    return float(lse_all - lse_own + lam * d.min())


def cpl_loss_op(features, labels, prototypes, gamma, lam):
    """Batch-mean :func:`cpl_loss` as a differentiable op.

    ``features`` is an (N, dim) :class:`Tensor`, ``prototypes`` a (C, K, dim)
    Tensor and ``labels`` an integer array.
    """
    f = features.data
    e = prototypes.data
    labels = np.asarray(labels)
    n = f.shape[0]
    c, k, _ = e.shape
    diff = f[:, None, None, :] - e[None]
    d = np.einsum("nckd,nckd->nck", diff, diff)
    logits = (-gamma * d).reshape(n, c * k)
    logits = logits - logits.max(axis=1, keepdims=True)
    p = np.exp(logits)
    p /= p.sum(axis=1, keepdims=True)
    own = -gamma * d[np.arange(n), labels]
    own = own - own.max(axis=1, keepdims=True)
    r = np.exp(own)
    own_mass = r.sum(axis=1, keepdims=True)
    r /= own_mass
    lse_gap = np.log(np.exp(logits).sum(axis=1)) - np.log(own_mass[:, 0]) \
        + (-gamma * d).reshape(n, -1).max(axis=1) - (-gamma * d[np.arange(n), labels]).max(axis=1)
    closest = np.argmin(d.reshape(n, -1), axis=1)
    reg = d.reshape(n, -1)[np.arange(n), closest]
    loss = np.mean(lse_gap + lam * reg)

    def backward(g):
        dd = -gamma * p.reshape(n, c, k)
        dd[np.arange(n), labels] += gamma * r
        dd.reshape(n, -1)[np.arange(n), closest] += lam
        dd *= g / n
        w = dd[..., None] * (2.0 * diff)
        if features.requires_grad:
            ag._accum(features, w.sum(axis=(1, 2)).astype(f.dtype, copy=False))
        if prototypes.requires_grad:
            ag._accum(prototypes, (-w.sum(axis=0)).astype(e.dtype, copy=False))

    return ag._result(np.asarray(loss, dtype=f.dtype), (features, prototypes), backward)


# ----------------------------------------------------------------------------
# feature extractors


def _fan_in_uniform(rng, shape, fan_in):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _conv_entry(path, k, cin, cout):
    return [(path + ".weight", (k, k, cin, cout), k * k * cin), (path + ".bias", (cout,), "zero")]


def _conv4_plan(in_ch, dim, width):
    w1, w2, w3 = width, 2 * width, 4 * width
    plan = []
    plan += _conv_entry("conv1", 3, in_ch, w1)
    plan += _conv_entry("conv2", 3, w1, w2)
    plan += _conv_entry("conv3", 3, w2, w3)
    plan += [("head.weight", (w3, dim), w3), ("head.bias", (dim,), "zero")]
    return plan


def _conv4_forward(P, x):
    h = ag.relu(ag.conv2d(x, P["conv1.weight"], P["conv1.bias"], padding=1))
    h = ag.relu(ag.conv2d(h, P["conv2.weight"], P["conv2.bias"], stride=2, padding=1))
    h = ag.relu(ag.conv2d(h, P["conv3.weight"], P["conv3.bias"], stride=2, padding=1))
    return ag.linear(ag.global_avg_pool(h), P["head.weight"], P["head.bias"])


_RESNET_STAGES = (1, 2, 4, 8)


def _norm_entry(path, c):
    return [(path + ".gamma", (c,), "one"), (path + ".beta", (c,), "zero")]


def _resnet18_plan(in_ch, dim, width):
    plan = _conv_entry("stem.conv", 3, in_ch, width) + _norm_entry("stem.norm", width)
    cin = width
    for s, mult in enumerate(_RESNET_STAGES):
        cout = width * mult
        for b in range(2):
            p = f"stage{s}.block{b}"
            plan += _conv_entry(p + ".conv1", 3, cin, cout) + _norm_entry(p + ".norm1", cout)
            plan += _conv_entry(p + ".conv2", 3, cout, cout) + _norm_entry(p + ".norm2", cout)
            if cin != cout:
                plan += _conv_entry(p + ".down", 1, cin, cout) + _norm_entry(p + ".down_norm", cout)
            cin = cout
    plan += [("head.weight", (cin, dim), cin), ("head.bias", (dim,), "zero")]
    return plan


def _gn(P, path, x):
    c = x.shape[-1]
    return ag.group_norm(x, P[path + ".gamma"], P[path + ".beta"], math.gcd(32, c))


def _resnet18_forward(P, x):
    h = ag.relu(_gn(P, "stem.norm", ag.conv2d(x, P["stem.conv.weight"], P["stem.conv.bias"], padding=1)))
    for s in range(len(_RESNET_STAGES)):
        for b in range(2):
            p = f"stage{s}.block{b}"
            stride = 2 if (s > 0 and b == 0) else 1
            o = ag.conv2d(h, P[p + ".conv1.weight"], P[p + ".conv1.bias"], stride=stride, padding=1)
            o = ag.relu(_gn(P, p + ".norm1", o))
            o = ag.conv2d(o, P[p + ".conv2.weight"], P[p + ".conv2.bias"], padding=1)
            o = _gn(P, p + ".norm2", o)
            if p + ".down.weight" in P:
                sc = ag.conv2d(h, P[p + ".down.weight"], P[p + ".down.bias"], stride=stride)
                sc = _gn(P, p + ".down_norm", sc)
            else:
                sc = h
            h = ag.relu(o + sc)
    return ag.linear(ag.global_avg_pool(h), P["head.weight"], P["head.bias"])


ARCHS = {
    "conv4": (_conv4_plan, _conv4_forward),
    "resnet18": (_resnet18_plan, _resnet18_forward),
}


@dataclass(eq=False)
class FeatureExtractor:
    arch: str
    in_channels: int
    dim: int
    width: int
    params: dict = field(default_factory=dict)

    def spec(self):
        return {"arch": self.arch, "in_channels": self.in_channels, "dim": self.dim,
                "width": self.width}

    def forward(self, P, x):
        return ARCHS[self.arch][1](P, x)

    def __call__(self, images, batch_size=512):
        """Features for an (N, H, W, C) batch, evaluated without a graph."""
        images = np.asarray(images, dtype=np.float32)
        if images.ndim != 4 or images.shape[-1] != self.in_channels:
            raise ProtoError(f"extractor expects (N, H, W, {self.in_channels}) images, got {images.shape}")
        P = {k: ag.Tensor(v) for k, v in self.params.items()}
        outs = []
        with ag.no_grad():
            for i in range(0, images.shape[0], batch_size):
                outs.append(self.forward(P, images[i:i + batch_size]).data)
        return np.concatenate(outs, axis=0) if outs else np.zeros((0, self.dim), np.float32)


def build_extractor(arch, in_channels, dim, seed, width=16, dtype=np.float32):
    if arch not in ARCHS:
        raise ProtoError(f"unknown extractor arch {arch!r}")
    rng = np.random.default_rng(seed)
    params = {}
    for path, shape, init in ARCHS[arch][0](in_channels, dim, width):
        if init == "zero":
            arr = np.zeros(shape)
        elif init == "one":
            arr = np.ones(shape)
        else:
            arr = _fan_in_uniform(rng, shape, init)
        params[path] = arr.astype(dtype)
    return FeatureExtractor(arch, in_channels, dim, width, params)


# ----------------------------------------------------------------------------
# training


def _batch_loss(extractor, prototypes, images, labels, gamma, lam, dtype):
    P = {k: ag.Tensor(v, requires_grad=True) for k, v in extractor.params.items()}
    E = ag.Tensor(prototypes, requires_grad=True)
    feats = extractor.forward(P, ag.Tensor(np.asarray(images, dtype=dtype)))
    loss = cpl_loss_op(feats, labels, E, gamma, lam)
    loss.backward()
    return float(loss.data), {k: t.grad for k, t in P.items()}, E.grad


def cpl_loss_gradients(images, labels, extractor, codebook, config):
    """Mean batch loss and exact gradients w.r.t. every extractor tensor and prototype.

    Returns ``(loss, extractor_grads, prototype_grad)``.
    """
    if len(labels) == 0:
        raise ProtoError("empty batch")
    dtype = codebook.prototypes.dtype
    return _batch_loss(extractor, codebook.prototypes, images, labels, config.gamma, config.lam, dtype)


def accuracy(extractor, codebook, images, labels):
    pred = assign_class(extractor(images), codebook)
    return float(np.mean(pred == np.asarray(labels)))


def train_prototypes(images, labels, config, eval_set=None, num_classes=None):
    """Jointly fit the feature extractor and codebook with Adam.

    Returns ``(extractor, codebook, history)`` where ``history`` holds one dict
    per epoch with mean loss and nearest-prototype accuracy (on ``eval_set``
    when given, else on the training data).
    """
    config.validate()
    labels = np.asarray(labels)
    images = np.asarray(images, dtype=np.float32)
    c = int(num_classes if num_classes is not None else labels.max() + 1)
    missing = sorted(set(range(c)) - set(np.unique(labels).tolist()))
    if missing:
        raise ProtoError(f"training data has no examples of classes {missing}")
    rng = np.random.default_rng(config.seed)
    extractor = build_extractor(config.arch, images.shape[-1], config.dim,
                                int(rng.integers(2**63)), width=config.width)
    protos = (rng.standard_normal((c, config.K, config.dim)) * config.proto_init_scale).astype(np.float32)
    opt = Adam(config.learning_rate)
    params = dict(extractor.params)
    params["__prototypes__"] = protos
    n = images.shape[0]
    history = []
    ev_images, ev_labels = eval_set if eval_set is not None else (images, labels)
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        losses = []
        for step, lo in enumerate(range(0, n, config.batch_size)):
            idx = order[lo:lo + config.batch_size]
            loss, grads, gproto = _batch_loss(extractor, protos, images[idx], labels[idx],
                                              config.gamma, config.lam, np.float32)
            if not math.isfinite(loss):
                raise NonFiniteLoss(f"prototype loss became {loss} at epoch {epoch}, step {step}")
            grads["__prototypes__"] = gproto
            opt.step(params, grads)
            losses.append(loss)
        codebook = Codebook(protos.copy())
        acc = accuracy(extractor, codebook, ev_images, ev_labels)
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "accuracy": acc})
        log.info("proto epoch %d loss %.4f acc %.4f", epoch + 1, history[-1]["loss"], acc)
    return extractor, Codebook(protos.copy()), history


# ----------------------------------------------------------------------------
# projection for visualization


@dataclass
class PCAResult:
    coords: np.ndarray
    basis: np.ndarray
    mean: np.ndarray
    explained_variance_ratio: np.ndarray
    rank_deficient: bool

    def transform(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) @ self.basis


def pca_project(features, out_dim=2, tol=1e-10):
    """Project mean-centered rows onto the leading principal axes.

    Axes are ordered by decreasing variance and signed so that each axis's
    largest-magnitude entry is positive. If the data span fewer than
    ``out_dim`` directions, only the available axes are returned and
    ``rank_deficient`` is set.
    """
    x = np.asarray(features, dtype=np.float64)
    n, d = x.shape
    if out_dim not in (1, 2, 3):
        raise ProtoError(f"out_dim must be 1, 2 or 3, got {out_dim}")
    if n < out_dim:
        raise ProtoError(f"need at least {out_dim} rows, got {n}")
    mean = x.mean(axis=0)
    xc = x - mean
    cov = xc.T @ xc / max(n - 1, 1)
    evals, evecs = np.linalg.eigh(cov)
    order = np.argsort(evals)[::-1]
    evals = np.clip(evals[order], 0.0, None)
    evecs = evecs[:, order]
    total = evals.sum()
    keep = out_dim
    available = int(np.sum(evals > tol * max(total, 1e-300)))
    rank_deficient = available < out_dim
    if rank_deficient:
        keep = max(available, 0)
    basis = evecs[:, :keep]
    for j in range(keep):
        if basis[np.argmax(np.abs(basis[:, j])), j] < 0:
            basis[:, j] = -basis[:, j]
    ratio = evals[:keep] / total if total > 0 else np.zeros(keep)
    return PCAResult(xc @ basis, basis, mean, ratio, rank_deficient)


def prototype_in_class_hull(pca, features, labels, codebook):
    """For each class, whether its projected prototype lies in the convex hull of
    that class's projected features (2-D projections)."""
    from scipy.spatial import Delaunay

    pts = pca.transform(features)
    protos = pca.transform(codebook.prototypes[:, 0, :])
    labels = np.asarray(labels)
    inside = []
    for i in range(codebook.C):
        tri = Delaunay(pts[labels == i])
        inside.append(bool(tri.find_simplex(protos[i][None])[0] >= 0))
    return inside


def config_dict(config):
    return asdict(config)
