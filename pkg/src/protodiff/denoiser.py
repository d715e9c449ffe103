"""U-Net noise predictor built from the primitives in :mod:`protodiff.autograd`.

Conditioning path: the vector ``z`` (time features + class row) goes through
a two-layer SiLU perceptron to a shared hidden vector. Every residual block
projects that vector to its own channel count and adds it as a per-channel
bias after the block's first convolution.

Parameters live in a flat ``dict`` keyed by dotted path, e.g.
``enc.level0.block1.conv1.weight``.
"""

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autograd as ag


class DenoiserError(ValueError):
    pass


class NonFiniteActivation(FloatingPointError):
    def __init__(self, path):
        super().__init__(f"non-finite activation after {path}")
        self.path = path


@dataclass(frozen=True)
class UNetConfig:
    base_channels: int = 32
    ch_mult: tuple = (1, 2, 2)
    blocks_per_res: int = 2
    dropout_rate: float = 0.1
    cond_dim: int = 256
    cond_hidden: int = 0  # 0 means 4 * base_channels
    in_channels: int = 3
    out_channels: int = 3
    image_size: int = 16
    groups: int = 8

    def __post_init__(self):
        object.__setattr__(self, "ch_mult", tuple(int(m) for m in self.ch_mult))

    @property
    def hidden(self):
        return self.cond_hidden or 4 * self.base_channels

    def validate(self):
        if not self.ch_mult:
            raise DenoiserError("ch_mult must be non-empty")
        factor = 2 ** (len(self.ch_mult) - 1)
        if self.image_size % factor:
            raise DenoiserError(
                f"image_size {self.image_size} not divisible by 2^(levels-1) = {factor}")
        if not (0.0 <= self.dropout_rate < 1.0):
            raise DenoiserError(f"dropout_rate must lie in [0, 1), got {self.dropout_rate}")
        if min(self.base_channels, self.blocks_per_res, self.cond_dim) < 1:
            raise DenoiserError("base_channels, blocks_per_res and cond_dim must be >= 1")
        return self

    def to_dict(self):
        d = asdict(self)
        d["ch_mult"] = list(self.ch_mult)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


FULL_SCALE_UNET = UNetConfig(base_channels=64, ch_mult=(2, 2, 4, 4), blocks_per_res=2,
                        dropout_rate=0.1, image_size=32)
DESK_UNET = UNetConfig()


def _groups(cfg, channels):
    return math.gcd(cfg.groups, channels)


@dataclass
class _Plan:
    entries: list = field(default_factory=list)

    def conv(self, path, k, cin, cout, zero=False):
        self.entries.append((path + ".weight", (k, k, cin, cout), "zero" if zero else k * k * cin))
        self.entries.append((path + ".bias", (cout,), "zero"))

    def linear(self, path, nin, nout):
        self.entries.append((path + ".weight", (nin, nout), nin))
        self.entries.append((path + ".bias", (nout,), "zero"))

    def norm(self, path, c):
        self.entries.append((path + ".gamma", (c,), "one"))
        self.entries.append((path + ".beta", (c,), "zero"))

    def resblock(self, path, cin, cout, hidden):
        self.norm(path + ".norm1", cin)
        self.conv(path + ".conv1", 3, cin, cout)
        self.linear(path + ".cond", hidden, cout)
        self.norm(path + ".norm2", cout)
        self.conv(path + ".conv2", 3, cout, cout)
        if cin != cout:
            self.conv(path + ".skip", 1, cin, cout)


def _plan(cfg):
    p = _Plan()
    chans = [cfg.base_channels * m for m in cfg.ch_mult]
    levels = len(chans)
    hid = cfg.hidden
    p.linear("cond.fc1", cfg.cond_dim, hid)
    p.linear("cond.fc2", hid, hid)
    p.conv("in_conv", 3, cfg.in_channels, cfg.base_channels)
    ch = cfg.base_channels
    skips = []
    for lvl in range(levels):
        for b in range(cfg.blocks_per_res):
            p.resblock(f"enc.level{lvl}.block{b}", ch, chans[lvl], hid)
            ch = chans[lvl]
        skips.append(ch)
    p.resblock("mid.block0", ch, ch, hid)
    for lvl in reversed(range(levels)):
        if lvl < levels - 1:
            p.conv(f"dec.level{lvl}.up.conv", 3, ch, ch)
        ch = ch + skips[lvl]
        for b in range(cfg.blocks_per_res):
            p.resblock(f"dec.level{lvl}.block{b}", ch, chans[lvl], hid)
            ch = chans[lvl]
    p.norm("out_norm", ch)
    p.conv("out_conv", 3, ch, cfg.out_channels, zero=True)
    return p.entries


def parameter_shapes(cfg):
    """Ordered ``{path: shape}`` for every parameter ``cfg`` declares."""
    return {path: shape for path, shape, _ in _plan(cfg.validate())}


def build_unet(cfg, seed, dtype=np.float32):
    """Initialize parameters: fan-in uniform weights, zero biases, zero output conv."""
    rng = np.random.default_rng(seed)
    params = {}
    for path, shape, init in _plan(cfg.validate()):
        if init == "zero":
            arr = np.zeros(shape)
        elif init == "one":
            arr = np.ones(shape)
        else:
            bound = 1.0 / math.sqrt(init)
            arr = rng.uniform(-bound, bound, size=shape)
        params[path] = arr.astype(dtype)
    return params


def parameter_count(params):
    return int(sum(a.size for a in params.values()))


class _Forward:
    def __init__(self, P, cfg, train, rng, check_finite):
        self.P = P
        self.cfg = cfg
        self.train = train
        self.rng = rng
        self.check_finite = check_finite

    def _check(self, t, path):
        if self.check_finite and not np.isfinite(t.data).all():
            raise NonFiniteActivation(path)
        return t

    def conv(self, path, x, padding=1):
        return ag.conv2d(x, self.P[path + ".weight"], self.P[path + ".bias"], padding=padding)

    def norm_silu(self, path, x):
        g = _groups(self.cfg, x.shape[-1])
        return ag.group_norm(x, self.P[path + ".gamma"], self.P[path + ".beta"], g, act="silu")

    def resblock(self, path, x, emb):
        h = self.conv(path + ".conv1", self.norm_silu(path + ".norm1", x))
        proj = ag.linear(emb, self.P[path + ".cond.weight"], self.P[path + ".cond.bias"])
        h = ag.channel_bias(h, proj)
        h = self.norm_silu(path + ".norm2", h)
        h = ag.dropout(h, self.cfg.dropout_rate, self.rng, self.train)
        h = self.conv(path + ".conv2", h)
        skip = self.conv(path + ".skip", x, padding=0) if path + ".skip.weight" in self.P else x
        return self._check(skip + h, path)

    def __call__(self, xt, z):
        cfg, P = self.cfg, self.P
        levels = len(cfg.ch_mult)
        e = ag.silu(ag.linear(z, P["cond.fc1.weight"], P["cond.fc1.bias"]))
        e = ag.linear(e, P["cond.fc2.weight"], P["cond.fc2.bias"])
        emb = ag.silu(e)
        h = self.conv("in_conv", xt)
        skips = []
        for lvl in range(levels):
            for b in range(cfg.blocks_per_res):
                h = self.resblock(f"enc.level{lvl}.block{b}", h, emb)
            skips.append(h)
            if lvl < levels - 1:
                h = ag.avg_downsample(h)
        h = self.resblock("mid.block0", h, emb)
        for lvl in reversed(range(levels)):
            if lvl < levels - 1:
                h = self.conv(f"dec.level{lvl}.up.conv", ag.nearest_upsample(h))
            h = ag.concat([h, skips[lvl]], axis=-1)
            for b in range(cfg.blocks_per_res):
                h = self.resblock(f"dec.level{lvl}.block{b}", h, emb)
        h = self.norm_silu("out_norm", h)
        return self._check(self.conv("out_conv", h), "out_conv")


def forward(P, xt, z, cfg, train=False, rng=None, check_finite=True):
    """Differentiable forward pass; ``P`` maps paths to :class:`Tensor` objects."""
    xt = ag.as_tensor(xt)
    z = ag.as_tensor(z)
    n, h, w, c = xt.shape
    if (h, w, c) != (cfg.image_size, cfg.image_size, cfg.in_channels):
        raise DenoiserError(
            f"input shape {xt.shape[1:]} does not match config "
            f"({cfg.image_size}, {cfg.image_size}, {cfg.in_channels})")
    if z.shape != (n, cfg.cond_dim):
        raise DenoiserError(f"conditioning shape {z.shape} != ({n}, {cfg.cond_dim})")
    return _Forward(P, cfg, train, rng, check_finite)(xt, z)


def predict_noise(params, xt, z, cfg, batch_size=None):
    """Evaluation-mode noise prediction on plain arrays (dropout off, no graph)."""
    xt = np.asarray(xt)
    z = np.asarray(z, dtype=xt.dtype)
    P = {k: ag.Tensor(v) for k, v in params.items()}
    with ag.no_grad():
        if batch_size is None or xt.shape[0] <= batch_size:
            return forward(P, xt, z, cfg).data
        outs = [forward(P, xt[i:i + batch_size], z[i:i + batch_size], cfg).data
                for i in range(0, xt.shape[0], batch_size)]
    return np.concatenate(outs, axis=0)


@dataclass(eq=False)
class Denoiser:
    """Config plus parameters; callable as ``eps = model(xt, t, z)``."""

    config: UNetConfig
    params: dict
    batch_size: int = 256

    def __call__(self, xt, t, z):
        return predict_noise(self.params, xt, z, self.config, self.batch_size)
