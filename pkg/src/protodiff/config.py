"""Experiment configuration: one JSON document with dotted-path overrides.

>>> cfg = ExperimentConfig()
>>> cfg = apply_overrides(cfg, ["train.steps=200", "proto.dim=64", "unet.cond_dim=192"])
>>> cfg.train.steps
200
"""

import hashlib
import json
from dataclasses import asdict, dataclass, field, fields

from .container import canonical_json
from .denoiser import UNetConfig
from .protolearn import ProtoTrainConfig
from .trainer import DiffusionTrainConfig


class ConfigError(ValueError):
    pass


@dataclass
class DatasetConfig:
    source: str = "hue-shapes"  # or "file" (container dataset) or "cifar10-binary"
    path: str = ""
    C: int = 3
    n_per_class: int = 700
    n_total: int = 2000
    image_size: int = 16
    seed: int = 0
    resize: int = 0
    resize_method: str = "nearest"
    eval_seed: int = 1000  # held-out data for the evaluation network and FID reference


@dataclass
class ScheduleConfig:
    T: int = 200
    beta_start: float = 1e-4
    beta_end: float = 0.02
    family: str = "linear"


@dataclass
class SampleConfig:
    guidance_weight: float = 0.5
    clamp_x0: bool = True
    variance: str = "posterior"
    per_class: int = 8
    seed: int = 0


@dataclass
class EvalConfig:
    n_samples: int = 1024
    n_reference: int = 1024
    guidance_weight: float = 0.5
    seed: int = 0


def _default_unet():
    return UNetConfig()


def _default_proto():
    # Same 20-epoch budget as the library defaults, but on a few thousand
    # images batch 512 / lr 1e-4 is only ~80 Adam steps, too few for the
    # prototypes to reach their class clusters.
    return ProtoTrainConfig(batch_size=64, learning_rate=1e-3)


@dataclass
class ExperimentConfig:
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    unet: UNetConfig = field(default_factory=_default_unet)
    proto: ProtoTrainConfig = field(default_factory=_default_proto)
    train: DiffusionTrainConfig = field(default_factory=DiffusionTrainConfig)
    sample: SampleConfig = field(default_factory=SampleConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    output_dir: str = "runs/default"
    seed: int = 0

    @property
    def num_classes(self):
        return 10 if self.dataset.source == "cifar10-binary" else self.dataset.C

    def to_dict(self):
        d = asdict(self)
        d["unet"] = self.unet.to_dict()
        return d

    def validate(self):
        try:
            self.unet.validate()
            self.proto.validate()
            self.train.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc
        size = self.dataset.resize or (32 if self.dataset.source == "cifar10-binary" else self.dataset.image_size)
        if self.unet.image_size != size:
            raise ConfigError(f"unet.image_size {self.unet.image_size} != dataset image size {size}")
        if self.unet.cond_dim != self.train.d_t + self.proto.dim:
            raise ConfigError(
                f"unet.cond_dim {self.unet.cond_dim} != train.d_t {self.train.d_t} + proto.dim {self.proto.dim}")
        if self.proto.K != 1 and self.train.uses_prototypes:
            raise ConfigError("prototype-initialized embeddings need proto.K == 1")
        if self.dataset.source not in ("hue-shapes", "file", "cifar10-binary"):
            raise ConfigError(f"unknown dataset.source {self.dataset.source!r}")
        if self.dataset.source != "hue-shapes" and not self.dataset.path:
            raise ConfigError(f"dataset.source {self.dataset.source!r} needs dataset.path")
        return self

    def hash(self):
        return hashlib.sha256(canonical_json(self.to_dict()).encode()).hexdigest()[:16]


_TYPES = {"dataset": DatasetConfig, "schedule": ScheduleConfig, "unet": UNetConfig,
          "proto": ProtoTrainConfig, "train": DiffusionTrainConfig, "sample": SampleConfig,
          "eval": EvalConfig}


def _build(cls, d, where):
    known = {f.name for f in fields(cls)}
    unknown = set(d) - known
    if unknown:
        raise ConfigError(f"unknown key(s) {sorted(unknown)} in section {where!r}")
    return cls(**d)


def from_dict(d):
    d = dict(d)
    kw = {}
    for name, cls in _TYPES.items():
        if name in d:
            kw[name] = _build(cls, d.pop(name), name)
    for k in ("output_dir", "seed"):
        if k in d:
            kw[k] = d.pop(k)
    if d:
        raise ConfigError(f"unknown top-level key(s) {sorted(d)}")
    return ExperimentConfig(**kw)


def load(path):
    try:
        with open(path) as fh:
            return from_dict(json.load(fh))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc


def dump(cfg, path):
    with open(path, "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def _parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(cfg, overrides):
    """Return a new config with ``section.key=value`` pairs applied (values parsed as JSON)."""
    d = cfg.to_dict()
    for item in overrides or ():
        if "=" not in item:
            raise ConfigError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = d
        for p in parts[:-1]:
            if not isinstance(node, dict) or p not in node:
                raise ConfigError(f"unknown config path {key!r}")
            node = node[p]
        if not isinstance(node, dict) or parts[-1] not in node:
            raise ConfigError(f"unknown config path {key!r}")
        node[parts[-1]] = _parse_value(raw)
    return from_dict(d)
