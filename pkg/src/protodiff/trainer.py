"""Conditional diffusion training with label dropout, plus checkpoint persistence.

Every random draw of a step comes from one generator in a fixed order:
batch indices, time steps, noise, null-label mask, dropout masks. Saving that
generator's state with the parameters and optimizer moments makes a resumed
run bit-identical to an uninterrupted one.
"""

import csv
import hashlib
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autograd as ag
from . import container
from .denoiser import Denoiser, UNetConfig, build_unet, forward
from .embed import NULL, ConditioningTable, init_from_codebook, init_random, time_embedding
from .optim import Adam
from .schedule import NoiseSchedule, q_sample, schedule_from_params

log = logging.getLogger(__name__)

EMBEDDING_MODES = ("baseline-random", "proto-frozen", "proto-unfrozen")
CHECKPOINT_KIND = "checkpoint"


class TrainError(ValueError):
    pass


class ConfigMismatch(TrainError):
    pass


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass
class DiffusionTrainConfig:
    steps: int = 3000
    batch_size: int = 64
    learning_rate: float = 2e-4
    weight_decay: float = 0.0
    p_uncond: float = 0.1
    embedding_mode: str = "proto-unfrozen"
    eval_every: int = 500
    seed: int = 0
    grad_clip: float = None
    d_t: int = 128
    normalize_prototypes: bool = False

    def validate(self):
        if not (0.0 <= self.p_uncond < 1.0):
            raise TrainError(f"p_uncond must lie in [0, 1), got {self.p_uncond}")
        if self.embedding_mode not in EMBEDDING_MODES:
            raise TrainError(f"embedding_mode must be one of {EMBEDDING_MODES}, got {self.embedding_mode!r}")
        if self.steps < 0 or self.batch_size < 1 or not self.learning_rate > 0:
            raise TrainError("need steps >= 0, batch_size >= 1 and learning_rate > 0")
        if self.eval_every < 0:
            raise TrainError("eval_every must be >= 0")
        return self

    @property
    def frozen(self):
        return self.embedding_mode == "proto-frozen"

    @property
    def uses_prototypes(self):
        return self.embedding_mode != "baseline-random"


FAITHFUL_TRAIN = DiffusionTrainConfig(batch_size=128, learning_rate=2e-4)


@dataclass(eq=False)
class TrainState:
    config: DiffusionTrainConfig
    unet: UNetConfig
    sched: NoiseSchedule
    params: dict
    table: ConditioningTable
    opt: Adam
    rng: np.random.Generator
    step: int = 0
    losses: list = field(default_factory=list)
    history: list = field(default_factory=list)
    meta: dict = field(default_factory=dict)

    def denoiser(self, copy=True):
        params = {k: v.copy() for k, v in self.params.items()} if copy else self.params
        return Denoiser(self.unet, params)

    def snapshot(self):
        """Independent copy of everything needed for sampling."""
        return self.denoiser(copy=True), self.table.copy()


def _seeds(seed):
    ss = np.random.SeedSequence(seed)
    a, b, c = ss.spawn(3)
    return int(a.generate_state(1, np.uint64)[0]), int(b.generate_state(1, np.uint64)[0]), c


def _check_table_shapes(unet, config, C, d_p):
    if unet.cond_dim != config.d_t + d_p:
        raise ConfigMismatch(
            f"denoiser cond_dim {unet.cond_dim} != time dim {config.d_t} + class dim {d_p}")


def init_state(config, unet, sched, num_classes, codebook=None, d_p=None, meta=None):
    """Fresh training state. Proto modes take class rows from ``codebook``."""
    config.validate()
    unet.validate()
    unet_seed, table_seed, loop_seed = _seeds(config.seed)
    if config.uses_prototypes:
        if codebook is None:
            raise TrainError(f"embedding_mode {config.embedding_mode!r} needs a prototype codebook")
        if codebook.C != num_classes:
            raise ConfigMismatch(f"codebook has {codebook.C} classes, dataset has {num_classes}")
        table = init_from_codebook(codebook, frozen=config.frozen, normalize=config.normalize_prototypes)
    else:
        dim = d_p if d_p is not None else unet.cond_dim - config.d_t
        table = init_random(num_classes, dim, table_seed)
    _check_table_shapes(unet, config, num_classes, table.dim)
    params = build_unet(unet, unet_seed)
    opt = Adam(config.learning_rate, weight_decay=config.weight_decay, grad_clip=config.grad_clip)
    rng = np.random.Generator(np.random.PCG64(loop_seed))
    return TrainState(config, unet, sched, params, table, opt, rng, meta=dict(meta or {}))


def _sample_batch(state, images, labels):
    cfg = state.config
    rng = state.rng
    n = images.shape[0]
    idx = rng.integers(0, n, size=cfg.batch_size)
    t = rng.integers(0, state.sched.T, size=cfg.batch_size)
    x0 = images[idx]
    eps = rng.standard_normal(x0.shape, dtype=np.float32)
    drop = rng.random(cfg.batch_size) < cfg.p_uncond
    y = np.where(drop, NULL, labels[idx])
    return x0, t, eps, y


def diffusion_train_step(state, images, labels):
    """One optimizer step on the noise-prediction objective; returns the batch loss."""
    cfg = state.config
    x0, t, eps, y = _sample_batch(state, images, labels)
    xt = q_sample(x0, t, eps, state.sched).astype(np.float32, copy=False)
    table = state.table
    class_rows = ag.Tensor(table.rows[:-1], requires_grad=not table.frozen)
    null_row = ag.Tensor(table.rows[-1:], requires_grad=True)
    rows = ag.concat([class_rows, null_row], axis=0)
    cls = ag.embedding(rows, table.row_index(y))
    z = ag.concat([ag.Tensor(time_embedding(t, cfg.d_t, dtype=np.float32)), cls], axis=-1)
    P = {k: ag.Tensor(v, requires_grad=True) for k, v in state.params.items()}
    pred = forward(P, xt, z, state.unet, train=True, rng=state.rng)
    loss = ag.mse(pred, eps)
    value = float(loss.data)
    if not math.isfinite(value):
        raise NonFiniteLoss(f"diffusion loss became {value} at step {state.step + 1}")
    loss.backward()
    grads = {k: p.grad for k, p in P.items()}
    targets = dict(state.params)
    grads["__table.null__"] = null_row.grad
    targets["__table.null__"] = table.rows[-1:]
    if not table.frozen:
        grads["__table.classes__"] = class_rows.grad
        targets["__table.classes__"] = table.rows[:-1]
    state.opt.step(targets, grads)
    state.step += 1
    state.losses.append(value)
    return value


# ----------------------------------------------------------------------------
# checkpoints


def _rng_state(rng):
    return rng.bit_generator.state


def _rng_from_state(st):
    if st.get("bit_generator") != "PCG64":
        raise container.ContainerError(f"unsupported generator {st.get('bit_generator')!r}")
    bg = np.random.PCG64()
    bg.state = st
    return np.random.Generator(bg)


def save_checkpoint(state, path):
    opt = state.opt.state_dict()
    header = {
        "kind": CHECKPOINT_KIND,
        "schedule": state.sched.params(),
        "unet": state.unet.to_dict(),
        "train": asdict(state.config),
        "table_frozen": bool(state.table.frozen),
        "step": state.step,
        "rng": _rng_state(state.rng),
        "optimizer": opt["hyper"],
        "losses": state.losses,
        "history": state.history,
        "meta": state.meta,
    }
    tensors = {f"params.{k}": v for k, v in state.params.items()}
    tensors["table.rows"] = state.table.rows
    tensors.update({f"opt.m.{k}": v for k, v in opt["m"].items()})
    tensors.update({f"opt.v.{k}": v for k, v in opt["v"].items()})
    container.save(path, header, tensors)


def load_checkpoint(path, unet=None):
    """Restore a :class:`TrainState`. ``unet`` (optional) must equal the stored config."""
    header, tensors = container.load(path)
    if header.get("kind") != CHECKPOINT_KIND:
        raise container.ContainerError(f"{path}: not a checkpoint (kind={header.get('kind')!r})")
    stored = UNetConfig.from_dict(header["unet"])
    if unet is not None and unet != stored:
        raise ConfigMismatch(
            f"{path}: checkpoint denoiser config {stored.to_dict()} does not match "
            f"requested config {unet.to_dict()}")
    config = DiffusionTrainConfig(**header["train"])
    opt = Adam.from_state_dict({"hyper": header["optimizer"], "m": container.group(tensors, "opt.m"),
                                "v": container.group(tensors, "opt.v")})
    table = ConditioningTable(tensors["table.rows"], frozen=bool(header["table_frozen"]))
    return TrainState(config, stored, schedule_from_params(header["schedule"]),
                      container.group(tensors, "params"), table, opt,
                      _rng_from_state(header["rng"]), int(header["step"]),
                      list(header["losses"]), list(header["history"]), dict(header["meta"]))


def rows_hash(rows):
    return hashlib.sha256(np.ascontiguousarray(rows).tobytes()).hexdigest()


# ----------------------------------------------------------------------------
# run loop

HISTORY_FIELDS = ("step", "loss", "fid", "is", "wall_seconds")


def _write_csv(path, fields, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=fields)
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r.get(k) is None else r.get(k)) for k in fields})


def train_diffusion(images, labels, state, out_dir=None, evaluator=None, max_steps=None,
                    log_every=100):
    """Run steps until ``config.steps`` (or ``max_steps``) are done.

    Every ``eval_every`` steps a history row is appended. With ``evaluator``
    (called on a parameter snapshot as ``evaluator(denoiser, table)`` and
    returning an object with ``fid`` and ``is_score``) the row carries the
    metrics; with ``out_dir`` a checkpoint ``step_XXXXXX.pdck`` and the CSV
    files are written as well.
    """
    cfg = state.config
    images = np.asarray(images, dtype=np.float32)
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and labels.max() >= state.table.num_classes:
        raise ConfigMismatch(
            f"labels reach {labels.max()} but the table has {state.table.num_classes} classes")
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
    end = cfg.steps if max_steps is None else min(cfg.steps, max_steps)
    t0 = time.perf_counter() - (state.history[-1]["wall_seconds"] if state.history else 0.0)
    while state.step < end:
        loss = diffusion_train_step(state, images, labels)
        if log_every and state.step % log_every == 0:
            log.info("step %d loss %.5f", state.step, loss)
        if cfg.eval_every and state.step % cfg.eval_every == 0:
            window = state.losses[-cfg.eval_every:]
            row = {"step": state.step, "loss": float(np.mean(window)), "fid": None, "is": None}
            if evaluator is not None:
                report = evaluator(*state.snapshot())
                row["fid"], row["is"] = float(report.fid), float(report.is_score)
            row["wall_seconds"] = round(time.perf_counter() - t0, 3)
            state.history.append(row)
            if out_dir:
                save_checkpoint(state, os.path.join(out_dir, f"step_{state.step:06d}.pdck"))
                _write_csv(os.path.join(out_dir, "history.csv"), HISTORY_FIELDS, state.history)
    if out_dir:
        save_checkpoint(state, os.path.join(out_dir, "last.pdck"))
        _write_csv(os.path.join(out_dir, "losses.csv"), ("step", "loss"),
                   [{"step": i + 1, "loss": v} for i, v in enumerate(state.losses)])
        _write_csv(os.path.join(out_dir, "history.csv"), HISTORY_FIELDS, state.history)
    return state


def with_steps(config, steps):
    return replace(config, steps=steps)
