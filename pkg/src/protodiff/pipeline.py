"""End-to-end stages driven by an :class:`ExperimentConfig`.

Shared by the CLI, the trend experiment and the embedding-size sweep.
"""

import logging
import os
from dataclasses import replace

import numpy as np

from . import data
from .metrics import EvalNetwork, evaluate, gaussian_stats
from .protolearn import train_prototypes
from .sampler import sample_classes
from .schedule import make_linear_schedule
from .trainer import init_state, train_diffusion

log = logging.getLogger(__name__)

EVAL_SEED_OFFSET = 7919


def schedule_of(cfg):
    if cfg.schedule.family != "linear":
        raise ValueError(f"unsupported schedule family {cfg.schedule.family!r}")
    return make_linear_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end)


def _synthetic_spec(cfg, seed):
    d = cfg.dataset
    return data.SyntheticDatasetSpec(C=d.C, n_per_class=d.n_per_class, image_size=d.image_size,
                                     seed=seed, n_total=d.n_total)


def _resize(ds, cfg):
    if cfg.dataset.resize:
        ds.images = data.resize(ds.images, cfg.dataset.resize, cfg.dataset.resize_method)
    return ds


def load_training_data(cfg):
    d = cfg.dataset
    if d.source == "hue-shapes":
        ds = data.hue_shapes(_synthetic_spec(cfg, d.seed))
    elif d.source == "cifar10-binary":
        ds = data.read_cifar10_binary(d.path)
    else:
        ds, _ = data.load_dataset(d.path)
    return _resize(ds, cfg)


def load_eval_data(cfg, n):
    """Held-out images for the evaluation network and the FID reference.

    The synthetic source draws a fresh dataset from ``dataset.eval_seed``;
    file sources hold out the last 20% of each class.
    """
    d = cfg.dataset
    if d.source == "hue-shapes":
        spec = replace(_synthetic_spec(cfg, d.eval_seed), n_total=max(n, d.n_total))
        return _resize(data.hue_shapes(spec), cfg)
    _, held = load_training_data(cfg).split(0.8, seed=d.seed)
    return held


def train_eval_network(cfg, ds=None):
    ds = ds if ds is not None else load_eval_data(cfg, cfg.eval.n_reference)
    pcfg = replace(cfg.proto, seed=cfg.proto.seed + EVAL_SEED_OFFSET)
    ext, cb, hist = train_prototypes(ds.images, ds.labels, pcfg, num_classes=ds.num_classes)
    return EvalNetwork(ext, cb, pcfg.gamma), hist


def make_evaluator(cfg, network, reference, n_samples=None, guidance_weight=None, seed=None):
    """Callable ``(denoiser, table) -> EvalReport`` sampling a class-balanced batch."""
    sched = schedule_of(cfg)
    n = n_samples or cfg.eval.n_samples
    w = cfg.eval.guidance_weight if guidance_weight is None else guidance_weight
    seed = cfg.eval.seed if seed is None else seed
    ref_stats = gaussian_stats(network.features(reference))
    shape = (cfg.unet.image_size, cfg.unet.image_size, cfg.unet.in_channels)

    def evaluator(denoiser, table):
        per = -(-n // table.num_classes)
        imgs, _ = sample_classes(denoiser, table, sched, per, w, seed, cfg.train.d_t, shape,
                                 clamp_x0=cfg.sample.clamp_x0, variance=cfg.sample.variance)
        return evaluate(imgs[:n], reference, network, seed=seed, reference_stats=ref_stats)

    return evaluator


def run_diffusion(cfg, train_ds, codebook=None, evaluator=None, out_dir=None, max_steps=None):
    cfg.validate()
    state = init_state(cfg.train, cfg.unet, schedule_of(cfg), train_ds.num_classes, codebook=codebook,
                       d_p=cfg.proto.dim, meta={"config_hash": cfg.hash()})
    return train_diffusion(train_ds.images, train_ds.labels, state, out_dir=out_dir,
                           evaluator=evaluator, max_steps=max_steps)


def _fmt(v):
    return "" if v is None else f"{v:.4f}"


def trend_experiment(cfg, seeds=(0, 1, 2), modes=("baseline-random", "proto-unfrozen"), out_dir=None,
                     n_samples=512, guidance_weight=None):
    """Train every (mode, seed) pair on identical data and configs; returns
    ``{mode: {seed: [history rows]}}``."""
    train_ds = load_training_data(cfg)
    eval_ds = load_eval_data(cfg, n_samples)
    network, _ = train_eval_network(cfg, eval_ds)
    ref = eval_ds.images[:n_samples]
    results = {m: {} for m in modes}
    codebooks = {}
    for seed in seeds:
        run_cfg = replace(cfg, proto=replace(cfg.proto, seed=seed), train=replace(cfg.train, seed=seed))
        ev = make_evaluator(run_cfg, network, ref, n_samples=n_samples, guidance_weight=guidance_weight)
        for mode in modes:
            mcfg = replace(run_cfg, train=replace(run_cfg.train, embedding_mode=mode))
            cb = None
            if mcfg.train.uses_prototypes:
                if seed not in codebooks:
                    _, codebooks[seed], _ = train_prototypes(train_ds.images, train_ds.labels, mcfg.proto,
                                                             num_classes=train_ds.num_classes)
                cb = codebooks[seed]
            sub = os.path.join(out_dir, f"{mode}_seed{seed}") if out_dir else None
            state = run_diffusion(mcfg, train_ds, codebook=cb, evaluator=ev, out_dir=sub)
            results[mode][seed] = state.history
            log.info("%s seed %d: %s", mode, seed, ", ".join(
                f"{r['step']}:{_fmt(r['fid'])}" for r in state.history))
    return results, network.id


def median_fid(results, mode, step):
    vals = [next(r["fid"] for r in hist if r["step"] == step) for hist in results[mode].values()]
    return float(np.median(vals))


def median_curve(results, mode):
    steps = [r["step"] for r in next(iter(results[mode].values()))]
    return steps, [median_fid(results, mode, s) for s in steps]


def dimension_sweep(cfg, dims=(32, 64, 128), out_dir=None, n_samples=None):
    """Full pipeline (prototypes, diffusion, evaluation) for each prototype size.

    The time-embedding size is held fixed so only the class-embedding width
    changes; the evaluation network is shared across the sweep.
    """
    train_ds = load_training_data(cfg)
    n = n_samples or cfg.eval.n_samples
    eval_ds = load_eval_data(cfg, n)
    network, _ = train_eval_network(cfg, eval_ds)
    ref = eval_ds.images[:n]
    rows = []
    for dim in dims:
        dcfg = replace(cfg, proto=replace(cfg.proto, dim=dim),
                       unet=replace(cfg.unet, cond_dim=cfg.train.d_t + dim)).validate()
        _, cb, phist = train_prototypes(train_ds.images, train_ds.labels, dcfg.proto,
                                        num_classes=train_ds.num_classes)
        sub = os.path.join(out_dir, f"dim{dim}") if out_dir else None
        state = run_diffusion(dcfg, train_ds, codebook=cb, out_dir=sub)
        denoiser, table = state.snapshot()
        report = make_evaluator(dcfg, network, ref, n_samples=n)(denoiser, table)
        rows.append({"dim": dim, "fid": report.fid, "is": report.is_score,
                     "proto_accuracy": phist[-1]["accuracy"] if phist else None,
                     "final_loss": float(np.mean(state.losses[-100:])) if state.losses else None,
                     "steps": state.step, "feature_extractor_id": report.feature_extractor_id})
    return rows
