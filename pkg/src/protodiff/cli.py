"""Command-line interface.

Exit codes:
  0  success
  1  unexpected internal error
  2  bad command-line usage
  3  invalid or inconsistent configuration
  4  missing input file or missing dependency artifact
  5  artifact mismatch (shapes, classes, config)
  6  malformed or corrupt input file
  7  numerical failure (non-finite loss or activations)
  8  config-hash mismatch between compared artifacts (override with --force)
"""

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict

from . import config as config_mod
from . import container, data, pipeline
from .denoiser import Denoiser, NonFiniteActivation
from .metrics import EvalNetwork, evaluate, load_network, save_network
from .protolearn import NonFiniteLoss as ProtoNonFinite
from .protolearn import pca_project, prototype_in_class_hull, train_prototypes
from .sampler import sample_grid
from .trainer import ConfigMismatch, NonFiniteLoss, load_checkpoint, train_diffusion

EXIT_OK, EXIT_INTERNAL, EXIT_USAGE, EXIT_CONFIG, EXIT_MISSING, EXIT_MISMATCH, EXIT_FORMAT, \
    EXIT_NUMERIC, EXIT_HASH = range(9)

log = logging.getLogger("protodiff")


class CliError(Exception):
    def __init__(self, message, code):
        super().__init__(message)
        self.code = code


def _require(path, what):
    if not path or not os.path.exists(path):
        raise CliError(f"missing {what}: {path or '(not given)'}", EXIT_MISSING)
    return path


def _resolve_config(args):
    cfg = config_mod.load(_require(args.config, "config file")) if args.config else config_mod.ExperimentConfig()
    cfg = config_mod.apply_overrides(cfg, args.set)
    cfg.validate()
    print(f"# resolved config (hash {cfg.hash()})", file=sys.stderr)
    print(json.dumps(cfg.to_dict(), indent=2, sort_keys=True), file=sys.stderr)
    return cfg


def _dataset(args, cfg):
    if getattr(args, "data", None):
        ds, _ = data.load_dataset(_require(args.data, "dataset file"))
        return ds
    return pipeline.load_training_data(cfg)


def _ensure_parent(path):
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)


def cmd_gen_data(args, cfg):
    if cfg.dataset.source != "hue-shapes":
        raise CliError("gen-data only generates the synthetic hue-shapes dataset", EXIT_CONFIG)
    spec = pipeline._synthetic_spec(cfg, cfg.dataset.seed)
    acc = data.self_test(spec)
    ds = data.hue_shapes(spec)
    _ensure_parent(args.out)
    data.save_dataset(args.out, ds, {"config_hash": cfg.hash()})
    print(json.dumps({"path": args.out, "images": len(ds), "self_test_accuracy": acc}))


def cmd_proto_train(args, cfg):
    ds = _dataset(args, cfg)
    ext, cb, hist = train_prototypes(ds.images, ds.labels, cfg.proto, num_classes=ds.num_classes)
    _ensure_parent(args.out)
    save_network(args.out, ext, cb, {"config_hash": cfg.hash(), "history": hist,
                                     "proto": asdict(cfg.proto)})
    print(json.dumps({"path": args.out, "final_accuracy": hist[-1]["accuracy"] if hist else None}))


def _codebook_for(args, cfg, num_classes):
    if not cfg.train.uses_prototypes:
        return None
    if not args.proto or not os.path.exists(args.proto):
        raise CliError(
            f"embedding_mode {cfg.train.embedding_mode!r} needs a proto-train artifact (--proto); "
            f"not found: {args.proto or '(not given)'}", EXIT_MISSING)
    _, cb, _ = load_network(args.proto)
    if cb.C != num_classes or cb.dim != cfg.proto.dim:
        raise CliError(f"codebook shape (C={cb.C}, dim={cb.dim}) does not match config "
                       f"(C={num_classes}, dim={cfg.proto.dim})", EXIT_MISMATCH)
    return cb


def _network(args, cfg):
    if getattr(args, "eval_net", None):
        ext, cb, header = load_network(_require(args.eval_net, "evaluation network"))
        return EvalNetwork(ext, cb, cfg.proto.gamma), header.get("config_hash")
    net, _ = pipeline.train_eval_network(cfg)
    return net, cfg.hash()


def cmd_diff_train(args, cfg):
    ds = _dataset(args, cfg)
    if args.resume:
        state = load_checkpoint(_require(args.resume, "checkpoint"), unet=cfg.unet)
    else:
        cb = _codebook_for(args, cfg, ds.num_classes)
        state = None
    evaluator = None
    if cfg.train.eval_every and not args.no_eval:
        net, _ = _network(args, cfg)
        ref = pipeline.load_eval_data(cfg, cfg.eval.n_reference).images[:cfg.eval.n_reference]
        evaluator = pipeline.make_evaluator(cfg, net, ref)
    if state is None:
        state = pipeline.run_diffusion(cfg, ds, codebook=cb, evaluator=evaluator, out_dir=args.out,
                                       max_steps=args.max_steps)
    else:
        state = train_diffusion(ds.images, ds.labels, state, out_dir=args.out, evaluator=evaluator,
                                max_steps=args.max_steps)
    print(json.dumps({"out": args.out, "step": state.step,
                      "final_loss": state.losses[-1] if state.losses else None}))


def cmd_sample(args, cfg):
    state = load_checkpoint(_require(args.checkpoint, "checkpoint"))
    w = cfg.sample.guidance_weight if args.w is None else args.w
    per = args.per_class or cfg.sample.per_class
    seed = cfg.sample.seed if args.seed is None else args.seed
    model = Denoiser(state.unet, state.params)
    shape = (state.unet.image_size, state.unet.image_size, state.unet.in_channels)
    _ensure_parent(args.out)
    _, images, labels = sample_grid(model, state.table, state.sched, per, w, seed, state.config.d_t, shape,
                                    path=args.out, clamp_x0=cfg.sample.clamp_x0, variance=cfg.sample.variance)
    raw = args.raw or os.path.splitext(args.out)[0] + ".pdck"
    container.save(raw, {"kind": "samples", "config_hash": state.meta.get("config_hash"), "guidance_weight": w,
                         "seed": seed, "step": state.step}, {"images": images, "labels": labels})
    print(json.dumps({"grid": args.out, "raw": raw, "images": int(images.shape[0])}))


def cmd_eval(args, cfg):
    header, t = container.load(_require(args.samples, "sample batch"))
    if header.get("kind") != "samples":
        raise CliError(f"{args.samples} is not a sample batch", EXIT_FORMAT)
    hashes = {"samples": header.get("config_hash")}
    if args.reference:
        ref_ds, rh = data.load_dataset(_require(args.reference, "reference dataset"))
        ref = ref_ds.images
        hashes["reference"] = rh.get("config_hash")
    else:
        ref = pipeline.load_eval_data(cfg, cfg.eval.n_reference).images[:cfg.eval.n_reference]
        hashes["reference"] = cfg.hash()
    net, hashes["eval_net"] = _network(args, cfg)
    distinct = {h for h in hashes.values() if h is not None}
    if len(distinct) > 1 and not args.force:
        raise CliError(f"refusing to compare artifacts with different config hashes {hashes}; "
                       f"pass --force to override", EXIT_HASH)
    report = evaluate(t["images"], ref, net, seed=int(header.get("seed", 0)))
    out = dict(asdict(report), config_hashes=hashes)
    text = json.dumps(out, indent=2, sort_keys=True)
    if args.out:
        _ensure_parent(args.out)
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)


def cmd_viz_proto(args, cfg):
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    ext, cb, _ = load_network(_require(args.proto, "proto-train artifact"))
    ds = _dataset(args, cfg)
    feats = ext(ds.images)
    pca = pca_project(feats, 2)
    if pca.rank_deficient:
        raise CliError("features span fewer than 2 directions; nothing to plot", EXIT_NUMERIC)
    inside = prototype_in_class_hull(pca, feats, ds.labels, cb)
    protos = pca.transform(cb.prototypes[:, 0, :])
    fig, ax = plt.subplots(figsize=(5, 5))
    cmap = plt.get_cmap("tab10")
    for c in range(cb.C):
        m = ds.labels == c
        ax.scatter(pca.coords[m, 0], pca.coords[m, 1], s=4, alpha=0.4, color=cmap(c % 10), label=f"class {c}")
        ax.scatter(*protos[c], marker="*", s=250, color=cmap(c % 10), edgecolors="k")
    ax.set_xlabel("PC 1")
    ax.set_ylabel("PC 2")
    ax.legend(loc="best", fontsize=7)
    fig.tight_layout()
    _ensure_parent(args.out)
    fig.savefig(args.out, dpi=120)
    plt.close(fig)
    print(json.dumps({"figure": args.out, "prototype_inside_hull": inside,
                      "explained_variance_ratio": pca.explained_variance_ratio.tolist()}))


def cmd_sweep(args, cfg):
    rows = pipeline.dimension_sweep(cfg, dims=tuple(args.dims), out_dir=args.out, n_samples=args.n_samples)
    os.makedirs(args.out, exist_ok=True)
    path = os.path.join(args.out, "sweep.csv")
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)
    print(json.dumps({"table": path, "rows": rows}))


def build_parser():
    p = argparse.ArgumentParser(prog="protodiff", description="Prototype-initialized conditional diffusion.",
                                formatter_class=argparse.RawDescriptionHelpFormatter, epilog=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def add(name, fn, help_text):
        sp = sub.add_parser(name, help=help_text, description=help_text)
        sp.add_argument("--config", help="experiment config JSON (defaults used when omitted)")
        sp.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry by dotted path, e.g. train.steps=200 (repeatable)")
        sp.set_defaults(fn=fn)
        return sp

    sp = add("gen-data", cmd_gen_data, "generate the synthetic hue-shapes dataset")
    sp.add_argument("--out", required=True, help="output dataset file")

    sp = add("proto-train", cmd_proto_train, "train the feature extractor and class prototypes")
    sp.add_argument("--data", help="dataset file (default: build from config)")
    sp.add_argument("--out", required=True, help="output prototype artifact")

    sp = add("diff-train", cmd_diff_train, "train the conditional denoiser")
    sp.add_argument("--data", help="dataset file (default: build from config)")
    sp.add_argument("--proto", help="prototype artifact, required for proto-* embedding modes")
    sp.add_argument("--eval-net", help="pinned evaluation network for periodic FID")
    sp.add_argument("--no-eval", action="store_true", help="skip periodic FID evaluation")
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--max-steps", type=int, help="stop after this many total steps")
    sp.add_argument("--out", required=True, help="output run directory")

    sp = add("sample", cmd_sample, "draw a class-per-row sample grid from a checkpoint")
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--out", required=True, help="output PNG grid")
    sp.add_argument("--raw", help="output raw sample batch (default: next to the PNG)")
    sp.add_argument("--per-class", type=int)
    sp.add_argument("--w", type=float, help="guidance weight")
    sp.add_argument("--seed", type=int)

    sp = add("eval", cmd_eval, "score a sample batch against reference images (JSON report)")
    sp.add_argument("--samples", required=True, help="raw sample batch from 'sample'")
    sp.add_argument("--reference", help="reference dataset file (default: held-out data from config)")
    sp.add_argument("--eval-net", help="evaluation network artifact (default: train from config)")
    sp.add_argument("--force", action="store_true", help="compare artifacts even if config hashes differ")
    sp.add_argument("--out", help="also write the JSON report here")

    sp = add("viz-proto", cmd_viz_proto, "2-D PCA scatter of features and prototypes")
    sp.add_argument("--proto", required=True)
    sp.add_argument("--data", help="dataset file (default: build from config)")
    sp.add_argument("--out", required=True, help="output PNG")

    sp = add("sweep", cmd_sweep, "run the pipeline for several prototype sizes and tabulate FID")
    sp.add_argument("--dims", type=int, nargs="+", default=[32, 64, 128])
    sp.add_argument("--n-samples", type=int)
    sp.add_argument("--out", required=True, help="output directory")
    return p


def _code_for(exc):
    if isinstance(exc, CliError):
        return exc.code
    if isinstance(exc, config_mod.ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, FileNotFoundError):
        return EXIT_MISSING
    if isinstance(exc, ConfigMismatch):
        return EXIT_MISMATCH
    if isinstance(exc, (container.ContainerError, data.DatasetError)):
        return EXIT_FORMAT
    if isinstance(exc, (NonFiniteLoss, ProtoNonFinite, NonFiniteActivation, FloatingPointError)):
        return EXIT_NUMERIC
    if isinstance(exc, ValueError):
        return EXIT_MISMATCH
    return EXIT_INTERNAL


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(message)s")
    try:
        cfg = _resolve_config(args)
        args.fn(args, cfg)
    except Exception as exc:  # noqa: BLE001 - mapped to documented exit codes
        code = _code_for(exc)
        print(f"protodiff {args.command}: error: {exc}", file=sys.stderr)
        if code == EXIT_INTERNAL:
            raise
        return code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
