"""Acceptance suite: one test per criterion, each reported in the terminal summary.

Criteria 6 and 7 train several diffusion models and take most of the suite's
runtime; they are marked ``slow`` (deselect with ``-m "not slow"``).
"""

import json
import time
from dataclasses import replace

import mpmath
import numpy as np
import pytest

from _fd import check_gradients
from protodiff import autograd as ag
from protodiff import cli, container, kernels, pipeline
from protodiff.config import ExperimentConfig
from protodiff.denoiser import UNetConfig, build_unet, forward
from protodiff.embed import init_random
from protodiff.metrics import FeatureStats, frechet_distance, inception_score
from protodiff.protolearn import (Codebook, accuracy, assign_class, cpl_loss_op, proto_probabilities,
                                  squared_distances)
from protodiff.sampler import SampleRequest, ddpm_sample, guided_noise
from protodiff.schedule import make_linear_schedule, predict_x0, q_sample, schedule_from_betas
from protodiff.trainer import (DiffusionTrainConfig, init_state, load_checkpoint, rows_hash, save_checkpoint,
                               train_diffusion)

BACKENDS = [kernels.numpy_impl] + ([kernels.compiled_impl] if kernels.compiled_impl is not None else [])

# desk-scale U-Net shared by the trend and sweep runs
TREND_UNET = UNetConfig(base_channels=16, ch_mult=(1, 2), blocks_per_res=1, cond_dim=256)


def trend_config():
    cfg = ExperimentConfig()
    return replace(cfg, unet=TREND_UNET,
                   train=replace(cfg.train, steps=3000, eval_every=500, batch_size=64))


@pytest.mark.criterion(1, "math-kernel oracle suite")
def test_criterion_1_math_kernels(detail):
    t0 = time.perf_counter()
    mpmath.mp.dps = 40
    worst = 0.0
    for T, b0, b1 in [(1, 1e-4, 1e-4), (50, 1e-4, 0.02), (200, 1e-4, 0.02), (1000, 1e-4, 0.02)]:
        s = make_linear_schedule(T, b0, b1)
        prod = mpmath.mpf(1)
        for t in range(T):
            prod *= 1 - mpmath.mpf(float(s.betas[t]))
            worst = max(worst, abs(float((mpmath.mpf(float(s.alpha_bars[t])) - prod) / prod)))
    assert worst <= 1e-12

    s = make_linear_schedule(200)
    x0 = np.array([0.8, -0.5])
    n, t = 100_000, 99
    r = np.random.default_rng(21)
    closed = q_sample(np.broadcast_to(x0, (n, 2)), t, r.standard_normal((n, 2)), s)
    x = np.broadcast_to(x0, (n, 2)).copy()
    for i in range(t + 1):
        x = np.sqrt(1 - s.betas[i]) * x + np.sqrt(s.betas[i]) * r.standard_normal((n, 2))
    np.testing.assert_allclose(closed.mean(0), x.mean(0), rtol=0.01)
    np.testing.assert_allclose(closed.var(0), x.var(0), rtol=0.01)

    xt, e = r.standard_normal((2, 4, 8, 8, 3))
    for t in (0, 57, 199):
        assert np.abs(q_sample(predict_x0(xt, t, e, s), t, e, s) - xt).max() <= 1e-5

    for C, K, d in [(3, 1, 16), (10, 4, 128), (7, 3, 2)]:
        cb = Codebook(r.standard_normal((C, K, d)) * 3)
        f = r.standard_normal((200, d)) * 3
        p = proto_probabilities(f, cb, gamma=0.7)
        assert np.abs(p.sum(axis=(1, 2)) - 1).max() <= 1e-9
        exhaustive = np.array([min(range(C), key=lambda c: min(np.sum((v - cb.prototypes[c, k]) ** 2)
                                                              for k in range(K))) for v in f])
        np.testing.assert_array_equal(assign_class(f, cb), exhaustive)

    def fs(mu, cov):
        return FeatureStats(np.asarray(mu, float), np.asarray(cov, float), 100)

    a = rng_cov(r, 6)
    assert abs(frechet_distance(fs(np.ones(6), a), fs(np.ones(6), a))) <= 1e-6
    da, db = np.array([1.0, 4.0, 0.25]), np.array([9.0, 1.0, 1.0])
    mu = np.array([0.5, -1.0, 2.0])
    expect = mu @ mu + np.sum((np.sqrt(da) - np.sqrt(db)) ** 2)
    assert abs(frechet_distance(fs(mu, np.diag(da)), fs(np.zeros(3), np.diag(db))) - expect) <= 1e-6
    assert abs(frechet_distance(fs(mu, a[:3, :3]), fs(np.zeros(3), a[:3, :3])) - mu @ mu) <= 1e-6

    assert inception_score(np.full((9, 4), 0.25)) == 1.0
    for C in (2, 3, 10):
        assert inception_score(np.eye(C)) == pytest.approx(C, rel=1e-15)
    elapsed = time.perf_counter() - t0
    detail["seconds"] = f"{elapsed:.1f}"
    assert elapsed < 120


def rng_cov(r, d):
    m = r.standard_normal((d, d))
    return m @ m.T + 0.1 * np.eye(d)


def _primitive_checks(r):
    def t(*shape):
        return r.standard_normal(shape)

    x4 = t(2, 6, 6, 4)
    yield "add/sub/mul", lambda a, b: ag.mul(ag.sub(ag.add(a, b), ag.mul(b, b)), a), [t(3, 4), t(4)]
    yield "mean/sum/square", lambda a: ag.sum_(ag.square(ag.mean(a, axis=0, keepdims=True))), [t(3, 4)]
    yield "reshape/concat", lambda a, b: ag.concat([ag.reshape(a, (2, 6)), b], axis=0), [t(3, 4), t(1, 6)]
    yield "matmul", ag.matmul, [t(5, 3), t(3, 4)]
    yield "linear", ag.linear, [t(5, 3), t(3, 4), t(4)]
    yield "silu", ag.silu, [t(4, 5)]
    xr = t(4, 5)
    xr[np.abs(xr) < 0.05] = 0.3
    yield "relu", ag.relu, [xr]
    for k, stride, pad in [(3, 1, 1), (3, 2, 1), (1, 1, 0)]:
        yield f"conv2d k{k}s{stride}", lambda a, w, b, s=stride, p=pad: ag.conv2d(a, w, b, stride=s, padding=p), \
            [x4, t(k, k, 4, 3) * 0.5, t(3)]
    yield "group_norm", lambda a, g, b: ag.group_norm(a, g, b, 2), [x4 * 2 + 0.5, t(4), t(4)]
    yield "group_norm+silu", lambda a, g, b: ag.group_norm(a, g, b, 2, act="silu"), [x4 * 2 + 0.5, t(4), t(4)]
    yield "dropout", lambda a: ag.dropout(a, 0.3, np.random.default_rng(5), train=True), [t(4, 6)]
    yield "nearest_upsample", ag.nearest_upsample, [x4]
    yield "avg_downsample", ag.avg_downsample, [x4]
    yield "global_avg_pool", ag.global_avg_pool, [x4]
    yield "channel_bias", ag.channel_bias, [x4, t(2, 4)]
    idx = np.array([0, 2, 2, 1])
    yield "embedding", lambda tab: ag.embedding(tab, idx), [t(3, 5)]
    target = t(3, 4)
    yield "mse", lambda p: ag.mse(p, target), [t(3, 4)]


def _end_to_end_error(r):
    cfg = UNetConfig(base_channels=4, ch_mult=(1, 2), blocks_per_res=1, dropout_rate=0.0, cond_dim=6,
                     image_size=8, groups=2)
    params = build_unet(cfg, 5, dtype=np.float64)
    for k in params:
        params[k] = params[k] + 0.1 * r.standard_normal(params[k].shape)
    xt, eps = r.standard_normal((2, 1, 8, 8, 3))
    z = r.standard_normal((1, 6))

    def loss_of(p):
        P = {k: ag.Tensor(v, requires_grad=True) for k, v in p.items()}
        return ag.mse(forward(P, xt, z, cfg), eps), P

    loss, P = loss_of(params)
    loss.backward()
    names = sorted(params)
    h, worst = 1e-6, 0.0
    for _ in range(60):
        name = names[int(r.integers(len(names)))]
        idx = tuple(int(r.integers(s)) for s in params[name].shape)
        orig = params[name][idx]
        params[name][idx] = orig + h
        lp = float(loss_of(params)[0].data)
        params[name][idx] = orig - h
        lm = float(loss_of(params)[0].data)
        params[name][idx] = orig
        num, ana = (lp - lm) / (2 * h), P[name].grad[idx]
        worst = max(worst, abs(num - ana) / max(abs(num), abs(ana), 1e-7))
    return worst


@pytest.mark.criterion(2, "gradient suite")
def test_criterion_2_gradients(detail, monkeypatch):
    t0 = time.perf_counter()
    r = np.random.default_rng(2)
    worst = 0.0
    feats, protos = r.standard_normal((6, 5)), r.standard_normal((3, 2, 5))
    labels = np.array([0, 1, 2, 0, 1, 2])
    worst = max(worst, check_gradients(lambda f, p: cpl_loss_op(f, labels, p, 0.8, 0.05), [feats, protos], r,
                                       project=False))
    for impl in BACKENDS:
        monkeypatch.setattr(kernels, "_impl", impl)
        for name, fn, arrays in _primitive_checks(np.random.default_rng(3)):
            worst = max(worst, check_gradients(fn, arrays, r, tol=1e-4))
    e2e = _end_to_end_error(r)
    elapsed = time.perf_counter() - t0
    detail.update(primitive_err=f"{worst:.1e}", end_to_end_err=f"{e2e:.1e}", seconds=f"{elapsed:.1f}")
    assert worst < 1e-4 and e2e < 1e-3 and elapsed < 300


@pytest.mark.criterion(3, "guidance boundaries")
def test_criterion_3_guidance(detail):
    r = np.random.default_rng(3)
    c, u = r.standard_normal((2, 4, 8, 8, 3)).astype(np.float32)
    assert guided_noise(c, u, 0.0).tobytes() == c.tobytes()
    for w in (0.0, 0.1, 0.5, 3.0, 17.25):
        assert guided_noise(c, c.copy(), w).tobytes() == c.tobytes()

    cfg = UNetConfig(base_channels=4, ch_mult=(1,), blocks_per_res=1, dropout_rate=0.0, cond_dim=8, image_size=8,
                     groups=2)
    params = build_unet(cfg, 0)
    params["out_conv.weight"] = r.standard_normal(params["out_conv.weight"].shape).astype(np.float32) * 0.3
    from protodiff.denoiser import Denoiser

    model, table, sched = Denoiser(cfg, params), init_random(3, 4, 0), make_linear_schedule(20)
    req = SampleRequest(label=1, guidance_weight=0.0, n_samples=3, seed=4)
    fast = ddpm_sample(model, table, sched, req, 4, (8, 8, 3))
    general = ddpm_sample(model, table, sched, req, 4, (8, 8, 3), skip_uncond_at_zero=False)
    assert fast.tobytes() == general.tobytes()


def _tiny_training(mode, steps, seed=0):
    unet = UNetConfig(base_channels=8, ch_mult=(1, 2), blocks_per_res=1, cond_dim=16, image_size=8)
    cfg = DiffusionTrainConfig(steps=steps, batch_size=8, d_t=8, embedding_mode=mode, eval_every=0, seed=seed)
    r = np.random.default_rng(7)
    cb = Codebook(r.standard_normal((3, 1, 8)).astype(np.float32))
    y = np.arange(48) % 3
    x = np.clip(r.uniform(-1, 1, (48, 8, 8, 3)) * 0.3 + (y[:, None, None, None] - 1) * 0.5, -1, 1)
    state = init_state(cfg, unet, make_linear_schedule(50), 3, codebook=cb, d_p=8)
    return state, x.astype(np.float32), y


@pytest.mark.criterion(4, "frozen/unfrozen contract")
def test_criterion_4_frozen_unfrozen(detail):
    for mode in ("proto-frozen", "proto-unfrozen"):
        state, x, y = _tiny_training(mode, 500)
        before = rows_hash(state.table.rows[:-1])
        train_diffusion(x, y, state)
        after = rows_hash(state.table.rows[:-1])
        assert state.step == 500
        if mode == "proto-frozen":
            assert after == before
        else:
            assert after != before
    detail["steps"] = 500


@pytest.mark.criterion(5, "stage I efficacy and prototype hull")
def test_criterion_5_stage_one(tmp_path, detail, capsys):
    d, p, fig = tmp_path / "data.pdck", tmp_path / "proto.pdck", tmp_path / "pca.png"
    common = ["--set", "dataset.C=3", "--set", "dataset.n_total=2000", "--set", "dataset.image_size=16"]
    assert cli.main(["gen-data", "--out", str(d), *common]) == 0
    assert cli.main(["proto-train", "--data", str(d), "--out", str(p), *common]) == 0
    header, _ = container.load(p)
    assert header["proto"]["epochs"] <= 20
    train_acc = max(row["accuracy"] for row in header["history"])

    from protodiff.data import load_dataset
    from protodiff.metrics import load_network

    ds, _ = load_dataset(d)
    assert len(ds) == 2000 and ds.images.shape[1:] == (16, 16, 3)
    ext, cb, _ = load_network(p)
    held = pipeline.load_eval_data(ExperimentConfig(), 2000)
    held_acc = accuracy(ext, cb, held.images, held.labels)
    capsys.readouterr()
    assert cli.main(["viz-proto", "--proto", str(p), "--data", str(d), "--out", str(fig), *common]) == 0
    inside = json.loads(capsys.readouterr().out.strip().splitlines()[-1])["prototype_inside_hull"]
    detail.update(train_acc=f"{train_acc:.3f}", held_out_acc=f"{held_acc:.3f}", inside_hull=inside)
    assert train_acc >= 0.95 and held_acc >= 0.95
    assert fig.stat().st_size > 0 and len(inside) == 3 and all(inside)


def _first_reaching(steps, curve, target):
    return next((s for s, v in zip(steps, curve) if v <= target), None)


@pytest.mark.slow
@pytest.mark.criterion(6, "trend reproduction")
def test_criterion_6_trend(tmp_path, detail):
    t0 = time.perf_counter()
    results, _ = pipeline.trend_experiment(trend_config(), seeds=(0, 1, 2), out_dir=str(tmp_path),
                                           n_samples=512, guidance_weight=0.0)
    steps, base = pipeline.median_curve(results, "baseline-random")
    _, proto = pipeline.median_curve(results, "proto-unfrozen")
    assert steps == [500, 1000, 1500, 2000, 2500, 3000]
    base_1000, proto_1000 = base[steps.index(1000)], proto[steps.index(1000)]
    reach = _first_reaching(steps, proto, base[-1])
    detail.update(base=[round(v, 3) for v in base], proto=[round(v, 3) for v in proto],
                  proto_reaches_base_final_at=reach, minutes=f"{(time.perf_counter() - t0) / 60:.1f}")
    (tmp_path / "trend.json").write_text(json.dumps(results))
    assert proto_1000 < base_1000
    assert reach is not None and reach < 3000


@pytest.mark.slow
@pytest.mark.criterion(7, "ablation harness over prototype size")
def test_criterion_7_sweep(tmp_path, detail, capsys):
    cfg = trend_config()
    out = tmp_path / "sweep"
    argv = ["sweep", "--dims", "32", "64", "128", "--n-samples", "512", "--out", str(out),
            "--set", f"unet.base_channels={cfg.unet.base_channels}", "--set", "unet.ch_mult=[1,2]",
            "--set", "unet.blocks_per_res=1", "--set", "train.batch_size=64", "--set", "train.steps=1000",
            "--set", "train.eval_every=0"]
    capsys.readouterr()
    assert cli.main(argv) == 0
    rows = json.loads(capsys.readouterr().out.strip().splitlines()[-1])["rows"]
    assert [r["dim"] for r in rows] == [32, 64, 128]
    assert all(np.isfinite(r["fid"]) and r["fid"] >= 0 and r["steps"] == 1000 for r in rows)
    assert len({r["feature_extractor_id"] for r in rows}) == 1
    assert (out / "sweep.csv").read_text().count("\n") == 4
    detail["fid"] = {r["dim"]: round(r["fid"], 3) for r in rows}


@pytest.mark.criterion(8, "determinism and persistence")
def test_criterion_8_determinism(tmp_path, detail):
    a, x, y = _tiny_training("proto-unfrozen", 120, seed=3)
    b, _, _ = _tiny_training("proto-unfrozen", 120, seed=3)
    train_diffusion(x, y, a)
    train_diffusion(x, y, b)
    assert a.losses == b.losses and len(a.losses) == 120

    part, _, _ = _tiny_training("proto-unfrozen", 120, seed=3)
    train_diffusion(x, y, part, max_steps=70)
    save_checkpoint(part, tmp_path / "mid.pdck")
    resumed = load_checkpoint(tmp_path / "mid.pdck")
    train_diffusion(x, y, resumed)
    assert resumed.step == 120 and resumed.losses == a.losses
    assert all(resumed.params[k].tobytes() == a.params[k].tobytes() for k in a.params)

    save_checkpoint(resumed, tmp_path / "one.pdck")
    save_checkpoint(load_checkpoint(tmp_path / "one.pdck"), tmp_path / "two.pdck")
    blob = (tmp_path / "one.pdck").read_bytes()
    assert blob == (tmp_path / "two.pdck").read_bytes()

    r = np.random.default_rng(8)
    positions = r.choice(np.arange(8, len(blob)), size=200, replace=False)
    for pos in positions:
        bad = bytearray(blob)
        bad[pos] ^= 1 << int(r.integers(8))
        with pytest.raises(container.ContainerError):
            container.decode(bytes(bad))
    detail.update(resumed_steps=120 - 70, corruptions_detected=len(positions))


@pytest.mark.criterion(9, "sampler analytic-denoiser test")
def test_criterion_9_teacher_forcing(detail):
    sched = schedule_from_betas([1e-4, 0.05, 0.1, 0.2, 0.3])
    x0 = np.random.default_rng(9).uniform(-0.95, 0.95, (8, 4, 4, 3))
    ab = sched.alpha_bars

    def oracle(xt, t, z):
        return (xt - np.sqrt(ab[t]) * x0) / np.sqrt(1 - ab[t])

    worst = 0.0
    for w in (0.0, 0.5):
        for clamp in (True, False):
            req = SampleRequest(label=1, guidance_weight=w, n_samples=8, seed=1, clamp_x0=clamp)
            out = ddpm_sample(oracle, init_random(3, 4, 0), sched, req, 4, (4, 4, 3), dtype=np.float64)
            worst = max(worst, float(np.abs(out - x0).max()))
    detail["max_abs_err"] = f"{worst:.1e}"
    assert worst < 1e-3


def test_squared_distances_used_by_assignment():
    # assign_class must agree with the distance matrix it is built on
    r = np.random.default_rng(0)
    cb = Codebook(r.standard_normal((4, 2, 3)))
    f = r.standard_normal((50, 3))
    d = squared_distances(f, cb)
    np.testing.assert_array_equal(assign_class(f, cb), d.min(axis=2).argmin(axis=1))
