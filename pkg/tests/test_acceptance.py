"""Acceptance criteria C01-C14, one PASS/FAIL line each.

Run alone with ``pytest tests/test_acceptance.py -s``; the lines are also
repeated in the terminal summary. Tolerances are pinned below and are never
adjusted to fit a result. The directional experiments (C07-C12) share their
runs through module-scoped caches and together take roughly 45 CPU minutes.
"""
import functools
import json
import math
import tempfile
import time
from pathlib import Path

import numpy as np
import pytest

from metadepth import cli
from metadepth import diffcore as dc
from metadepth import evalproto as ep
from metadepth import metaopt as mo
from metadepth import model as M
from metadepth import sceneforge as sf
from metadepth.tasks import RngStream, sample_task_pair

pytestmark = pytest.mark.acceptance

RESULTS = []

GRAD_TOL = 1e-4  # C01 relative error
GRAD_BUDGET_S = 60.0  # C01 runtime
EXACT_TOL = 1e-12  # C02, C04
ORACLE_TOL = 1e-10  # C05
SCALE_TOL = 1e-9  # C06
T1_BUDGET_S = 15 * 60.0  # C07 runtime
SEEDS = (0, 1, 2, 3, 4)
MAJORITY = 4  # "at least 4 of 5 seeds"
PRIOR_BAND = 0.02  # C09 relative band around the no-prior baseline

# desk-scale experiment profile, shared by C07-C11
RES = (32, 32)
ARCH = M.ArchConfig(input_size=RES, d_max=5.0)
ALPHA = 1e-2  # inner-loop lr of the first-stage comparison, also the matched DSL lr
LR2 = 3e-2  # second-stage lr
ALPHA_BENCH = 3e-2
N_T1, L, BETA, K = 15, 4, 0.5, 32


def report(cid, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] C{cid:02d} {detail}"
    RESULTS.append(line)
    print(line)
    assert ok, line


def wins(a, b, better=lambda x, y: x < y):
    return sum(better(x, y) for x, y in zip(a, b))


# --------------------------------------------------------------------------- C01


def _gradcheck_configs(rng):
    """(name, fn, arrays) triples covering every op and the full model."""
    out = []

    def r(*shape):
        return rng.normal(size=shape)

    for _ in range(2):
        a, b = r(3, 4), r(1, 4)
        out.append(("add", lambda x, y: dc.total(dc.mul(dc.add(x, y), dc.add(x, y))), [a, b]))
        out.append(("mul", lambda x, y: dc.total(dc.mul(x, y)), [r(2, 3), r(2, 1)]))
        out.append(("sub/neg", lambda x, y: dc.total(dc.mul(x - y, -x)), [r(3, 2), r(3, 2)]))
        out.append(("elu", lambda x: dc.total(dc.mul(dc.elu(x), dc.elu(x))), [r(4, 5) + 0.05]))
        out.append(("sigmoid", lambda x: dc.total(dc.mul(dc.sigmoid(x), x)), [r(3, 3)]))
        w = rng.random((2, 1, 1, 1))
        out.append(("blend", lambda x, y, w=w: dc.total(dc.mul(dc.blend(x, y, w), x)), [r(2, 3, 2, 2), r(2, 3, 2, 2)]))
        stride, pad = int(rng.integers(1, 3)), int(rng.integers(0, 2))
        conv_shape = dc.conv2d(dc.Tensor(r(2, 2, 5, 5)), dc.Tensor(r(3, 2, 3, 3)), stride=stride, padding=pad).shape
        proj = r(*conv_shape)
        out.append((f"conv2d s{stride} p{pad}",
                    lambda x, k, b, s=stride, p=pad, q=proj: dc.total(dc.mul(dc.conv2d(x, k, b, stride=s, padding=p), q)),
                    [r(2, 2, 5, 5), r(3, 2, 3, 3), r(3)]))
        q = r(1, 2, 6, 8)
        out.append(("upsample2x", lambda x, q=q: dc.total(dc.mul(dc.upsample2x(x), q)), [r(1, 2, 3, 4)]))
        q = r(2, 5, 3, 3)
        out.append(("concat", lambda x, y, q=q: dc.total(dc.mul(dc.concat_channels(x, y), q)), [r(2, 2, 3, 3), r(2, 3, 3, 3)]))
        q = r(1, 2, 3, 4)
        out.append(("flip_lr", lambda x, q=q: dc.total(dc.mul(dc.flip_lr(x), q)), [r(1, 2, 3, 4)]))
        tgt, m = r(2, 1, 3, 3), rng.random((2, 1, 3, 3)) > 0.3
        out.append(("l2 masked", lambda x, t=tgt, m=m: dc.l2_loss(x, t, m), [r(2, 1, 3, 3)]))
        out.append(("l2 per-sample", lambda x, t=tgt, m=m: dc.l2_loss(x, t, m, per_sample=True), [r(2, 1, 3, 3)]))
    arch = M.ArchConfig(input_size=(8, 8), encoder_channels=(2, 3, 4), decoder_channels=(3, 2), dtype="f64")
    for seed in (0, 1):
        theta = M.init_params(arch, seed).astype(np.float64)
        names = theta.names()
        img, depth = rng.random((2, 3, 8, 8)), rng.uniform(1, 4, (2, 1, 8, 8))

        def loss(*arrays, img=img, depth=depth, names=names):
            return dc.l2_loss(M.forward(img, dict(zip(names, arrays)), arch), depth)

        out.append((f"full model seed {seed}", loss, [theta[n] for n in names]))
    return out


def test_c01_gradient_correctness():
    t0 = time.process_time()
    configs = _gradcheck_configs(np.random.default_rng(2024))
    errs = {name: dc.gradcheck(fn, arrays, eps=1e-5) for name, fn, arrays in configs}
    elapsed = time.process_time() - t0
    worst = max(errs, key=errs.get)
    ok = len(configs) >= 20 and errs[worst] <= GRAD_TOL and elapsed <= GRAD_BUDGET_S
    report(1, ok, f"{len(configs)} configs, worst rel err {errs[worst]:.2e} ({worst}), {elapsed:.1f}s CPU")


# --------------------------------------------------------------------------- C02-C04

SMALL = M.ArchConfig(input_size=(8, 8), encoder_channels=(4, 6, 8), decoder_channels=(6, 4), d_max=5.0)


@pytest.fixture(scope="module")
def small():
    return sf.build_dataset("low", 2, 8, 0, (8, 8)), M.init_params(SMALL, 0)


def _plain_cfg(**kw):
    base = dict(N=2, L=1, K=4, alpha=1e-2, beta=1.0, use_online_aug=False, use_mixup=False,
                use_channel_shuffle=False)
    return mo.MetaConfig(**{**base, **kw})


def test_c02_reptile_sgd_collapse(small):
    data, theta = small
    devs = []
    for seed in (0, 1, 2):
        c = _plain_cfg(seed=seed)
        prior, _ = mo.meta_learn(data, c, theta, SMALL)
        ref = mo.sgd_train(data, theta, SMALL, c.alpha, c.N * c.iterations_per_epoch(len(data)), c.K, seed)
        devs.append(prior.max_abs_diff(ref))
    report(2, max(devs) <= EXACT_TOL, f"max per-parameter deviation {max(devs):.1e} over seeds 0,1,2")


def test_c03_meta_update_algebra(small):
    data, theta = small
    aug, _ = mo.meta_learn(data, _plain_cfg(beta=1.0, L=3), theta, SMALL)
    keep = mo.meta_update(theta, aug, 0.0).equals(theta)
    adopt = mo.meta_update(theta, aug, 1.0).equals(aug)
    a, b = M.ParamVector({"x": np.array([1.0])}), M.ParamVector({"x": np.array([0.0])})
    scalar = float(mo.meta_update(a, b, 0.5)["x"][0])
    report(3, keep and adopt and scalar == 0.5, f"beta=0 identical {keep}, beta=1 identical {adopt}, scalar {scalar!r}")


def test_c04_task_augmentation_boundaries(small):
    data, theta = small
    B, B2 = sample_task_pair(data, 4, RngStream(3))
    c = _plain_cfg()
    ref, _ = mo.plain_step(theta, B, c.alpha, SMALL)
    mix, _, _ = mo.mixup_step(theta, B, B2, c, SMALL, lam=np.ones(4))
    p = SMALL.bottleneck_channels
    shuf, _, _ = mo.channel_shuffle_step(theta, B, B2, c, SMALL, keep=np.ones(p))
    d_mix, d_shuf = mix.max_abs_diff(ref), shuf.max_abs_diff(ref)
    p = 64
    counts = np.array([p - mo.draw_shuffle_mask(p, mo.MetaConfig(), RngStream(9).child(k)).sum()
                       for k in range(10_000)])
    sigma = math.sqrt(p * 0.05 * 0.95 / 10_000)
    dev = abs(counts.mean() - p / 20)
    ok = d_mix <= EXACT_TOL and d_shuf <= EXACT_TOL and dev <= 3 * sigma
    report(4, ok, f"mixup dev {d_mix:.1e}, shuffle dev {d_shuf:.1e}, "
                  f"mean shuffled {counts.mean():.4f} vs {p / 20} (3 sigma {3 * sigma:.4f})")


# --------------------------------------------------------------------------- C05-C06


def _brute(pred, gt, cap=10.0, min_depth=1e-3):
    pairs = [(float(a), float(b)) for a, b in zip(np.ravel(pred), np.ravel(gt)) if min_depth <= b <= cap]
    n = len(pairs)
    d = [math.log(a) - math.log(b) for a, b in pairs]
    md = sum(d) / n
    out = dict(mae=sum(abs(a - b) for a, b in pairs) / n, absrel=sum(abs(a - b) / b for a, b in pairs) / n,
               rmse=math.sqrt(sum((a - b) ** 2 for a, b in pairs) / n),
               silog=math.sqrt(max(sum(x * x for x in d) / n - md * md, 0.0)))
    for c in (1, 2, 3):
        out[f"delta{c}"] = 100 * sum(max(a / b, b / a) < 1.25 ** c for a, b in pairs) / n
    return out


def test_c05_metric_oracle():
    rng = np.random.default_rng(5)
    worst, ordered, inert = 0.0, True, True
    for _ in range(100):
        shape = tuple(rng.integers(2, 10, 2))
        g = rng.uniform(0.05, 14, shape)
        g[rng.random(shape) < 0.1] = 0
        g.flat[0] = 2.0
        p = rng.uniform(0.05, 12, shape)
        r = ep.compute_metrics(p, g)
        ref = _brute(p, g)
        worst = max(worst, max(abs(getattr(r, k) - v) for k, v in ref.items()))
        ordered &= r.delta1 <= r.delta2 <= r.delta3
        masked = (g < 1e-3) | (g > 10)
        p2 = p.copy()
        p2[masked] = rng.uniform(1e-3, 1e6, masked.sum())
        inert &= ep.compute_metrics(p2, g).to_dict() == r.to_dict()
    report(5, worst <= ORACLE_TOL and ordered and inert,
           f"max abs deviation {worst:.1e} on 100 pairs, delta ordering {ordered}, masked pixels inert {inert}")


def test_c06_median_scaling():
    rng = np.random.default_rng(6)
    cfg = ep.EvalConfig(protocol="zero_shot")
    worst = silog_worst = 0.0
    for _ in range(50):
        g = rng.uniform(0.5, 9.5, (6, 7))
        p = rng.uniform(0.1, 3.0, (6, 7))
        base = ep.evaluate_pair(p, g, cfg)
        for c in (0.1, 1.0, 10.0):
            r = ep.evaluate_pair(c * p, g, cfg)
            worst = max(worst, max(abs(getattr(r, k) - getattr(base, k)) for k in ep.METRIC_NAMES))
            silog_worst = max(silog_worst, abs(ep.compute_metrics(c * p, g).silog - ep.compute_metrics(p, g).silog))
    report(6, worst <= SCALE_TOL and silog_worst <= SCALE_TOL,
           f"max zero-shot deviation {worst:.1e}, raw SILog deviation {silog_worst:.1e}")


# --------------------------------------------------------------------------- shared desk experiments


@functools.lru_cache(maxsize=None)
def gap_data():
    """Low-variety training scenes, a held-out low-variety validation set, high-variety test scenes."""
    return (sf.build_dataset("low", 8, 64, 1, RES), sf.build_dataset("low", 8, 8, 55, RES),
            sf.build_dataset("high", 16, 8, 99, RES))


ZERO_SHOT = ep.EvalConfig(protocol="zero_shot")
RUN_SECONDS = {}


@functools.lru_cache(maxsize=None)
def gap_run(kind, seed):
    """Zero-shot test report of one first-stage model trained on the low-variety set."""
    train, val, test = gap_data()
    theta0 = M.init_params(ARCH, seed)
    t0 = time.process_time()
    if kind == "dsl":
        # lr = alpha, NL*beta equivalent epochs, early stopping on the held-out low-variety scenes
        theta, _ = mo.supervised_train(train, theta0, ARCH, ALPHA, int(N_T1 * L * BETA), patience=5,
                                       val_dataset=val, K=K, seed=seed, augment="none")
    else:
        aug = kind == "meta_aug"
        cfg = mo.MetaConfig(N=N_T1, L=L, K=1 if kind == "meta_k1" else K, alpha=ALPHA, beta=BETA,
                            use_online_aug=aug, use_mixup=aug, use_channel_shuffle=aug, seed=seed)
        theta, _ = mo.meta_learn(train, cfg, theta0, ARCH)
    RUN_SECONDS[(kind, seed)] = time.process_time() - t0
    return ep.evaluate_model(theta, ARCH, test, ZERO_SHOT)[0]


def test_c07_meta_vs_dsl_zero_shot():
    meta = [gap_run("meta", s).rmse for s in SEEDS]
    dsl = [gap_run("dsl", s).rmse for s in SEEDS]
    cpu = sum(RUN_SECONDS[(k, s)] for k in ("meta", "dsl") for s in SEEDS)
    n = wins(meta, dsl)
    pct = 100 * ep.improvement(float(np.mean(meta)), float(np.mean(dsl)))
    report(7, n >= MAJORITY and cpu <= T1_BUDGET_S,
           f"meta RMSE < DSL in {n}/5 seeds, mean change {pct:+.1f}% "
           f"(meta {np.round(meta, 3).tolist()}, DSL {np.round(dsl, 3).tolist()}), {cpu / 60:.1f} CPU min")


def test_c10_k_ablation():
    k32 = [gap_run("meta", s).rmse for s in SEEDS]
    k1 = [gap_run("meta_k1", s).rmse for s in SEEDS]
    n = wins(k32, k1, lambda a, b: a <= b)
    report(10, n >= MAJORITY, f"K=32 RMSE <= K=1 in {n}/5 seeds "
                              f"(K=32 {np.round(k32, 3).tolist()}, K=1 {np.round(k1, 3).tolist()})")


def test_c11_augmentation_ablation():
    aug = [gap_run("meta_aug", s).rmse for s in SEEDS]
    plain = [gap_run("meta", s).rmse for s in SEEDS]
    n = wins(aug, plain, lambda a, b: a <= b)
    report(11, n >= MAJORITY, f"augmented RMSE <= plain in {n}/5 seeds "
                              f"(aug {np.round(aug, 3).tolist()}, plain {np.round(plain, 3).tolist()})")


@functools.lru_cache(maxsize=None)
def bench_data():
    """Desk benchmark: train / val / test scenes of one generator from disjoint seeds, intra evaluation.

    Low variety because plain SGD at this scale barely beats a constant
    predictor on the high-variety generator, which leaves nothing to compare.
    """
    return (sf.build_dataset("low", 24, 8, 11, RES), sf.build_dataset("low", 6, 4, 12, RES),
            sf.build_dataset("low", 12, 4, 13, RES))


N_BENCH = 5
STAGE2_EPOCHS, STAGE2_PATIENCE = 60, 10
PRIOR_EPOCHS = N_BENCH * L  # same gradient-evaluation budget as the dual loop without task augmentation


@functools.lru_cache(maxsize=None)
def bench_run(kind, seed):
    """Final test AbsRel after the second stage, starting from the prior named by ``kind``."""
    train, val, test = bench_data()
    theta = M.init_params(ARCH, seed)
    cfg = mo.MetaConfig(N=N_BENCH, L=L, K=K, alpha=ALPHA_BENCH, beta=BETA, seed=seed)
    if kind == "meta":
        theta, _ = mo.meta_learn(train, cfg, theta, ARCH)
    elif kind.startswith("wd"):
        theta = mo.baseline_wd_pretrain(train, theta, ARCH, LR2, float(kind[2:]), PRIOR_EPOCHS, K=K, seed=seed)
    elif kind == "ga":
        theta = mo.baseline_grad_accum(train, theta, ARCH, cfg, LR2, PRIOR_EPOCHS)
    theta, _ = mo.supervised_train(train, theta, ARCH, LR2, STAGE2_EPOCHS, patience=STAGE2_PATIENCE,
                                   val_dataset=val, K=K, seed=seed)
    return ep.evaluate_model(theta, ARCH, test, ep.EvalConfig())[0].absrel


def test_c08_full_pipeline_vs_scratch():
    meta = [bench_run("meta", s) for s in SEEDS]
    scratch = [bench_run("none", s) for s in SEEDS]
    n = wins(meta, scratch)
    report(8, n >= MAJORITY, f"meta-init AbsRel < scratch in {n}/5 seeds "
                             f"(meta {np.round(meta, 4).tolist()}, scratch {np.round(scratch, 4).tolist()})")


def test_c09_prior_baselines():
    base = np.array([bench_run("none", s) for s in SEEDS])
    meta = np.array([bench_run("meta", s) for s in SEEDS])
    parts, in_band, beaten = [], True, True
    for kind in ("wd0.1", "wd0.05", "wd0.01", "ga"):
        vals = np.array([bench_run(kind, s) for s in SEEDS])
        rel = float(vals.mean() / base.mean() - 1)
        n = wins(meta, vals)
        in_band &= abs(rel) <= PRIOR_BAND
        beaten &= n > len(SEEDS) // 2
        parts.append(f"{kind} {100 * rel:+.1f}% vs no-prior, meta wins {n}/5")
    report(9, in_band and beaten, "; ".join(parts))


# --------------------------------------------------------------------------- C12


def _recipe(path, d):
    path.write_text(json.dumps(d))
    return str(path)


def test_c12_fomaml_grid_above_reptile():
    grid = [1.0, 0.1, 0.01, 1e-3, 1e-4]
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        assert cli.main(["gen-data", "--variety", "low", "--scenes", "8", "--views", "16", "--seed", "21",
                         "--out", str(root / "train"), "--resolution", str(RES[0])]) == 0
        common = {"data": {"train": "train"}, "arch": ARCH.to_dict(), "stage2": {"max_epochs": 0}, "seeds": [0]}
        meta = {"N": 4, "L": L, "K": K, "alpha": ALPHA, "beta": BETA,
                "use_online_aug": False, "use_mixup": False, "use_channel_shuffle": False}
        rep = _recipe(root / "reptile.json", {**common, "name": "reptile", "method": "meta_init", "meta": meta,
                                               "output": "reptile"})
        fo = _recipe(root / "fomaml.json", {**common, "name": "fomaml", "method": "fomaml", "meta": meta,
                                             "grid": {"alpha": grid, "beta": grid}, "output": "fomaml"})
        assert cli.main(["train", rep]) == 0
        assert cli.main(["train", fo]) == 0
        assert cli.main(["compare", str(root / "reptile"), str(root / "fomaml"), "--out", str(root / "cmp")]) == 0
        rows = json.loads((root / "cmp" / "compare.json").read_text())["grid"]
        svg = (root / "cmp" / "loss_curves.svg").read_text()
        emitted = (root / "cmp" / "grid.csv").exists() and svg.count("<polyline ") == 1 + len(grid) ** 2
    above = sum(r["above_reference"] for r in rows)
    diverged = sum(r["diverged"] for r in rows)
    closest = min((r for r in rows if not r["diverged"]), key=lambda r: r["smoothed_loss"], default=None)
    tail = "" if closest is None else (f", lowest FOMAML loss {closest['smoothed_loss']:.4f} at "
                                       f"({closest['alpha']:g}, {closest['beta']:g}) vs Reptile "
                                       f"{closest['reference_loss']:.4f}")
    report(12, emitted and len(rows) == 25 and above == 25,
           f"FOMAML above Reptile at {above}/25 grid points ({diverged} diverged){tail}, curves+grid emitted {emitted}")


# --------------------------------------------------------------------------- C13-C14


def test_c13_format_round_trips():
    rng = np.random.default_rng(13)
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        depth = rng.uniform(0, 20, (7, 9)).astype(np.float32)
        sf.write_pfm(root / "d.pfm", depth)
        pfm = sf.read_pfm(root / "d.pfm").tobytes() == depth.tobytes()
        theta = M.init_params(SMALL, 3)
        M.save_params(theta, root / "t.mdpt")
        ckpt = M.load_params(root / "t.mdpt").equals(theta)
        spec = sf.random_scene_specs("high", 1, 1, 4, (16, 16))[0][1][0]
        s = sf.render_scene(spec, (16, 16))
        d = s.depth[0].copy()
        d[::3, ::4] = 0.0
        pts, cols = ep.backproject(d, s.image, spec.intrinsics, ep.valid_mask(d, ep.EvalConfig()))
        ep.write_ply(root / "c.ply", pts, cols)
        ply = ep.read_ply_vertex_count(root / "c.ply") == int(ep.valid_mask(d, ep.EvalConfig()).sum())
    specs = [v for _, views in sf.random_scene_specs("high", 25, 2, 13, (16, 16)) for v in views]
    depth_same = img_changed = 0
    for spec in specs:
        tex = spec.wall_texture
        other = sf.WallTexture("stripes" if tex.kind != "stripes" else "checker",
                               tuple(1 - c for c in tex.color_a), tex.color_b, tex.tile, ())
        a, b = sf.render_scene(spec, (16, 16)), sf.render_scene(spec.with_texture(other), (16, 16))
        depth_same += a.depth.tobytes() == b.depth.tobytes()
        img_changed += not np.array_equal(a.image, b.image)
    texture = depth_same == len(specs) == 50 and img_changed > 0
    report(13, pfm and ckpt and ply and texture,
           f"PFM {pfm}, checkpoint {ckpt}, PLY count {ply}, texture change on {len(specs)} specs: "
           f"depth identical {depth_same}, image changed {img_changed}")


def test_c14_train_determinism():
    with tempfile.TemporaryDirectory() as tmp:
        root = Path(tmp)
        for name, variety, seed in (("train", "low", 1), ("val", "low", 2), ("test", "high", 3)):
            assert cli.main(["gen-data", "--variety", variety, "--scenes", "2", "--views", "4", "--seed", str(seed),
                             "--out", str(root / name), "--resolution", "8"]) == 0
        d = {"name": "det", "method": "meta_init", "data": {"train": "train", "val": "val", "test": "test"},
             "arch": SMALL.to_dict(), "meta": {"N": 2, "L": 2, "K": 4, "alpha": 1e-2, "beta": 0.5},
             "stage2": {"lr": 1e-2, "max_epochs": 2, "K": 4}, "seeds": [0, 1]}
        same = True
        for out in ("a", "b"):
            assert cli.main(["train", _recipe(root / f"{out}.json", {**d, "output": out})]) == 0
        files = sorted(p.relative_to(root / "a") for p in (root / "a").rglob("*")
                       if p.suffix in (".mdpt", ".csv"))
        for rel in files:
            same &= (root / "a" / rel).read_bytes() == (root / "b" / rel).read_bytes()
    report(14, same and len(files) >= 10, f"{len(files)} checkpoints and logs bit-identical across two runs: {same}")
