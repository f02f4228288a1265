"""``metadepth`` command line: gen-data, train, evaluate, compare, export-pointcloud.

Exit codes: 0 ok, 2 usage, 3 I/O, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from . import evalproto as ep
from . import metaopt as mo
from .model import ArchConfig, CheckpointError, ParamVector, init_params, load_params, predict, save_params
from .sceneforge import FormatError, HFOV_DEG, generate_dataset, load_dataset, read_manifest

EXIT_OK, EXIT_USAGE, EXIT_IO, EXIT_NUMERIC = 0, 2, 3, 4
METHODS = ("meta_init", "dsl", "wd_pre", "grad_accum", "fomaml")


class UsageError(ValueError):
    pass


# ---------------------------------------------------------------------------
# recipes


@dataclass
class Stage2Settings:
    lr: float = 3e-4
    max_epochs: int = 10
    patience: Optional[int] = 5
    K: int = 32
    augment: str = "flip"


@dataclass
class ExperimentRecipe:
    """Declarative description of one experiment; see ``load_recipe``."""

    name: str
    method: str
    train: str
    val: Optional[str] = None
    test: Optional[str] = None
    arch: ArchConfig = field(default_factory=ArchConfig)
    meta: dict = field(default_factory=dict)
    stage2: Stage2Settings = field(default_factory=Stage2Settings)
    baseline: dict = field(default_factory=dict)
    grid: Optional[dict] = None
    eval: ep.EvalConfig = field(default_factory=ep.EvalConfig)
    seeds: list = field(default_factory=lambda: [0])
    output: str = "runs"
    recipe_hash: str = ""
    raw: dict = field(default_factory=dict)

    def meta_config(self, seed: int, **overrides) -> mo.MetaConfig:
        return mo.MetaConfig(**{**self.meta, **overrides, "seed": seed})

    def data_refs(self) -> dict:
        return {k: v for k, v in (("train", self.train), ("val", self.val), ("test", self.test)) if v}


def _resolve(base: Path, p: Optional[str]) -> Optional[str]:
    if p is None:
        return None
    q = Path(p)
    return str(q if q.is_absolute() else (base / q))


def parse_recipe(d: dict, base: Path = Path("."), recipe_hash: str = "") -> ExperimentRecipe:
    known = {"name", "method", "data", "arch", "meta", "stage2", "baseline", "grid", "eval", "seeds", "output"}
    extra = set(d) - known
    if extra:
        raise UsageError(f"unknown recipe keys: {sorted(extra)}")
    for key in ("name", "method", "data"):
        if key not in d:
            raise UsageError(f"recipe is missing {key!r}")
    if d["method"] not in METHODS:
        raise UsageError(f"method must be one of {METHODS}, got {d['method']!r}")
    data = d["data"]
    if "train" not in data:
        raise UsageError("recipe data needs a train manifest")
    try:
        arch = ArchConfig.from_dict(d.get("arch", {}))
        meta = dict(d.get("meta", {}))
        meta.pop("seed", None)
        mo.MetaConfig(**meta)
        stage2 = Stage2Settings(**d.get("stage2", {}))
        ev = ep.EvalConfig(**d.get("eval", {}))
    except (TypeError, ValueError) as exc:
        raise UsageError(f"bad recipe: {exc}") from exc
    if stage2.augment not in ("flip", "none"):
        raise UsageError("stage2.augment must be 'flip' or 'none'")
    grid = d.get("grid")
    if grid is not None and (d["method"] != "fomaml" or not grid.get("alpha") or not grid.get("beta")):
        raise UsageError("grid needs method fomaml and non-empty alpha and beta lists")
    seeds = [int(s) for s in d.get("seeds", [0])]
    if not seeds:
        raise UsageError("recipe needs at least one seed")
    return ExperimentRecipe(
        name=d["name"], method=d["method"],
        train=_resolve(base, data["train"]), val=_resolve(base, data.get("val")), test=_resolve(base, data.get("test")),
        arch=arch, meta=meta, stage2=stage2, baseline=dict(d.get("baseline", {})), grid=grid, eval=ev, seeds=seeds,
        output=_resolve(base, d.get("output", f"runs/{d['name']}")), recipe_hash=recipe_hash, raw=d,
    )


def load_recipe(path) -> ExperimentRecipe:
    path = Path(path)
    raw = path.read_bytes()
    try:
        d = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: not valid JSON ({exc})") from exc
    return parse_recipe(d, path.parent, hashlib.sha256(raw).hexdigest())


# ---------------------------------------------------------------------------
# running


def _finite(obj):
    # strict JSON has no NaN or Infinity
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _finite(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_finite(v) for v in obj]
    return obj


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_finite(obj), indent=2, sort_keys=True, allow_nan=False) + "\n")


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


class _Data:
    """Datasets of one recipe, loaded once."""

    def __init__(self, recipe: ExperimentRecipe):
        self.sets, self.hashes = {}, {}
        for key, ref in recipe.data_refs().items():
            self.sets[key] = load_dataset(ref)
            self.hashes[key] = read_manifest(ref).content_hash
        res = tuple(recipe.arch.input_size)
        for key, ds in self.sets.items():
            if ds.resolution != res:
                raise UsageError(f"{key} data is {ds.resolution}, architecture expects {res}")


def _stage1(recipe: ExperimentRecipe, data: _Data, theta0: ParamVector, seed: int, meta_overrides: dict):
    """Returns (theta_prior, log or None)."""
    train, arch, s2, bl = data.sets["train"], recipe.arch, recipe.stage2, recipe.baseline
    if recipe.method == "dsl":
        return theta0, None
    if recipe.method == "meta_init":
        return mo.meta_learn(train, recipe.meta_config(seed, **meta_overrides), theta0, arch)
    if recipe.method == "fomaml":
        return mo.fomaml_meta_learn(train, recipe.meta_config(seed, **meta_overrides), theta0, arch,
                                    split=bl.get("split", "half"))
    epochs = int(bl.get("epochs", 1))
    if recipe.method == "wd_pre":
        theta, log = mo.supervised_train(train, theta0, arch, float(bl.get("lr", s2.lr)), epochs, K=s2.K,
                                         seed=seed, weight_decay=float(bl.get("wd", 0.01)), augment=s2.augment)
        return theta, log
    theta = mo.baseline_grad_accum(train, theta0, arch, recipe.meta_config(seed), float(bl.get("lr", s2.lr)),
                                   epochs, augment=s2.augment)
    return theta, None


def run_seed(recipe: ExperimentRecipe, seed: int, out_dir, meta_overrides: Optional[dict] = None,
             data: Optional[_Data] = None) -> dict:
    """One seed of one recipe; writes checkpoints, logs and ``manifest.json`` into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    data = data or _Data(recipe)
    meta_overrides = meta_overrides or {}
    arch = recipe.arch
    theta0 = init_params(arch, seed)
    save_params(theta0, out / "theta_init.mdpt")
    _write_json(out / "arch.json", arch.to_dict())
    record = {
        "recipe": recipe.name, "recipe_hash": recipe.recipe_hash, "method": recipe.method, "seed": seed,
        "dataset_hashes": data.hashes, "arch": arch.to_dict(),
        "meta": recipe.meta_config(seed, **meta_overrides).to_dict(), "stage2": vars(recipe.stage2),
        "baseline": recipe.baseline, "eval": vars(recipe.eval), "status": "ok",
    }
    timing = {}
    try:
        t0 = time.perf_counter()
        theta_prior, log1 = _stage1(recipe, data, theta0, seed, meta_overrides)
        timing["stage1_seconds"] = time.perf_counter() - t0
        save_params(theta_prior, out / "theta_prior.mdpt")
        if log1 is not None:
            log1.to_csv(out / "stage1_log.csv")
            record["stage1_smoothed_loss"] = log1.smoothed_final_loss()
            if log1.diverged is not None:
                # expected, recordable outcome for the first-order MAML comparison
                record["status"] = "diverged"
                record["divergence"] = log1.diverged
        t0 = time.perf_counter()
        s2 = recipe.stage2
        theta_star, log2 = mo.supervised_train(
            data.sets["train"], theta_prior, arch, s2.lr, s2.max_epochs if record["status"] == "ok" else 0,
            patience=s2.patience, val_dataset=data.sets.get("val"), K=s2.K, seed=seed, augment=s2.augment,
        )
        timing["stage2_seconds"] = time.perf_counter() - t0
        log2.to_csv(out / "stage2_log.csv")
        record["stage2_val_rmse"] = log2.val_rmse
        save_params(theta_star, out / "theta_star.mdpt")
    except mo.TrainingDivergence as exc:
        record["status"] = "diverged"
        record["divergence"] = {"iteration": exc.iteration, "loss": exc.loss, "message": str(exc)}
        _write_json(out / "manifest.json", record)
        raise
    if "test" in data.sets and record["status"] == "ok":
        agg, per_image = ep.evaluate_model(theta_star, arch, data.sets["test"], recipe.eval)
        record["test_metrics"] = agg.to_dict()
        ds = data.sets["test"]
        ep.write_per_image_csv(per_image, [f"{s.scene_id}_{s.view_id}" for s in ds.samples], out / "test_per_image.csv")
    _write_json(out / "manifest.json", record)
    _write_json(out / "timing.json", timing)
    return record


def _grid_points(recipe: ExperimentRecipe) -> list:
    if recipe.grid is None:
        return [("", {})]
    return [(f"grid_a{a:g}_b{b:g}", {"alpha": float(a), "beta": float(b)})
            for a in recipe.grid["alpha"] for b in recipe.grid["beta"]]


def _job(args):
    recipe, seed, out_dir, overrides = args
    return run_seed(recipe, seed, out_dir, overrides)


def run_recipe(recipe: ExperimentRecipe, threads: int = 1) -> list:
    """All (grid point, seed) runs of a recipe. Every run owns its subdirectory."""
    out = Path(recipe.output)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "recipe.json", {"recipe": recipe.raw, "recipe_hash": recipe.recipe_hash})
    jobs = [(recipe, s, out / sub / f"seed_{s}", o) for sub, o in _grid_points(recipe) for s in recipe.seeds]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            return list(pool.map(_job, jobs))
    data = _Data(recipe)
    return [run_seed(r, s, d, o, data=data) for r, s, d, o in jobs]


def thread_cap() -> int:
    try:
        return max(int(os.environ.get("METADEPTH_THREADS", "1")), 1)
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# comparison


@dataclass
class RunSummary:
    name: str
    path: Path
    records: list

    @property
    def test_hash(self) -> Optional[str]:
        hashes = {r["dataset_hashes"].get("test") for r in self.records}
        return hashes.pop() if len(hashes) == 1 else "mixed"

    def metric_means(self) -> dict:
        rows = [r["test_metrics"] for r in self.records if "test_metrics" in r]
        if not rows:
            return {}
        return {k: float(np.mean([m[k] for m in rows])) for k in ep.METRIC_NAMES}

    def smoothed_loss(self) -> float:
        vals = [r.get("stage1_smoothed_loss") for r in self.records]
        vals = [math.nan if v is None else v for v in vals]
        if any(r.get("status") == "diverged" for r in self.records):
            return math.inf
        return float(np.mean(vals)) if vals else math.nan

    def curve(self) -> np.ndarray:
        """Stage-1 loss per iteration, averaged over seeds (or the stage-2 log without stage 1)."""
        curves = []
        for r in self.records:
            seed_dir = self.path / f"seed_{r['seed']}"
            f = seed_dir / "stage1_log.csv"
            if not f.exists():
                f = seed_dir / "stage2_log.csv"
            if f.exists():
                curves.append(mo.TrainLog.from_csv(f).losses)
        if not curves:
            return np.zeros(0)
        n = min(len(c) for c in curves)
        return np.mean([c[:n] for c in curves], axis=0)


def collect_runs(paths) -> list:
    runs = []
    for p in map(Path, paths):
        if not p.is_dir():
            raise FileNotFoundError(f"run directory {p} does not exist")
        grid_dirs = sorted(d for d in p.iterdir() if d.is_dir() and d.name.startswith("grid_"))
        for d, name in [(g, f"{p.name}/{g.name}") for g in grid_dirs] or [(p, p.name)]:
            recs = [json.loads(f.read_text()) for f in sorted(d.glob("seed_*/manifest.json"))]
            if not recs:
                raise FileNotFoundError(f"{d}: no completed seed runs")
            runs.append(RunSummary(name, d, recs))
    return runs


def _smooth(x: np.ndarray, frac: float = 0.05) -> np.ndarray:
    w = max(int(len(x) * frac), 1)
    if w == 1:
        return x
    c = np.cumsum(np.insert(x, 0, 0.0))
    out = np.empty_like(x)
    for i in range(len(x)):
        lo = max(0, i - w + 1)
        out[i] = (c[i + 1] - c[lo]) / (i + 1 - lo)
    return out


def loss_curves_svg(runs: list, path, width: int = 720, height: int = 420) -> None:
    """Self-contained SVG, one polyline per run; the numbers live in ``loss_curves.csv``."""
    palette = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]
    curves = [(r.name, _smooth(r.curve())) for r in runs]
    finite = np.concatenate([c[np.isfinite(c) & (c > 0)] for _, c in curves] or [np.ones(1)])
    if finite.size == 0:
        finite = np.ones(1)
    ylo, yhi = np.log10(finite.min()), np.log10(finite.max())
    if yhi - ylo < 1e-9:
        yhi = ylo + 1
    xmax = max([len(c) for _, c in curves] + [2]) - 1
    m = 50

    def xy(i, v):
        x = m + (width - 2 * m) * i / xmax
        y = height - m - (height - 2 * m) * (np.log10(np.clip(v, 10 ** ylo, 10 ** yhi)) - ylo) / (yhi - ylo)
        return f"{x:.1f},{y:.1f}"

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<line x1="{m}" y1="{height - m}" x2="{width - m}" y2="{height - m}" stroke="black"/>',
        f'<line x1="{m}" y1="{m}" x2="{m}" y2="{height - m}" stroke="black"/>',
        f'<text x="{width / 2}" y="{height - 12}" text-anchor="middle" font-size="12">meta-iteration</text>',
        f'<text x="14" y="{height / 2}" font-size="12" transform="rotate(-90 14 {height / 2})" '
        f'text-anchor="middle">loss (log10 {ylo:.2f}..{yhi:.2f})</text>',
    ]
    for k, (name, c) in enumerate(curves):
        color = palette[k % len(palette)]
        pts = " ".join(xy(i, v) for i, v in enumerate(c) if np.isfinite(v))
        parts.append(f'<polyline data-run="{name}" fill="none" stroke="{color}" stroke-width="1.2" points="{pts}"/>')
        parts.append(f'<text x="{width - m + 4}" y="{m + 14 * k}" font-size="10" fill="{color}">{name}</text>')
    parts.append("</svg>")
    Path(path).write_text("\n".join(parts) + "\n")
    with open(Path(path).with_suffix(".csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run", "iteration", "loss"])
        for r in runs:
            for i, v in enumerate(r.curve()):
                w.writerow([r.name, i, repr(float(v))])


def compare_runs(paths, out_dir, baseline: Optional[str] = None) -> dict:
    runs = collect_runs(paths)
    if len(runs) < 2:
        raise UsageError("compare needs at least two completed runs")
    with_tests = [r for r in runs if r.metric_means()]
    if len({r.test_hash for r in with_tests}) > 1:
        raise UsageError("runs were evaluated on different test sets")
    base = next((r for r in runs if r.name == baseline), runs[0]) if baseline else runs[0]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    table = []
    for r in runs:
        means = r.metric_means()
        table.append({"run": r.name, "seeds": len(r.records), **means, "smoothed_loss": r.smoothed_loss()})
    bmeans = base.metric_means()
    improvements = []
    for r in runs:
        if r is base or not bmeans:
            continue
        means = r.metric_means()
        if means:
            improvements.append({"run": r.name, "vs": base.name,
                                 **{k: ep.improvement(means[k], bmeans[k]) for k in ep.METRIC_NAMES}})
    grid = []
    ref = base.smoothed_loss()
    for r in runs:
        rec = r.records[0]
        if rec["method"] == "fomaml":
            loss = r.smoothed_loss()
            grid.append({"run": r.name, "alpha": rec["meta"]["alpha"], "beta": rec["meta"]["beta"],
                         "smoothed_loss": loss, "reference": base.name, "reference_loss": ref,
                         "above_reference": bool(loss > ref), "diverged": math.isinf(loss)})
    cols = ["run", "seeds", *ep.METRIC_NAMES, "smoothed_loss"]
    with open(out / "compare.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for row in table:
            w.writerow([row.get(c, "") for c in cols])
        for row in improvements:
            w.writerow([f"improvement {row['run']} vs {row['vs']}", ""] + [row[k] for k in ep.METRIC_NAMES] + [""])
    md = ["| " + " | ".join(cols) + " |", "|" + "---|" * len(cols)]
    for row in table:
        md.append("| " + " | ".join(_fmt(row.get(c, "")) for c in cols) + " |")
    for row in improvements:
        md.append(f"| improvement {row['run']} vs {row['vs']} | | "
                  + " | ".join(f"{100 * row[k]:+.1f}%" for k in ep.METRIC_NAMES) + " | |")
    (out / "compare.md").write_text("\n".join(md) + "\n")
    if grid:
        with open(out / "grid.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=list(grid[0]))
            w.writeheader()
            w.writerows(grid)
    loss_curves_svg(runs, out / "loss_curves.svg")
    result = {"baseline": base.name, "table": table, "improvements": improvements, "grid": grid}
    _write_json(out / "compare.json", result)
    return result


def _fmt(v) -> str:
    if isinstance(v, float) and math.isnan(v):
        return "n/a"
    if isinstance(v, float):
        return f"{v:.4f}"
    return str(v)


# ---------------------------------------------------------------------------
# commands


def _arch_for_checkpoint(ckpt: Path, arch_path: Optional[str]) -> ArchConfig:
    p = Path(arch_path) if arch_path else ckpt.parent / "arch.json"
    if not p.exists():
        raise FileNotFoundError(f"architecture file {p} not found (pass --arch)")
    return ArchConfig.from_dict(json.loads(p.read_text()))


def cmd_gen_data(args) -> int:
    m = generate_dataset(args.variety, args.scenes, args.views, args.seed, args.out,
                         resolution=(args.resolution, args.resolution), name=args.name or "")
    print(f"{m.name}: {len(m.samples)} samples, hash {m.content_hash[:16]}")
    return EXIT_OK


def cmd_train(args) -> int:
    recipe = load_recipe(args.recipe)
    if args.output:
        recipe.output = args.output
    if args.seeds:
        recipe.seeds = [int(s) for s in args.seeds.split(",")]
    records = run_recipe(recipe, threads=thread_cap())
    for r in records:
        msg = r.get("test_metrics", {}).get("rmse")
        print(f"{recipe.name} seed {r['seed']}: {r['status']}" + (f", test rmse {msg:.4f}" if msg else ""))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise FileNotFoundError(f"checkpoint {ckpt} not found")
    theta = load_params(ckpt)
    arch = _arch_for_checkpoint(ckpt, args.arch)
    cfg = ep.EvalConfig(depth_cap=args.cap, protocol=args.protocol)
    ds = load_dataset(args.data)
    agg, per_image = ep.evaluate_model(theta, arch, ds, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    ep.write_report_json(agg, out / "report.json", protocol=cfg.protocol, depth_cap=cfg.depth_cap,
                         checkpoint_sha256=_file_hash(ckpt), dataset_hash=read_manifest(args.data).content_hash)
    ep.write_per_image_csv(per_image, [f"{s.scene_id}_{s.view_id}" for s in ds.samples], out / "per_image.csv")
    print(" ".join(f"{k}={v:.4f}" for k, v in agg.metrics().items()))
    return EXIT_OK


def cmd_compare(args) -> int:
    res = compare_runs(args.runs, args.out, baseline=args.baseline)
    print((Path(args.out) / "compare.md").read_text(), end="")
    if res["grid"]:
        above = sum(g["above_reference"] for g in res["grid"])
        print(f"grid: {above}/{len(res['grid'])} points above {res['baseline']}")
    return EXIT_OK


def cmd_export_pointcloud(args) -> int:
    m = read_manifest(args.data)
    if not 0 <= args.index < len(m.samples):
        raise UsageError(f"index {args.index} out of range for {len(m.samples)} samples")
    ds = load_dataset(args.data)
    sample = ds.samples[args.index]
    entry = m.samples[args.index]
    h, w = sample.depth.shape[1:]
    intr = ep.CameraIntrinsics(**entry["intrinsics"]) if "intrinsics" in entry else \
        ep.CameraIntrinsics.from_fov(w, h, HFOV_DEG)
    cfg = ep.EvalConfig(depth_cap=args.cap)
    if args.checkpoint:
        ckpt = Path(args.checkpoint)
        if not ckpt.exists():
            raise FileNotFoundError(f"checkpoint {ckpt} not found")
        arch = _arch_for_checkpoint(ckpt, args.arch)
        depth = predict(sample.image[None], load_params(ckpt), arch)[0, 0].astype(np.float64)
        mask = (depth >= cfg.min_depth) & (depth <= cfg.depth_cap)
    else:
        depth = sample.depth[0].astype(np.float64)
        mask = ep.valid_mask(depth, cfg)
    pts, cols = ep.backproject(depth, sample.image, intr, mask)
    ep.write_ply(args.out, pts, cols)
    print(f"{args.out}: {len(pts)} vertices")
    return EXIT_OK


def _positive_int(s: str) -> int:
    v = int(s)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metadepth", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic RGB-D dataset")
    g.add_argument("--variety", choices=("low", "high"), required=True)
    g.add_argument("--scenes", type=_positive_int, required=True)
    g.add_argument("--views", type=_positive_int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--resolution", type=_positive_int, default=64, help="square image size (default 64)")
    g.add_argument("--name", default=None)
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="run a JSON experiment recipe")
    t.add_argument("recipe")
    t.add_argument("--output", default=None, help="override the recipe's output directory")
    t.add_argument("--seeds", default=None, help="comma-separated seeds overriding the recipe")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("evaluate", help="evaluate a checkpoint on a dataset")
    e.add_argument("checkpoint")
    e.add_argument("data")
    e.add_argument("--protocol", default="intra", choices=("intra", "zero_shot", "zero_shot_median_scaled"))
    e.add_argument("--cap", type=float, default=10.0)
    e.add_argument("--arch", default=None, help="arch.json (default: next to the checkpoint)")
    e.add_argument("--out", default="eval")
    e.set_defaults(func=cmd_evaluate)

    c = sub.add_parser("compare", help="tabulate finished runs and overlay their loss curves")
    c.add_argument("runs", nargs="+")
    c.add_argument("--out", default="compare")
    c.add_argument("--baseline", default=None, help="run name used as the improvement reference")
    c.set_defaults(func=cmd_compare)

    x = sub.add_parser("export-pointcloud", help="back-project a depth map to an ASCII PLY")
    x.add_argument("data")
    x.add_argument("--index", type=int, default=0)
    x.add_argument("--checkpoint", default=None, help="use the predicted depth instead of ground truth")
    x.add_argument("--arch", default=None)
    x.add_argument("--cap", type=float, default=10.0)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_pointcloud)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"metadepth: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except mo.TrainingDivergence as exc:
        print(f"metadepth: training diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, CheckpointError, json.JSONDecodeError) as exc:
        print(f"metadepth: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except FloatingPointError as exc:
        print(f"metadepth: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
