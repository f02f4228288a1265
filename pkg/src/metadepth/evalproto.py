"""Depth metrics, median-scaled zero-shot protocol and point-cloud export."""
from __future__ import annotations

import csv
import json
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

import numpy as np

METRIC_NAMES = ("mae", "absrel", "rmse", "silog", "delta1", "delta2", "delta3")
PROTOCOLS = ("intra", "zero_shot_median_scaled")


class EmptyEvaluation(ValueError):
    """No pixel survived the validity mask."""


class ProtocolError(ValueError):
    pass


@dataclass(frozen=True)
class EvalConfig:
    depth_cap: float = 10.0
    protocol: str = "intra"
    min_depth: float = 1e-3

    def __post_init__(self):
        if self.protocol == "zero_shot":
            object.__setattr__(self, "protocol", "zero_shot_median_scaled")
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if not 0 < self.min_depth < self.depth_cap:
            raise ValueError("need 0 < min_depth < depth_cap")


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    @classmethod
    def from_fov(cls, width: int, height: int, hfov_deg: float) -> "CameraIntrinsics":
        f = 0.5 * width / np.tan(np.radians(hfov_deg) / 2)
        return cls(f, f, (width - 1) / 2, (height - 1) / 2)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MetricsReport:
    mae: float
    absrel: float
    rmse: float
    silog: float
    delta1: float
    delta2: float
    delta3: float
    valid_pixels: int
    scale_ratio: float = 1.0
    skipped: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def metrics(self) -> dict:
        return {k: getattr(self, k) for k in METRIC_NAMES}


def _arr(x) -> np.ndarray:
    return np.asarray(getattr(x, "data", x), dtype=np.float64)


def valid_mask(gt: np.ndarray, cfg: EvalConfig) -> np.ndarray:
    return (gt >= cfg.min_depth) & (gt <= cfg.depth_cap)


def compute_metrics(pred, gt, cfg: EvalConfig = EvalConfig(), scale_ratio: float = 1.0) -> MetricsReport:
    p, g = _arr(pred), _arr(gt)
    if p.shape != g.shape:
        raise ValueError(f"prediction {p.shape} and ground truth {g.shape} differ")
    m = valid_mask(g, cfg)
    if not m.any():
        raise EmptyEvaluation("no valid ground-truth pixel")
    p, g = p[m], g[m]
    if np.any(p <= 0):
        raise ValueError("predictions must be positive on evaluated pixels")
    err = p - g
    d = np.log(p) - np.log(g)
    ratio = np.maximum(p / g, g / p)
    return MetricsReport(
        mae=float(np.mean(np.abs(err))),
        absrel=float(np.mean(np.abs(err) / g)),
        rmse=float(np.sqrt(np.mean(err ** 2))),
        silog=float(np.sqrt(max(np.mean(d ** 2) - np.mean(d) ** 2, 0.0))),
        delta1=float(100 * np.mean(ratio < 1.25)),
        delta2=float(100 * np.mean(ratio < 1.25 ** 2)),
        delta3=float(100 * np.mean(ratio < 1.25 ** 3)),
        valid_pixels=int(m.sum()),
        scale_ratio=float(scale_ratio),
    )


def median_scale(pred, gt, cfg: EvalConfig = EvalConfig()) -> tuple:
    """Multiply ``pred`` by median(gt) / median(pred), medians over valid pixels."""
    p, g = _arr(pred), _arr(gt)
    m = valid_mask(g, cfg)
    if not m.any():
        raise EmptyEvaluation("no valid ground-truth pixel")
    mp = np.median(p[m])
    if not mp > 0:
        raise ProtocolError("median prediction is not positive")
    ratio = float(np.median(g[m]) / mp)
    return p * ratio, ratio


def evaluate_pair(pred, gt, cfg: EvalConfig) -> MetricsReport:
    """Protocol-level evaluation of one image; predictions are floored at ``min_depth``."""
    pred = np.maximum(_arr(pred), cfg.min_depth)
    if cfg.protocol == "zero_shot_median_scaled":
        scaled, ratio = median_scale(pred, gt, cfg)
        return compute_metrics(scaled, gt, cfg, scale_ratio=ratio)
    return compute_metrics(pred, gt, cfg)


def aggregate(reports: list, skipped: int = 0) -> MetricsReport:
    """Equal-weight mean over images."""
    if not reports:
        raise EmptyEvaluation("every image was empty")
    mean = {k: float(np.mean([getattr(r, k) for r in reports])) for k in METRIC_NAMES}
    return MetricsReport(
        **mean,
        valid_pixels=int(sum(r.valid_pixels for r in reports)),
        scale_ratio=float(np.mean([r.scale_ratio for r in reports])),
        skipped=skipped,
    )


def evaluate_predictions(preds: np.ndarray, gts: np.ndarray, cfg: EvalConfig) -> tuple:
    reports, per_image, skipped = [], [], 0
    for i in range(len(preds)):
        try:
            r = evaluate_pair(preds[i], gts[i], cfg)
        except EmptyEvaluation:
            skipped += 1
            per_image.append(None)
            continue
        reports.append(r)
        per_image.append(r)
    return aggregate(reports, skipped), per_image


def evaluate_model(theta, arch, dataset, cfg: EvalConfig, batch_size: int = 32) -> tuple:
    """Returns ``(aggregate report, per-image reports)``; None marks a skipped image."""
    from .model import predict

    preds = predict(dataset.images, theta, arch, batch_size=batch_size)
    return evaluate_predictions(preds, dataset.depths, cfg)


def improvement(new: float, base: float) -> float:
    """Relative change ``(new - base) / base``."""
    return (new - base) / base


def write_per_image_csv(per_image: list, image_ids: list, path) -> None:
    cols = ["image_id", *METRIC_NAMES, "valid_pixels", "scale_ratio"]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(cols)
        for iid, r in zip(image_ids, per_image):
            if r is None:
                w.writerow([iid] + [""] * (len(cols) - 1))
            else:
                w.writerow([iid] + [repr(getattr(r, k)) for k in cols[1:]])


def write_report_json(report: MetricsReport, path, **extra) -> None:
    Path(path).write_text(json.dumps({**report.to_dict(), **extra}, indent=2, sort_keys=True))


# ---------------------------------------------------------------------------
# back-projection


def backproject(depth, image: Optional[np.ndarray], intr: CameraIntrinsics, mask: Optional[np.ndarray] = None):
    """Camera-frame points (x right, y down, z forward) and their RGB colors."""
    d = _arr(depth)
    d = d.reshape(d.shape[-2:])
    h, w = d.shape
    v, u = np.mgrid[0:h, 0:w]
    valid = (d > 0) & np.isfinite(d) if mask is None else mask.reshape(h, w)
    z = d[valid]
    pts = np.stack([(u[valid] - intr.cx) * z / intr.fx, (v[valid] - intr.cy) * z / intr.fy, z], axis=1)
    if image is None:
        colors = np.full((len(z), 3), 255, np.uint8)
    else:
        img = np.asarray(image)
        colors = np.clip(np.round(img[:, valid].T * 255), 0, 255).astype(np.uint8)
    return pts, colors


def write_ply(path, points: np.ndarray, colors: np.ndarray) -> None:
    lines = [
        "ply", "format ascii 1.0", f"element vertex {len(points)}",
        "property float x", "property float y", "property float z",
        "property uchar red", "property uchar green", "property uchar blue", "end_header",
    ]
    for (x, y, z), (r, g, b) in zip(points, colors):
        lines.append(f"{x:.6f} {y:.6f} {z:.6f} {r} {g} {b}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_ply_vertex_count(path) -> int:
    with open(path) as fh:
        for line in fh:
            if line.startswith("element vertex"):
                return int(line.split()[2])
            if line.strip() == "end_header":
                break
    raise ValueError(f"{path}: no vertex element")
