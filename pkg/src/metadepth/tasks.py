"""Fine-grained tasks: one sampled mini-batch of RGB-D pairs per task."""
from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class RgbdSample:
    image: np.ndarray  # (3, H, W) in [0, 1]
    depth: np.ndarray  # (1, H, W) meters, 0 = invalid
    scene_id: str = ""
    view_id: str = ""

    def __post_init__(self):
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise DataError(f"image must be (3, H, W), got {self.image.shape}")
        if self.depth.shape != (1,) + self.image.shape[1:]:
            raise DataError(f"depth shape {self.depth.shape} does not match image {self.image.shape}")
        if not np.all(np.isfinite(self.depth)):
            raise DataError("depth contains non-finite values")


class Dataset:
    """Read-only stack of RGB-D samples."""

    def __init__(self, samples: Sequence[RgbdSample], name: str = ""):
        self.samples = list(samples)
        self.name = name
        if self.samples:
            self.images = np.stack([s.image for s in self.samples]).astype(np.float32)
            self.depths = np.stack([s.depth for s in self.samples]).astype(np.float32)
        else:
            self.images = np.zeros((0, 3, 1, 1), np.float32)
            self.depths = np.zeros((0, 1, 1, 1), np.float32)
        self.images.flags.writeable = False
        self.depths.flags.writeable = False
        self.scene_ids = [s.scene_id for s in self.samples]

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def resolution(self) -> tuple:
        return tuple(self.images.shape[2:])

    def subset(self, indices) -> "Dataset":
        return Dataset([self.samples[i] for i in indices], name=self.name)

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(self.images.tobytes())
        h.update(self.depths.tobytes())
        return h.hexdigest()


class RngStream:
    """Counter-addressed random stream: ``(seed, path)`` fixes the sequence.

    ``child(k)`` derives an independent sub-stream, so consumers can be
    given disjoint streams without having to agree on draw order.
    """

    def __init__(self, seed: int, path: tuple = ()):
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._gen: Optional[np.random.Generator] = None

    @property
    def generator(self) -> np.random.Generator:
        if self._gen is None:
            ss = np.random.SeedSequence(self.seed, spawn_key=self.path)
            self._gen = np.random.Generator(np.random.PCG64(ss))
        return self._gen

    def child(self, k: int) -> "RngStream":
        return RngStream(self.seed, self.path + (k,))

    def reset(self) -> "RngStream":
        return RngStream(self.seed, self.path)

    def __repr__(self) -> str:
        return f"RngStream(seed={self.seed}, path={self.path})"


@dataclass
class FineGrainedTask:
    indices: np.ndarray
    images: np.ndarray  # (K, 3, H, W)
    depths: np.ndarray  # (K, 1, H, W)
    task_id: int = 0

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def mask(self) -> np.ndarray:
        return self.depths > 0

    def replace(self, images=None, depths=None) -> "FineGrainedTask":
        return FineGrainedTask(
            self.indices,
            self.images if images is None else images,
            self.depths if depths is None else depths,
            self.task_id,
        )

    def split(self) -> tuple:
        """First half / second half (identical halves when K == 1)."""
        k = len(self)
        if k < 2:
            return self, self
        h = k // 2
        first = FineGrainedTask(self.indices[:h], self.images[:h], self.depths[:h], self.task_id)
        second = FineGrainedTask(self.indices[h:], self.images[h:], self.depths[h:], self.task_id)
        return first, second


def sample_task(dataset: Dataset, K: int, rng: RngStream, task_id: int = 0) -> FineGrainedTask:
    """K uniform draws, with replacement, from the whole dataset."""
    if len(dataset) == 0:
        raise DataError("cannot sample a task from an empty dataset")
    if K < 1:
        raise ValueError("K must be >= 1")
    idx = rng.generator.integers(0, len(dataset), size=K)
    return FineGrainedTask(idx, dataset.images[idx], dataset.depths[idx], task_id)


def sample_task_pair(dataset: Dataset, K: int, rng: RngStream, task_id: int = 0) -> tuple:
    return (
        sample_task(dataset, K, rng.child(0), task_id),
        sample_task(dataset, K, rng.child(1), task_id),
    )


# ---------------------------------------------------------------------------
# online augmentation

JITTER_RANGE = (0.8, 1.2)
HUE_RANGE = (-0.05, 0.05)


@dataclass
class AugParams:
    """Per-sample augmentation draws; the defaults are the identity."""

    flip: np.ndarray = field(default_factory=lambda: np.zeros(0, bool))
    brightness: Optional[np.ndarray] = None
    contrast: Optional[np.ndarray] = None
    saturation: Optional[np.ndarray] = None
    hue: Optional[np.ndarray] = None

    @classmethod
    def identity(cls, k: int) -> "AugParams":
        one = np.ones(k)
        return cls(np.zeros(k, bool), one, one.copy(), one.copy(), np.zeros(k))


def draw_aug_params(k: int, rng: RngStream, flip_only: bool = False) -> AugParams:
    g = rng.generator
    flip = g.random(k) < 0.5
    if flip_only:
        return AugParams(flip=flip)
    lo, hi = JITTER_RANGE
    return AugParams(
        flip=flip,
        brightness=g.uniform(lo, hi, k),
        contrast=g.uniform(lo, hi, k),
        saturation=g.uniform(lo, hi, k),
        hue=g.uniform(*HUE_RANGE, k),
    )


def _gray(img: np.ndarray) -> np.ndarray:
    return 0.299 * img[0] + 0.587 * img[1] + 0.114 * img[2]


def rgb_to_hsv(rgb: np.ndarray) -> np.ndarray:
    """(3, ...) RGB in [0, 1] -> (3, ...) HSV with hue in [0, 1)."""
    r, g, b = rgb
    mx = rgb.max(axis=0)
    mn = rgb.min(axis=0)
    delta = mx - mn
    safe = np.where(delta > 0, delta, 1)
    h = np.where(mx == r, ((g - b) / safe) % 6, np.where(mx == g, (b - r) / safe + 2, (r - g) / safe + 4))
    h = np.where(delta > 0, h / 6, 0.0)
    s = np.where(mx > 0, delta / np.where(mx > 0, mx, 1), 0.0)
    return np.stack([h, s, mx])


def hsv_to_rgb(hsv: np.ndarray) -> np.ndarray:
    h, s, v = hsv
    i = np.floor(h * 6) % 6
    f = h * 6 - np.floor(h * 6)
    p, q, t = v * (1 - s), v * (1 - f * s), v * (1 - (1 - f) * s)
    choices = [(v, t, p), (q, v, p), (p, v, t), (p, q, v), (t, p, v), (v, p, q)]
    out = np.zeros_like(hsv)
    for k, (rr, gg, bb) in enumerate(choices):
        sel = i == k
        out[0] = np.where(sel, rr, out[0])
        out[1] = np.where(sel, gg, out[1])
        out[2] = np.where(sel, bb, out[2])
    return out


def jitter_image(img: np.ndarray, brightness: float, contrast: float, saturation: float, hue: float) -> np.ndarray:
    """Brightness, contrast, saturation, hue in that order; clamped to [0, 1]."""
    x = img
    if brightness != 1:
        x = np.clip(x * brightness, 0, 1)
    if contrast != 1:
        x = np.clip(contrast * x + (1 - contrast) * _gray(x).mean(), 0, 1)
    if saturation != 1:
        x = np.clip(saturation * x + (1 - saturation) * _gray(x)[None], 0, 1)
    if hue != 0:
        hsv = rgb_to_hsv(x)
        hsv[0] = (hsv[0] + hue) % 1.0
        x = np.clip(hsv_to_rgb(hsv), 0, 1)
    return x.astype(img.dtype, copy=False)


def apply_augment(task: FineGrainedTask, params: AugParams) -> FineGrainedTask:
    images = np.array(task.images)
    depths = np.array(task.depths)
    for k in range(len(task)):
        if params.brightness is not None:
            images[k] = jitter_image(
                images[k], params.brightness[k], params.contrast[k], params.saturation[k], params.hue[k]
            )
        if params.flip[k]:
            images[k] = images[k][..., ::-1]
            depths[k] = depths[k][..., ::-1]
    return task.replace(images=images, depths=depths)


def online_augment(task: FineGrainedTask, rng: RngStream, flip_only: bool = False) -> FineGrainedTask:
    """Independent per-sample flip (image and depth together) and color jitter (image only)."""
    return apply_augment(task, draw_aug_params(len(task), rng, flip_only=flip_only))
