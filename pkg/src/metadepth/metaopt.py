"""Dual-loop meta-initialization (Reptile over fine-grained tasks) and baselines.

Random streams are addressed per meta-iteration ``g`` (global, across
epochs) as ``RngStream(seed).child(g)`` with fixed sub-stream slots, so the
plain-SGD drivers draw exactly the batches the meta-learner would:

* ``.child(0)`` task B            * ``.child(1)`` task B'
* ``.child(2)`` augmentation coin * ``.child(3)`` mix-up / shuffle draws
* ``.child(4).child(i)`` online augmentation at inner step i
"""
from __future__ import annotations

import csv
import math
import time
from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Callable, Optional

import numpy as np

from . import diffcore as dc
from .evalproto import EvalConfig, evaluate_model
from .model import (
    AlignmentError, ArchConfig, Bottleneck, ParamVector, axpy_interpolate, decode, encode, forward, sgd_step,
    value_and_grad,
)
from .tasks import Dataset, FineGrainedTask, RngStream, online_augment, sample_task

DIVERGENCE_LIMIT = 1e6

TASK, TASK_B2, AUG_COIN, AUG_DRAW, ONLINE = range(5)


class TrainingDivergence(FloatingPointError):
    def __init__(self, iteration: int, loss: float, where: str = ""):
        super().__init__(f"loss {loss!r} at iteration {iteration}{' (' + where + ')' if where else ''}")
        self.iteration = iteration
        self.loss = loss


@dataclass(frozen=True)
class MetaConfig:
    N: int = 5
    T: Optional[int] = None
    L: int = 4
    K: int = 32
    alpha: float = 1e-3
    beta: float = 0.5
    use_online_aug: bool = True
    use_mixup: bool = True
    use_channel_shuffle: bool = True
    keep_prob: float = 0.95
    beta_dist: tuple = (0.5, 0.5)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "beta_dist", tuple(self.beta_dist))
        if self.L < 1 or self.K < 1:
            raise ValueError("L and K must be >= 1")
        if self.N < 0:
            raise ValueError("N must be >= 0")
        if not self.alpha >= 0:
            raise ValueError("alpha must be non-negative")
        if not 0 <= self.beta <= 1:
            raise ValueError("beta must lie in [0, 1]")
        if not 0 <= self.keep_prob <= 1:
            raise ValueError("keep_prob must lie in [0, 1]")

    def iterations_per_epoch(self, n_samples: int) -> int:
        return self.T if self.T is not None else max(n_samples // self.K, 1)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)
    epoch_seconds: list = field(default_factory=list)
    val_rmse: list = field(default_factory=list)
    diverged: Optional[dict] = None

    COLUMNS = ("iteration", "epoch", "loss", "aug_choice", "lr", "grad_evals", "task")

    def add(self, **row) -> None:
        self.rows.append(row)

    @property
    def losses(self) -> np.ndarray:
        return np.array([r["loss"] for r in self.rows], dtype=np.float64)

    def smoothed_final_loss(self, frac: float = 0.2) -> float:
        """Mean of the last ``frac`` of logged losses; inf after a divergence."""
        if self.diverged is not None:
            return math.inf
        x = self.losses
        if len(x) == 0:
            return math.nan
        n = max(int(len(x) * frac), 1)
        return float(np.mean(x[-n:]))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(self.COLUMNS)
            for r in self.rows:
                w.writerow([
                    r["iteration"], r["epoch"], repr(float(r["loss"])), r.get("aug_choice", "none"),
                    repr(float(r["lr"])), r.get("grad_evals", 1), r.get("task", ""),
                ])

    @classmethod
    def from_csv(cls, path) -> "TrainLog":
        log = cls()
        with open(path, newline="") as fh:
            for r in csv.DictReader(fh):
                log.add(iteration=int(r["iteration"]), epoch=int(r["epoch"]), loss=float(r["loss"]),
                        aug_choice=r["aug_choice"], lr=float(r["lr"]), grad_evals=int(r["grad_evals"]),
                        task=r.get("task", ""))
        return log


# ---------------------------------------------------------------------------
# single steps


def task_loss(params, images: np.ndarray, depths: np.ndarray, arch: ArchConfig, mask=None) -> dc.Tensor:
    pred = forward(images, params, arch)
    return dc.l2_loss(pred, depths, depths > 0 if mask is None else mask, per_sample=True)


def _check(loss: float, iteration: int, where: str) -> None:
    if not math.isfinite(loss) or loss > DIVERGENCE_LIMIT:
        raise TrainingDivergence(iteration, loss, where)


def plain_step(theta: ParamVector, task: FineGrainedTask, lr: float, arch: ArchConfig,
               weight_decay: float = 0.0, iteration: int = 0) -> tuple:
    loss, g = value_and_grad(theta, lambda p: task_loss(p, task.images, task.depths, arch))
    _check(loss, iteration, "supervised step")
    return sgd_step(theta, g, lr, weight_decay), loss


def inner_loop(theta_meta: ParamVector, task: FineGrainedTask, cfg: MetaConfig, arch: ArchConfig,
               rng: Optional[RngStream] = None, iteration: int = 0) -> tuple:
    """L SGD steps at lr alpha from ``theta_meta``; returns (theta_L, per-step losses)."""
    theta = theta_meta
    losses = []
    for i in range(cfg.L):
        batch = online_augment(task, rng.child(i)) if (cfg.use_online_aug and rng is not None) else task
        loss, g = value_and_grad(theta, lambda p: task_loss(p, batch.images, batch.depths, arch))
        _check(loss, iteration, f"inner step {i}")
        losses.append(loss)
        theta = sgd_step(theta, g, cfg.alpha)
    return theta, losses


def draw_mixup_lambdas(k: int, cfg: MetaConfig, rng: RngStream) -> np.ndarray:
    return rng.generator.beta(*cfg.beta_dist, size=k)


def draw_shuffle_mask(p: int, cfg: MetaConfig, rng: RngStream) -> np.ndarray:
    """Per-channel keep mask (1 keeps B's channel), shared across the batch."""
    return (rng.generator.random(p) < cfg.keep_prob).astype(np.float64)


def _check_pair(B: FineGrainedTask, B2: FineGrainedTask) -> None:
    if len(B) != len(B2) or B.images.shape != B2.images.shape:
        raise AlignmentError(f"task shapes differ: {B.images.shape} vs {B2.images.shape}")


def mixup_loss(params, B: FineGrainedTask, B2: FineGrainedTask, lam: np.ndarray, arch: ArchConfig) -> dc.Tensor:
    """Blend encoder outputs and depth targets of B and B' with the same per-sample lambda."""
    fa, fb = encode(B.images, params, arch), encode(B2.images, params, arch)
    w = lam.reshape(-1, 1, 1, 1)
    phi = Bottleneck(
        dc.blend(fa.features, fb.features, w),
        [dc.blend(sa, sb, w) for sa, sb in zip(fa.skip_features, fb.skip_features)],
    )
    pred = decode(phi, params, arch)
    target = (w * B.depths + (1 - w) * B2.depths).astype(B.depths.dtype)
    ma, mb = B.depths > 0, B2.depths > 0
    mask = np.where(w == 1, ma, np.where(w == 0, mb, ma & mb))
    # exact endpoints keep the lambda = 0 / 1 cases identical to a plain step
    target = np.where(w == 1, B.depths, np.where(w == 0, B2.depths, target))
    return dc.l2_loss(pred, target, mask, per_sample=True)


def channel_shuffle_loss(params, B: FineGrainedTask, B2: FineGrainedTask, keep: np.ndarray,
                         arch: ArchConfig) -> dc.Tensor:
    """Swap the dropped bottleneck channels of B for those of B'; supervise with B's depth."""
    fa, fb = encode(B.images, params, arch), encode(B2.images, params, arch)
    if keep.shape != (fa.features.shape[1],):
        raise AlignmentError(f"mask has {keep.shape} entries, bottleneck has {fa.features.shape[1]} channels")
    phi = Bottleneck(dc.blend(fa.features, fb.features, keep.reshape(1, -1, 1, 1)), fa.skip_features)
    pred = decode(phi, params, arch)
    return dc.l2_loss(pred, B.depths, B.depths > 0, per_sample=True)


def mixup_step(theta: ParamVector, B: FineGrainedTask, B2: FineGrainedTask, cfg: MetaConfig, arch: ArchConfig,
               rng: Optional[RngStream] = None, lam: Optional[np.ndarray] = None, iteration: int = 0) -> tuple:
    """One step at lr alpha on the mixed batch; returns (theta', loss, lambdas)."""
    _check_pair(B, B2)
    if lam is None:
        lam = draw_mixup_lambdas(len(B), cfg, rng)
    lam = np.asarray(lam, dtype=np.float64)
    loss, g = value_and_grad(theta, lambda p: mixup_loss(p, B, B2, lam, arch))
    _check(loss, iteration, "mix-up")
    return sgd_step(theta, g, cfg.alpha), loss, lam


def channel_shuffle_step(theta: ParamVector, B: FineGrainedTask, B2: FineGrainedTask, cfg: MetaConfig,
                         arch: ArchConfig, rng: Optional[RngStream] = None, keep: Optional[np.ndarray] = None,
                         iteration: int = 0) -> tuple:
    """One step at lr alpha on the channel-shuffled bottleneck; returns (theta', loss, keep mask)."""
    _check_pair(B, B2)
    if keep is None:
        keep = draw_shuffle_mask(arch.bottleneck_channels, cfg, rng)
    keep = np.asarray(keep, dtype=np.float64)
    loss, g = value_and_grad(theta, lambda p: channel_shuffle_loss(p, B, B2, keep, arch))
    _check(loss, iteration, "channel shuffle")
    return sgd_step(theta, g, cfg.alpha), loss, keep


def choose_augmentation(cfg: MetaConfig, rng: RngStream) -> str:
    if cfg.use_mixup and cfg.use_channel_shuffle:
        return "mixup" if rng.generator.random() < 0.5 else "channel_shuffle"
    if cfg.use_mixup:
        return "mixup"
    if cfg.use_channel_shuffle:
        return "channel_shuffle"
    return "none"


def task_augment(theta_L: ParamVector, B: FineGrainedTask, B2: Optional[FineGrainedTask], cfg: MetaConfig,
                 arch: ArchConfig, rng: RngStream, iteration: int = 0) -> tuple:
    """Mix-up or channel shuffle (fair coin when both are on); returns (theta_aug, choice, loss)."""
    choice = choose_augmentation(cfg, rng.child(AUG_COIN))
    if choice == "none":
        return theta_L, choice, None
    if choice == "mixup":
        theta, loss, _ = mixup_step(theta_L, B, B2, cfg, arch, rng.child(AUG_DRAW), iteration=iteration)
    else:
        theta, loss, _ = channel_shuffle_step(theta_L, B, B2, cfg, arch, rng.child(AUG_DRAW), iteration=iteration)
    return theta, choice, loss


def meta_update(theta_meta: ParamVector, theta_aug: ParamVector, beta: float) -> ParamVector:
    """Reptile move: ``theta_meta - beta * (theta_meta - theta_aug)``."""
    return axpy_interpolate(theta_meta, theta_aug, beta)


# ---------------------------------------------------------------------------
# drivers

Callback = Optional[Callable[[int, int, ParamVector], None]]


def meta_learn(dataset: Dataset, cfg: MetaConfig, theta_init: ParamVector, arch: ArchConfig,
               on_epoch: Callback = None) -> tuple:
    """First stage: N epochs x T meta-iterations; returns (theta_prior, TrainLog)."""
    root = RngStream(cfg.seed)
    T = cfg.iterations_per_epoch(len(dataset))
    theta = theta_init
    log = TrainLog()
    augmenting = cfg.use_mixup or cfg.use_channel_shuffle
    for epoch in range(cfg.N):
        t0 = time.perf_counter()
        for j in range(T):
            g = epoch * T + j
            it = root.child(g)
            B = sample_task(dataset, cfg.K, it.child(TASK), task_id=g)
            theta_L, losses = inner_loop(theta, B, cfg, arch, it.child(ONLINE), iteration=g)
            choice, evals = "none", cfg.L
            if augmenting:
                B2 = sample_task(dataset, cfg.K, it.child(TASK_B2), task_id=g)
                theta_aug, choice, _ = task_augment(theta_L, B, B2, cfg, arch, it, iteration=g)
                evals += choice != "none"
            else:
                theta_aug = theta_L
            theta = meta_update(theta, theta_aug, cfg.beta)
            log.add(iteration=g, epoch=epoch, loss=losses[0], aug_choice=choice, lr=cfg.alpha,
                    grad_evals=evals, task=" ".join(map(str, B.indices)))
        log.epoch_seconds.append(time.perf_counter() - t0)
        if on_epoch is not None:
            on_epoch(epoch, g, theta)
    return theta, log


def supervised_train(dataset: Dataset, theta_init: ParamVector, arch: ArchConfig, lr: float, max_epochs: int,
                     patience: Optional[int] = None, val_dataset: Optional[Dataset] = None, K: int = 32,
                     seed: int = 0, weight_decay: float = 0.0, augment: str = "flip",
                     eval_cfg: EvalConfig = EvalConfig(), T: Optional[int] = None) -> tuple:
    """Mini-batch SGD on the L2 loss; early stop on validation RMSE when a val set is given.

    ``augment`` is "flip" (left-right only) or "none". Returns the best
    parameters by validation RMSE (the final ones without validation).
    """
    root = RngStream(seed)
    T = T if T is not None else max(len(dataset) // K, 1)
    theta = theta_init
    best, best_rmse, stale = theta_init, math.inf, 0
    log = TrainLog()
    for epoch in range(max_epochs):
        t0 = time.perf_counter()
        for j in range(T):
            g = epoch * T + j
            it = root.child(g)
            batch = sample_task(dataset, K, it.child(TASK), task_id=g)
            if augment == "flip":
                batch = online_augment(batch, it.child(ONLINE).child(0), flip_only=True)
            theta, loss = plain_step(theta, batch, lr, arch, weight_decay, iteration=g)
            log.add(iteration=g, epoch=epoch, loss=loss, aug_choice=augment, lr=lr, grad_evals=1,
                    task=" ".join(map(str, batch.indices)))
        log.epoch_seconds.append(time.perf_counter() - t0)
        if val_dataset is not None:
            rmse = evaluate_model(theta, arch, val_dataset, eval_cfg)[0].rmse
            log.val_rmse.append(rmse)
            if rmse < best_rmse:
                best, best_rmse, stale = theta, rmse, 0
            else:
                stale += 1
                if patience is not None and stale >= patience:
                    break
    if val_dataset is None:
        best = theta
    return best, log


def sgd_train(dataset: Dataset, theta_init: ParamVector, arch: ArchConfig, lr: float, iterations: int,
              K: int, seed: int) -> ParamVector:
    """Un-augmented SGD drawing the same batches as :func:`meta_learn` with the same seed."""
    root = RngStream(seed)
    theta = theta_init
    for g in range(iterations):
        batch = sample_task(dataset, K, root.child(g).child(TASK), task_id=g)
        theta, _ = plain_step(theta, batch, lr, arch, iteration=g)
    return theta


def baseline_wd_pretrain(dataset: Dataset, theta_init: ParamVector, arch: ArchConfig, lr: float, wd: float,
                         epochs: int, K: int = 32, seed: int = 0, augment: str = "flip") -> ParamVector:
    """Prior learned by plain supervised training with a strong coupled weight decay."""
    theta, _ = supervised_train(dataset, theta_init, arch, lr, epochs, K=K, seed=seed,
                                weight_decay=wd, augment=augment)
    return theta


def baseline_grad_accum(dataset: Dataset, theta_init: ParamVector, arch: ArchConfig, cfg: MetaConfig,
                        base_lr: float, epochs: int, augment: str = "flip") -> ParamVector:
    """Average gradients over L consecutive batches, then step once at L * base_lr."""
    root = RngStream(cfg.seed)
    T = cfg.iterations_per_epoch(len(dataset))
    theta = theta_init
    g_idx = 0
    for _ in range(epochs * T // cfg.L):
        acc = None
        for _ in range(cfg.L):
            it = root.child(g_idx)
            batch = sample_task(dataset, cfg.K, it.child(TASK), task_id=g_idx)
            if augment == "flip":
                batch = online_augment(batch, it.child(ONLINE).child(0), flip_only=True)
            loss, g = value_and_grad(theta, lambda p: task_loss(p, batch.images, batch.depths, arch))
            _check(loss, g_idx, "gradient accumulation")
            acc = g if acc is None else ParamVector(OrderedDict((n, acc[n] + g[n]) for n in acc))
            g_idx += 1
        mean = acc.map(lambda _, a: (a / cfg.L).astype(a.dtype))
        theta = sgd_step(theta, mean, cfg.L * base_lr)
    return theta


def fomaml_meta_learn(dataset: Dataset, cfg: MetaConfig, theta_init: ParamVector, arch: ArchConfig,
                      split: str = "half") -> tuple:
    """First-order MAML on fine-grained tasks (for loss-curve comparison).

    Inner steps run on the support half, the meta-gradient is the query-half
    gradient at the adapted parameters, applied at lr beta. ``split="same"``
    uses the whole task for both. A divergence ends the run and is recorded
    in ``log.diverged`` instead of being raised.
    """
    root = RngStream(cfg.seed)
    T = cfg.iterations_per_epoch(len(dataset))
    theta = theta_init
    log = TrainLog()
    icfg = MetaConfig(N=cfg.N, L=cfg.L, K=cfg.K, alpha=cfg.alpha, beta=cfg.beta,
                      use_online_aug=cfg.use_online_aug, use_mixup=False, use_channel_shuffle=False, seed=cfg.seed)
    try:
        for epoch in range(cfg.N):
            t0 = time.perf_counter()
            for j in range(T):
                g = epoch * T + j
                it = root.child(g)
                B = sample_task(dataset, cfg.K, it.child(TASK), task_id=g)
                support, query = (B, B) if split == "same" else B.split()
                theta_L, losses = inner_loop(theta, support, icfg, arch, it.child(ONLINE), iteration=g)
                qloss, qg = value_and_grad(theta_L, lambda p: task_loss(p, query.images, query.depths, arch))
                _check(qloss, g, "query")
                theta = sgd_step(theta, qg, cfg.beta)
                log.add(iteration=g, epoch=epoch, loss=losses[0], aug_choice="none", lr=cfg.beta,
                        grad_evals=cfg.L + 1, task=" ".join(map(str, B.indices)))
            log.epoch_seconds.append(time.perf_counter() - t0)
    except TrainingDivergence as exc:
        log.diverged = {"iteration": exc.iteration, "loss": exc.loss}
    return theta, log
