"""SGD training for the proposal and false-positive-reduction stages."""
from __future__ import annotations

import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .data import REORIENT, Volume, patch_extract, reorient, shift_augment
from .evaluation import hit_match
from .boxes import DetectionBox
from .inference import mlsc_crop
from .losses import RPN_FOCAL, FPR_FOCAL, FocalParams, assign_anchors, detection_loss, focal_loss_logits
from .nn import Module
from .tensor import Tensor, no_grad

RPN_MILESTONES = ((50, 0.001), (100, 0.0005), (150, 0.0001))


class NumericalError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


class SGD:
    """Momentum SGD with L2 weight decay folded into the gradient."""

    def __init__(self, params, momentum: float = 0.9, weight_decay: float = 1e-4):
        self.params = list(params)
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.velocity = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.zero_grad()

    def step(self, lr: float):
        if lr == 0:
            return
        for p, v in zip(self.params, self.velocity):
            g = p.grad + self.weight_decay * p.data if self.weight_decay else p.grad
            v *= self.momentum
            v += g
            p.data -= (lr * v).astype(p.dtype, copy=False)


def step_schedule(base_lr: float, milestones: Sequence[tuple[int, float]] = ()) -> Callable[[int], float]:
    """lr(epoch): ``base_lr`` until the first milestone epoch, then each milestone's lr."""
    ms = sorted((int(e), float(lr)) for e, lr in milestones)

    def lr_at(epoch: int) -> float:
        lr = base_lr
        for e, v in ms:
            if epoch >= e:
                lr = v
        return lr

    return lr_at


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 7
    steps_per_epoch: int = 10
    lr: float = 0.01
    milestones: tuple[tuple[int, float], ...] = RPN_MILESTONES
    momentum: float = 0.9
    weight_decay: float = 1e-4
    seed: int = 0
    ohem_n: int = 2
    focal_gamma: float = 2.0
    focal_alpha: float = 0.5
    p_nodule: float = 0.7
    augment: bool = True
    val_batches: int = 2
    grad_clip: float = 0.0  # global-norm clip, 0 disables

    def __post_init__(self):
        self.milestones = tuple(tuple(m) for m in self.milestones)
        if self.epochs < 0 or self.batch_size < 1 or self.steps_per_epoch < 1:
            raise ValueError("epochs >= 0, batch_size >= 1 and steps_per_epoch >= 1 required")
        if self.lr < 0:
            raise ValueError("lr must be non-negative")

    @property
    def focal(self) -> FocalParams:
        return FocalParams(self.focal_gamma, self.focal_alpha)

    def to_dict(self) -> dict:
        return asdict(self)


def rpn_train_config(**kw) -> TrainConfig:
    return TrainConfig(**{"batch_size": 7, "milestones": RPN_MILESTONES, **kw})


def fpr_train_config(**kw) -> TrainConfig:
    return TrainConfig(
        **{"batch_size": 64, "milestones": (), "focal_gamma": FPR_FOCAL.gamma, "focal_alpha": FPR_FOCAL.alpha, **kw}
    )


@dataclass
class TrainResult:
    history: list[dict] = field(default_factory=list)
    best_state: dict | None = None
    best_epoch: int = -1
    best_loss: float = math.inf
    losses: list[float] = field(default_factory=list)  # per step


# -- batches -------------------------------------------------------------------
def rpn_batch(model, volumes: Sequence[Volume], cfg: TrainConfig, rng: np.random.Generator):
    """Random patches (nodule-centred with probability ``p_nodule``) and their anchor labels."""
    rc = model.config
    grid = (rc.grid,) * 3
    anchors = rc.anchors.generate(grid).reshape(-1, 4)
    xs, asg = [], []
    for _ in range(cfg.batch_size):
        vol = volumes[int(rng.integers(len(volumes)))]
        if cfg.augment:
            vol = reorient(vol, tuple(REORIENT)[int(rng.integers(3))])
        p = patch_extract(vol, rc.patch, "train", n=1, p_nodule=cfg.p_nodule, rng=rng)[0]
        xs.append(p.data)
        asg.append(assign_anchors(anchors, p.annotations))
    return Tensor(np.stack(xs)[:, None].astype(np.float32)), asg


def rpn_loss(model, batch, cfg: TrainConfig):
    x, asg = batch
    cls, reg = model(x)
    return detection_loss(cls, reg, asg, cfg.focal, cfg.ohem_n)[0]


@dataclass
class FprSample:
    volume: int  # index into the volume list
    center: np.ndarray
    label: int


def fpr_samples_from_candidates(volumes: Sequence[Volume], candidates: Sequence[Sequence[DetectionBox]], positives_per_gt: int = 1):
    """Label RPN candidates by the centre-in-radius rule; every ground truth is
    also added as a positive so each nodule is represented."""
    samples = []
    for i, (vol, cands) in enumerate(zip(volumes, candidates)):
        m = hit_match(list(cands), vol.annotations)
        for b, status in zip(cands, m.status):
            samples.append(FprSample(i, b.center, int(status == "TP")))
        for row in vol.annotations:
            for _ in range(positives_per_gt):
                samples.append(FprSample(i, row[:3].copy(), 1))
    return samples


def fpr_batch(model, volumes: Sequence[Volume], samples: Sequence[FprSample], cfg: TrainConfig, rng, balanced=True):
    """Crops around sampled candidates with 1-voxel shift and reorientation augmentation."""
    fc = model.config
    labels = np.array([s.label for s in samples])
    pos, neg = np.flatnonzero(labels == 1), np.flatnonzero(labels == 0)
    idx = []
    for _ in range(cfg.batch_size):
        if balanced and len(pos) and len(neg):
            pool = pos if rng.random() < 0.5 else neg
        else:
            pool = np.arange(len(samples))
        idx.append(int(pool[rng.integers(len(pool))]))
    crops, ys = [[], [], []], []
    for i in idx:
        s = samples[i]
        vol = volumes[s.volume].intensities
        center = s.center
        if cfg.augment:
            center = center + rng.integers(-1, 2, size=3)
        cs = mlsc_crop(vol, center, fc.crop_sizes, fc.target)
        if cfg.augment:
            perm = tuple(REORIENT.values())[int(rng.integers(3))]
            cs = [np.ascontiguousarray(c.transpose(perm)) for c in cs]
        for k in range(3):
            crops[k].append(cs[k])
        ys.append(s.label)
    return [Tensor(np.stack(c)[:, None].astype(np.float32)) for c in crops], np.array(ys, dtype=bool)


def fpr_loss(model, batch, cfg: TrainConfig):
    crops, y = batch
    logits = model(crops)
    return focal_loss_logits(logits.reshape((logits.shape[0],)), y, cfg.focal).mean()


# -- loop ----------------------------------------------------------------------
def _grad_norm(params) -> float:
    return float(np.sqrt(sum(float((p.grad.astype(np.float64) ** 2).sum()) for p in params)))


def train_loop(
    stage: str,
    model: Module,
    data,
    config: TrainConfig,
    val_data=None,
    checkpoint: str | Path | None = None,
    log: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Run ``config.epochs`` epochs of SGD and keep the best-validation state.

    ``data`` is a list of preprocessed volumes for ``stage='rpn'`` and a
    ``(volumes, samples)`` pair for ``stage='fpr'``. Without validation data
    the mean training loss of the epoch selects the best state.
    """
    if stage not in ("rpn", "fpr"):
        raise ValueError(f"unknown stage {stage!r}")
    rng = np.random.default_rng(config.seed)
    if stage == "rpn":
        make_batch = lambda r: rpn_batch(model, data, config, r)  # noqa: E731
        loss_fn = rpn_loss
        val_make = (lambda r: rpn_batch(model, val_data, config, r)) if val_data else None  # noqa: E731
    else:
        vols, samples = data
        make_batch = lambda r: fpr_batch(model, vols, samples, config, r)  # noqa: E731
        loss_fn = fpr_loss
        if val_data:
            vvols, vsamples = val_data
            val_make = lambda r: fpr_batch(model, vvols, vsamples, config, r)  # noqa: E731
        else:
            val_make = None
    lr_at = step_schedule(config.lr, config.milestones)
    opt = SGD(model.parameters(), config.momentum, config.weight_decay)
    result = TrainResult()
    step = 0
    for epoch in range(config.epochs):
        model.train()
        lr = lr_at(epoch)
        t0 = time.perf_counter()
        epoch_losses = []
        for _ in range(config.steps_per_epoch):
            batch = make_batch(rng)
            opt.zero_grad()
            loss = loss_fn(model, batch, config)
            value = float(loss.data)
            if not math.isfinite(value):
                raise NumericalError(
                    f"{stage}: non-finite loss {value} at epoch {epoch} step {step} (lr={lr}); "
                    f"last finite losses {result.losses[-5:]}"
                )
            loss.backward()
            gnorm = _grad_norm(opt.params)
            if not math.isfinite(gnorm):
                raise NumericalError(f"{stage}: non-finite gradient norm at epoch {epoch} step {step}")
            if config.grad_clip and gnorm > config.grad_clip:
                for p in opt.params:
                    p.grad *= config.grad_clip / gnorm
            opt.step(lr)
            epoch_losses.append(value)
            result.losses.append(value)
            step += 1
        train_loss = float(np.mean(epoch_losses))
        val_loss = None
        if val_make is not None:
            model.eval()
            vr = np.random.default_rng(config.seed + 1)
            with no_grad():
                val_loss = float(np.mean([float(loss_fn(model, val_make(vr), config).data) for _ in range(config.val_batches)]))
            model.train()
        score = val_loss if val_loss is not None else train_loss
        rec = {
            "epoch": epoch,
            "lr": lr,
            "train_loss": train_loss,
            "val_loss": val_loss,
            "seconds": time.perf_counter() - t0,
        }
        result.history.append(rec)
        if log:
            log(rec)
        if score < result.best_loss:
            result.best_loss, result.best_epoch = score, epoch
            result.best_state = model.state_dict()
    if result.best_state is None:
        result.best_state = model.state_dict()
    if checkpoint is not None:
        from .checkpoint import save_tensors

        save_tensors(checkpoint, result.best_state)
    return result
