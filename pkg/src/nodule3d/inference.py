"""Sliding-window proposal inference, orientation TTA, multi-scale crops and the
two-stage detection pipeline."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .anchors import AnchorSpec
from .boxes import (
    CANDIDATE_THRESHOLD,
    FINAL_THRESHOLD,
    NMS_IOU,
    TOP_K,
    DetectionBox,
    candidate_select_array,
    ensemble_scores,
    from_array,
)
from .data import crop, pad_to, reorient_array, restore_points, tile_origins
from .losses import decode_prediction
from .resize import resize_cubic3d
from .tensor import Tensor, no_grad

PLANES = ("axial", "coronal", "sagittal")
MAX_LOG_SCALE = 4.0  # clamp on the decoded log-diameter offset
DEFAULT_KEEP = 0.05


def _sigmoid(z: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(z))
    return np.where(z >= 0, 1 / (1 + e), e / (1 + e))


def decode_heads(cls_logits, reg, anchors: AnchorSpec, keep_threshold: float = DEFAULT_KEEP) -> np.ndarray:
    """(n, 5) boxes (z, y, x, d, p) in patch coordinates from one sample's heads.

    ``cls_logits`` is (A, g, g, g) and ``reg`` (4A, g, g, g).
    """
    cls_logits = np.asarray(cls_logits, dtype=np.float64)
    reg = np.asarray(reg, dtype=np.float64)
    A = cls_logits.shape[0]
    grid = cls_logits.shape[1:]
    p = _sigmoid(cls_logits).reshape(-1)
    keep = np.flatnonzero(p >= keep_threshold)
    if len(keep) == 0:
        return np.zeros((0, 5))
    an = anchors.generate(grid).reshape(-1, 4)[keep]
    t = reg.reshape(A, 4, -1).transpose(0, 2, 1).reshape(-1, 4)[keep]
    t[:, 3] = np.clip(t[:, 3], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    return np.column_stack([decode_prediction(t, an), p[keep]])


def run_rpn(model, patch: np.ndarray):
    """Eval-mode heads for one (P, P, P) patch, as numpy arrays."""
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            cls, reg = model(Tensor(patch[None, None].astype(np.float32)))
    finally:
        model.train(was_training)
    return cls.data[0], reg.data[0]


def sliding_window_array(
    model, volume: np.ndarray, patch: int = 128, overlap: int = 32, keep_threshold: float = DEFAULT_KEEP
) -> np.ndarray:
    """Tile, run, decode to global coordinates and keep each box only in the
    tile whose centre is nearest to it (first tile on ties)."""
    volume = np.asarray(volume)
    padded = pad_to(volume, patch)
    axes = [tile_origins(s, patch, overlap) for s in padded.shape]
    origins = np.array([(a, b, c) for a in axes[0] for b in axes[1] for c in axes[2]], dtype=np.float64)
    centres = origins + (patch - 1) / 2.0
    anchors = model.config.anchors
    found = []
    for t, origin in enumerate(origins):
        cls, reg = run_rpn(model, crop(padded, origin.astype(int), patch))
        boxes = decode_heads(cls, reg, anchors, keep_threshold)
        boxes[:, :3] += origin
        if len(origins) > 1 and len(boxes):
            d = np.linalg.norm(boxes[:, None, :3] - centres[None], axis=-1)
            boxes = boxes[np.argmin(d, axis=1) == t]
        found.append(boxes)
    return np.concatenate(found) if found else np.zeros((0, 5))


def sliding_window_infer(model, volume, patch: int = 128, overlap: int = 32, keep_threshold: float = DEFAULT_KEEP):
    if min(np.shape(volume)) < 1:
        raise ValueError("empty volume")
    return from_array(_valid(sliding_window_array(model, volume, patch, overlap, keep_threshold)))


def _valid(arr: np.ndarray) -> np.ndarray:
    arr = arr[arr[:, 3] > 0]
    arr[:, 4] = np.clip(arr[:, 4], 0.0, 1.0)
    return arr


def tta_array(model, volume: np.ndarray, patch=128, overlap=32, keep_threshold=DEFAULT_KEEP, planes=PLANES):
    """Pooled detections over the requested reorientations, mapped back to the
    original (z, y, x) frame. Returns the pooled array and per-plane counts."""
    pooled, counts = [], {}
    for plane in planes:
        boxes = sliding_window_array(model, reorient_array(volume, plane), patch, overlap, keep_threshold)
        boxes = restore_points(boxes, plane) if len(boxes) else boxes
        pooled.append(boxes)
        counts[plane] = len(boxes)
    return np.concatenate(pooled), counts


def tta_detect(model, volume, patch=128, overlap=32, keep_threshold=DEFAULT_KEEP) -> list[DetectionBox]:
    return from_array(_valid(tta_array(model, volume, patch, overlap, keep_threshold)[0]))


# -- multi-scale context crops -------------------------------------------
def crop_origin(center, size: int) -> np.ndarray:
    """Origin of the ``size`` cube centred on ``center`` (rounded to voxels)."""
    return np.floor(np.asarray(center, dtype=np.float64) - (size - 1) / 2.0 + 0.5).astype(int)


def mlsc_raw(volume: np.ndarray, center, sizes=(15, 25, 40)) -> list[np.ndarray]:
    return [crop(volume, crop_origin(center, s), s) for s in sizes]


def mlsc_crop(volume: np.ndarray, center, sizes=(15, 25, 40), target: int = 20) -> list[np.ndarray]:
    """Zero-padded cubes around ``center``, each resized to ``target``^3."""
    return [resize_cubic3d(c.astype(np.float32), target) for c in mlsc_raw(volume, center, sizes)]


def fpr_probabilities(model, volume: np.ndarray, centers, batch: int = 32) -> np.ndarray:
    """Eval-mode FPR probabilities for candidate centres."""
    from .models import fpr_forward

    centers = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    cfg = model.config
    out = np.zeros(len(centers))
    was_training = model.training
    model.eval()
    try:
        with no_grad():
            for s in range(0, len(centers), batch):
                crops = [mlsc_crop(volume, c, cfg.crop_sizes, cfg.target) for c in centers[s : s + batch]]
                stacked = [Tensor(np.stack([c[k] for c in crops])[:, None]) for k in range(3)]
                out[s : s + batch] = fpr_forward(model, stacked).data[:, 0]
    finally:
        model.train(was_training)
    return out


# -- pipeline -------------------------------------------------------------------
@dataclass
class PipelineConfig:
    patch: int = 128
    overlap: int = 32
    keep_threshold: float = DEFAULT_KEEP
    top_k: int = TOP_K
    candidate_threshold: float = CANDIDATE_THRESHOLD
    nms_iou: float = NMS_IOU
    final_threshold: float = FINAL_THRESHOLD
    tta: bool = False


@dataclass
class PipelineResult:
    pool: np.ndarray  # pre-NMS candidate pool (n, 5)
    candidates: list[DetectionBox]
    final: list[DetectionBox]
    plane_counts: dict = field(default_factory=dict)
    fpr_probs: np.ndarray | None = None


def detect(rpn, volume: np.ndarray, fpr=None, config: PipelineConfig | None = None) -> PipelineResult:
    """Proposals (+TTA) -> top-k / threshold / NMS -> optional FPR ensembling."""
    cfg = config or PipelineConfig()
    planes = PLANES if cfg.tta else ("axial",)
    pool, counts = tta_array(rpn, volume, cfg.patch, cfg.overlap, cfg.keep_threshold, planes)
    pool = _valid(pool)
    cand = from_array(candidate_select_array(pool, cfg.top_k, cfg.candidate_threshold, cfg.nms_iou))
    if fpr is None:
        return PipelineResult(pool, cand, cand, counts)
    probs = fpr_probabilities(fpr, volume, [b.center for b in cand]) if cand else np.zeros(0)
    final = ensemble_scores(cand, probs, cfg.final_threshold)
    return PipelineResult(pool, cand, final, counts, probs)
