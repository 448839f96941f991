"""Cube detections: IoU, non-maximum suppression, candidate pooling, stage ensembling."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

TOP_K = 300
CANDIDATE_THRESHOLD = 0.3
NMS_IOU = 0.1
FINAL_THRESHOLD = 0.3


@dataclass(frozen=True)
class DetectionBox:
    z: float
    y: float
    x: float
    d: float
    score: float = 1.0

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError(f"diameter must be positive, got {self.d}")
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"score must lie in [0, 1], got {self.score}")

    @property
    def center(self) -> np.ndarray:
        return np.array([self.z, self.y, self.x])

    def as_array(self) -> np.ndarray:
        return np.array([self.z, self.y, self.x, self.d, self.score])


def to_array(boxes: Iterable[DetectionBox]) -> np.ndarray:
    rows = [b.as_array() for b in boxes]
    return np.array(rows, dtype=np.float64).reshape(-1, 5)


def from_array(arr: np.ndarray) -> list[DetectionBox]:
    return [DetectionBox(*map(float, row)) for row in np.asarray(arr).reshape(-1, 5)]


def cube_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU of axis-aligned cubes given as (..., 4) rows (z, y, x, d).

    ``a`` is (n, 4) and ``b`` is (m, 4); the result is (n, m).
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, a.shape[-1])[:, :4]
    b = np.asarray(b, dtype=np.float64).reshape(-1, b.shape[-1])[:, :4]
    ra, rb = a[:, None, 3] / 2, b[None, :, 3] / 2
    lo = np.maximum(a[:, None, :3] - ra[..., None], b[None, :, :3] - rb[..., None])
    hi = np.minimum(a[:, None, :3] + ra[..., None], b[None, :, :3] + rb[..., None])
    inter = np.prod(np.clip(hi - lo, 0, None), axis=-1)
    union = a[:, None, 3] ** 3 + b[None, :, 3] ** 3 - inter
    return inter / union


def iou3d(a: DetectionBox, b: DetectionBox) -> float:
    return float(cube_iou(a.as_array()[None, :4], b.as_array()[None, :4])[0, 0])


def nms_array(arr: np.ndarray, iou_threshold: float = NMS_IOU) -> np.ndarray:
    """Greedy NMS over (n, 5) rows; ties in score keep the earlier row."""
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 5)
    order = np.argsort(-arr[:, 4], kind="stable")
    arr = arr[order]
    keep = []
    alive = np.ones(len(arr), dtype=bool)
    for i in range(len(arr)):
        if not alive[i]:
            continue
        keep.append(i)
        if i + 1 < len(arr):
            ious = cube_iou(arr[i : i + 1], arr[i + 1 :])[0]
            alive[i + 1 :] &= ious <= iou_threshold
    return arr[keep]


def nms(boxes: Sequence[DetectionBox], iou_threshold: float = NMS_IOU) -> list[DetectionBox]:
    return from_array(nms_array(to_array(boxes), iou_threshold))


def candidate_select_array(arr: np.ndarray, top_k: int = TOP_K, threshold: float = CANDIDATE_THRESHOLD, iou_threshold: float = NMS_IOU) -> np.ndarray:
    arr = np.asarray(arr, dtype=np.float64).reshape(-1, 5)
    arr = arr[np.argsort(-arr[:, 4], kind="stable")][:top_k]
    arr = arr[arr[:, 4] >= threshold]
    return nms_array(arr, iou_threshold)


def candidate_select(boxes: Sequence[DetectionBox], top_k: int = TOP_K, threshold: float = CANDIDATE_THRESHOLD, iou_threshold: float = NMS_IOU) -> list[DetectionBox]:
    """Top-k by score, drop scores below ``threshold``, then NMS."""
    return from_array(candidate_select_array(to_array(boxes), top_k, threshold, iou_threshold))


def ensemble_scores(rpn_boxes: Sequence[DetectionBox], fpr_probs: Sequence[float], final_threshold: float = FINAL_THRESHOLD) -> list[DetectionBox]:
    """Average the two stage probabilities and keep scores >= threshold."""
    if len(rpn_boxes) != len(fpr_probs):
        raise ValueError(f"{len(rpn_boxes)} boxes but {len(fpr_probs)} probabilities")
    out = []
    for box, p in zip(rpn_boxes, fpr_probs):
        s = (box.score + float(p)) / 2
        if s >= final_threshold:
            out.append(DetectionBox(box.z, box.y, box.x, box.d, s))
    return out
