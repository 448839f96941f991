"""Detection objectives: focal classification, smooth L1 regression, anchor
targets and online hard negative mining."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .boxes import cube_iou
from .tensor import Tensor, make_node, take_flat

EPS = 1e-7
POS_IOU = 0.5
NEG_IOU = 0.2

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class FocalParams:
    gamma: float = 2.0
    alpha: float = 0.5

    def __post_init__(self):
        if self.gamma < 0:
            raise ValueError("gamma must be >= 0")
        if not 0 <= self.alpha <= 1:
            raise ValueError("alpha must lie in [0, 1]")


RPN_FOCAL = FocalParams(2.0, 0.5)
FPR_FOCAL = FocalParams(0.0, 1.0)


# -- scalar forms ---------------------------------------------------------
def focal_loss(p, is_positive, params: FocalParams = RPN_FOCAL):
    """-alpha * (1 - p_t)^gamma * ln(p_t) with p clamped to [eps, 1 - eps]."""
    p = np.clip(np.asarray(p, dtype=np.float64), EPS, 1 - EPS)
    pt = np.where(is_positive, p, 1 - p)
    out = -params.alpha * (1 - pt) ** params.gamma * np.log(pt)
    return float(out) if out.ndim == 0 else out


def smooth_l1(t_star, t) -> float:
    """Sum over components of |x| if |x| > 1 else x^2, x = t* - t."""
    x = np.abs(np.asarray(t_star, dtype=np.float64) - np.asarray(t, dtype=np.float64))
    return float(np.where(x > 1, x, x * x).sum())


def encode_target(gt, anchor) -> np.ndarray:
    """Offsets of ``gt`` relative to ``anchor``; both are (..., 4) rows of
    three centre coordinates (any consistent axis order) and a diameter."""
    gt = np.asarray(gt, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(gt[..., 3] <= 0) or np.any(anchor[..., 3] <= 0):
        raise ValueError("diameters must be positive")
    da = anchor[..., 3:4]
    return np.concatenate([(gt[..., :3] - anchor[..., :3]) / da, np.log(gt[..., 3:4] / da)], axis=-1)


def decode_prediction(t, anchor) -> np.ndarray:
    """Inverse of :func:`encode_target`."""
    t = np.asarray(t, dtype=np.float64)
    anchor = np.asarray(anchor, dtype=np.float64)
    if np.any(anchor[..., 3] <= 0):
        raise ValueError("anchor diameter must be positive")
    da = anchor[..., 3:4]
    return np.concatenate([anchor[..., :3] + t[..., :3] * da, da * np.exp(t[..., 3:4])], axis=-1)


def combined_loss(cls_losses, reg_losses, labels, lam: float = 1.0) -> float:
    """lam * mean classification loss over non-ignored anchors plus the mean
    regression loss over positives (zero when there are none)."""
    cls_losses = np.asarray(cls_losses, dtype=np.float64)
    reg_losses = np.asarray(reg_losses, dtype=np.float64)
    labels = np.asarray(labels)
    if not (cls_losses.shape == reg_losses.shape == labels.shape):
        raise ValueError("cls_losses, reg_losses and labels must align")
    used = labels != IGNORE
    pos = labels == POSITIVE
    cls_term = cls_losses[used].mean() if used.any() else 0.0
    reg_term = reg_losses[pos].mean() if pos.any() else 0.0
    return float(lam * cls_term + reg_term)


def ohem_select(neg_probs, n: int = 2) -> np.ndarray:
    """Indices of the ``n`` highest probabilities (ties go to the lower index)."""
    if n < 1:
        raise ValueError("n must be >= 1")
    neg_probs = np.asarray(neg_probs, dtype=np.float64).reshape(-1)
    order = np.argsort(-neg_probs, kind="stable")
    return np.sort(order[:n])


@dataclass
class AnchorAssignment:
    labels: np.ndarray  # (n,) int8 in {1, 0, -1}
    gt_index: np.ndarray  # (n,) matched gt for positives, -1 elsewhere
    targets: np.ndarray  # (n, 4) encoded offsets, zero for non-positives
    max_iou: np.ndarray  # (n,)


def assign_anchors(anchors, gt_boxes, pos_iou=POS_IOU, neg_iou=NEG_IOU, force_best=True) -> AnchorAssignment:
    """Label anchors by their best cube IoU with any ground truth.

    Positive at IoU >= ``pos_iou``, negative below ``neg_iou``, ignored in
    between. With ``force_best`` the highest-IoU anchor of every ground truth
    (when it overlaps at all) is made positive for that ground truth; an anchor
    already claimed this way passes the ground truth on to its next-best anchor.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    n = len(anchors)
    labels = np.full(n, NEGATIVE, dtype=np.int8)
    gt_index = np.full(n, -1, dtype=np.int64)
    targets = np.zeros((n, 4))
    if len(gt) == 0:
        return AnchorAssignment(labels, gt_index, targets, np.zeros(n))
    iou = cube_iou(anchors, gt)
    best_gt = iou.argmax(axis=1)
    max_iou = iou[np.arange(n), best_gt]
    labels[max_iou >= neg_iou] = IGNORE
    pos = max_iou >= pos_iou
    labels[pos] = POSITIVE
    gt_index[pos] = best_gt[pos]
    if force_best:
        forced = set()
        for j in range(len(gt)):
            # next-best anchor when two ground truths share the same best one
            for i in np.argsort(-iou[:, j], kind="stable"):
                if iou[i, j] <= 0:
                    break
                if int(i) not in forced:
                    forced.add(int(i))
                    labels[i] = POSITIVE
                    gt_index[i] = j
                    break
    pos = labels == POSITIVE
    targets[pos] = encode_target(gt[gt_index[pos]], anchors[pos])
    return AnchorAssignment(labels, gt_index, targets, max_iou)


# -- differentiable forms --------------------------------------------------
def focal_loss_logits(logits: Tensor, positive: np.ndarray, params: FocalParams) -> Tensor:
    """Per-element focal loss of sigmoid(logits); returns a tensor of logits' shape."""
    z = logits.data.astype(np.float64)
    s = np.where(positive, 1.0, -1.0)
    sz = s * z
    pt_raw = np.where(sz >= 0, 1 / (1 + np.exp(-np.abs(sz))), np.exp(-np.abs(sz)) / (1 + np.exp(-np.abs(sz))))
    pt = np.clip(pt_raw, EPS, 1 - EPS)
    clamped = (pt_raw < EPS) | (pt_raw > 1 - EPS)
    g, a = params.gamma, params.alpha
    loss = -a * (1 - pt) ** g * np.log(pt)
    # dL/dz = s * alpha * (gamma * p_t * (1-p_t)^gamma * ln p_t - (1-p_t)^(gamma+1))
    dz = s * a * (g * pt * (1 - pt) ** g * np.log(pt) - (1 - pt) ** (g + 1))
    dz[clamped] = 0.0

    def backward(grad):
        return ((grad * dz).astype(logits.dtype),)

    return make_node(loss.astype(logits.dtype), (logits,), backward, "focal_loss")


def smooth_l1_rows(pred: Tensor, target: np.ndarray) -> Tensor:
    """Row-wise smooth L1 of (k, 4) predictions against fixed targets."""
    x = pred.data.astype(np.float64) - target
    ax = np.abs(x)
    loss = np.where(ax > 1, ax, x * x).sum(axis=1)
    dx = np.where(ax > 1, np.sign(x), 2 * x)

    def backward(grad):
        return ((grad[:, None] * dx).astype(pred.dtype),)

    return make_node(loss.astype(pred.dtype), (pred,), backward, "smooth_l1")


@dataclass
class LossStats:
    total: float
    cls: float
    reg: float
    n_pos: int
    n_neg: int


def detection_loss(
    cls_logits: Tensor,
    reg: Tensor,
    assignments: list[AnchorAssignment],
    focal: FocalParams = RPN_FOCAL,
    ohem_n: int = 2,
    lam: float = 1.0,
) -> tuple[Tensor, LossStats]:
    """Combined objective over a batch of head outputs.

    ``cls_logits`` is (N, A, g, g, g); ``reg`` is (N, 4A, g, g, g). Each
    assignment covers the flattened (A, g, g, g) anchors of one sample. All
    positives plus the ``ohem_n`` most confident negatives of each sample
    enter the classification mean; the rest are ignored.
    """
    N, A = cls_logits.shape[:2]
    grid = cls_logits.shape[2:]
    per = A * int(np.prod(grid))
    probs = 1 / (1 + np.exp(-cls_logits.data.reshape(N, per).astype(np.float64)))
    cls_idx, cls_pos, reg_idx, reg_tgt = [], [], [], []
    for n, asg in enumerate(assignments):
        pos = np.flatnonzero(asg.labels == POSITIVE)
        neg = np.flatnonzero(asg.labels == NEGATIVE)
        hard = neg[ohem_select(probs[n, neg], ohem_n)] if len(neg) else neg
        cls_idx += [n * per + pos, n * per + hard]
        cls_pos += [np.ones(len(pos), bool), np.zeros(len(hard), bool)]
        if len(pos):
            a_idx, spatial = np.divmod(pos, per // A)
            # reg layout (N, A, 4, g, g, g) flattened
            base = n * per * 4 + a_idx * 4 * (per // A) + spatial
            reg_idx.append(base[:, None] + np.arange(4)[None, :] * (per // A))
            reg_tgt.append(asg.targets[pos])
    cls_idx = np.concatenate(cls_idx)
    cls_pos = np.concatenate(cls_pos)
    if len(cls_idx):
        picked = take_flat(cls_logits, cls_idx)
        cls_term = focal_loss_logits(picked, cls_pos, focal).mean()
    else:
        cls_term = (cls_logits * 0.0).sum()
    total = cls_term * lam
    reg_val = 0.0
    if reg_idx:
        ridx = np.concatenate(reg_idx)
        preds = take_flat(reg, ridx.reshape(-1)).reshape(ridx.shape)
        reg_term = smooth_l1_rows(preds, np.concatenate(reg_tgt)).mean()
        reg_val = float(reg_term.data)
        total = total + reg_term
    stats = LossStats(float(total.data), float(cls_term.data), reg_val, int(cls_pos.sum()), int((~cls_pos).sum()))
    return total, stats
