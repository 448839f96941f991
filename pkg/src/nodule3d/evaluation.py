"""Hit matching and FROC / CPM scoring."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import DetectionBox

FP_RATES = (0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0)
TP, FP, IGNORED = "TP", "FP", "ignored"


@dataclass
class ScanMatch:
    """Matching outcome for one scan."""

    scores: np.ndarray  # (n,) detection scores
    status: list[str]  # TP / FP / ignored per detection
    gt_index: np.ndarray  # (n,) matched ground truth for TPs, -1 otherwise
    gt_hit: np.ndarray  # (m,) bool
    n_gt: int


def hit_match(detections: Sequence[DetectionBox], gt_nodules, irrelevant_findings=()) -> ScanMatch:
    """Centre-in-radius matching, highest score first; each nodule absorbs one hit.

    A detection inside several unhit nodules goes to the nearest one. Misses
    that fall within the radius of an irrelevant finding are ignored.
    """
    gt = np.asarray(gt_nodules, dtype=np.float64).reshape(-1, 4)
    irr = np.asarray(irrelevant_findings, dtype=np.float64).reshape(-1, 4)
    scores = np.array([b.score for b in detections], dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    status = [FP] * len(detections)
    gt_index = np.full(len(detections), -1, dtype=np.int64)
    hit = np.zeros(len(gt), dtype=bool)
    for i in order:
        c = detections[i].center
        if len(gt):
            dist = np.linalg.norm(gt[:, :3] - c, axis=1)
            inside = (dist <= gt[:, 3] / 2) & ~hit
            if inside.any():
                j = int(np.flatnonzero(inside)[np.argmin(dist[inside])])
                hit[j] = True
                status[i] = TP
                gt_index[i] = j
                continue
        if len(irr) and np.any(np.linalg.norm(irr[:, :3] - c, axis=1) <= irr[:, 3] / 2):
            status[i] = IGNORED
    return ScanMatch(scores, status, gt_index, hit, len(gt))


@dataclass
class FrocResult:
    curve: list[tuple[float, float]]  # (fp_per_scan, sensitivity), fp ascending
    seven_point: np.ndarray
    cpm: float
    rates: tuple[float, ...] = FP_RATES

    def sensitivity_at(self, rate: float) -> float:
        return interpolate_curve(self.curve, rate)


def interpolate_curve(curve, rate: float) -> float:
    """Linear interpolation of sensitivity at ``rate``, clamped to the curve ends.

    Several thresholds can share one FP rate; the highest sensitivity among
    them represents that rate.
    """
    if not curve:
        return 0.0
    best: dict[float, float] = {}
    for fp, sens in curve:
        best[fp] = max(sens, best.get(fp, 0.0))
    xs = np.array(sorted(best))
    ys = np.array([best[x] for x in xs])
    return float(np.interp(rate, xs, ys))


def froc(matches: Sequence[ScanMatch], n_scans: int | None = None, rates=FP_RATES) -> FrocResult:
    """Threshold sweep over every distinct score, descending."""
    n_scans = len(matches) if n_scans is None else n_scans
    if n_scans < 1:
        raise ValueError("n_scans must be >= 1")
    total_gt = sum(m.n_gt for m in matches)
    if total_gt == 0:
        raise ValueError("FROC needs at least one ground-truth nodule")
    scores, is_tp, is_fp = [], [], []
    for m in matches:
        scores.append(m.scores)
        is_tp.append(np.array([s == TP for s in m.status], dtype=bool))
        is_fp.append(np.array([s == FP for s in m.status], dtype=bool))
    scores = np.concatenate(scores) if scores else np.zeros(0)
    is_tp = np.concatenate(is_tp) if is_tp else np.zeros(0, bool)
    is_fp = np.concatenate(is_fp) if is_fp else np.zeros(0, bool)
    curve = []
    if len(scores):
        order = np.argsort(-scores, kind="stable")
        s, tp, fp = scores[order], np.cumsum(is_tp[order]), np.cumsum(is_fp[order])
        # last index of each run of equal scores
        ends = np.flatnonzero(np.r_[s[1:] != s[:-1], True])
        curve = [(float(fp[i] / n_scans), float(tp[i] / total_gt)) for i in ends]
    seven = np.array([interpolate_curve(curve, r) for r in rates])
    return FrocResult(curve, seven, float(seven.mean()), tuple(rates))


def evaluate(detections: dict[str, list[DetectionBox]], annotations: dict[str, np.ndarray], irrelevant=None) -> FrocResult:
    """FROC over every annotated series; series without detections count as scans."""
    irrelevant = irrelevant or {}
    matches = [
        hit_match(detections.get(sid, []), annotations[sid], irrelevant.get(sid, ()))
        for sid in sorted(annotations)
    ]
    return froc(matches, len(annotations))


# -- CSV -------------------------------------------------------------------
def export_froc_csv(result: FrocResult, path) -> Path:
    path = Path(path)
    lines = ["fp_per_scan,sensitivity"]
    lines += [f"{fp:.6f},{s:.6f}" for fp, s in result.curve]
    lines += ["", "fp_rate,sensitivity"]
    lines += [f"{r:.6f},{s:.6f}" for r, s in zip(result.rates, result.seven_point)]
    lines += [f"cpm,{result.cpm:.6f}"]
    path.write_text("\n".join(lines) + "\n")
    return path


def parse_froc_csv(path) -> FrocResult:
    blocks = Path(path).read_text().strip().split("\n\n")
    if len(blocks) != 2:
        raise ValueError(f"{path}: expected curve and summary blocks")
    curve_lines = blocks[0].splitlines()[1:]
    curve = [tuple(float(v) for v in ln.split(",")) for ln in curve_lines]
    summary = blocks[1].splitlines()[1:]
    rates, seven = [], []
    cpm = None
    for ln in summary:
        key, val = ln.split(",")
        if key == "cpm":
            cpm = float(val)
        else:
            rates.append(float(key))
            seven.append(float(val))
    if cpm is None:
        raise ValueError(f"{path}: missing cpm row")
    return FrocResult(curve, np.array(seven), cpm, tuple(rates))


def format_summary(result: FrocResult) -> str:
    parts = [f"sens@{r:g}={s:.6f}" for r, s in zip(result.rates, result.seven_point)]
    return " ".join(parts) + f" CPM={result.cpm:.6f}"
