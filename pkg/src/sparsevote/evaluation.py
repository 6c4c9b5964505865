"""Detection matching and 11-point interpolated average precision."""

import csv
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

IOU_THRESHOLDS = {"Car": 0.7, "Pedestrian": 0.5, "Cyclist": 0.5}
# Labels of these classes are neither positives nor false-positive sources.
NEIGHBOR_CLASSES = {"Car": {"Van"}, "Pedestrian": {"Person_sitting"}}
RECALL_POINTS = np.linspace(0.0, 1.0, 11)

TP, FP, IGNORED = 1, 0, -1


@dataclass(frozen=True)
class DifficultySpec:
    name: str
    min_height: float
    max_occlusion: int
    max_truncation: float

    def admits(self, label):
        return (label.height_px >= self.min_height
                and label.occluded <= self.max_occlusion
                and label.truncated <= self.max_truncation)


DIFFICULTIES = {
    "easy": DifficultySpec("easy", 40.0, 0, 0.15),
    "moderate": DifficultySpec("moderate", 25.0, 1, 0.30),
    "hard": DifficultySpec("hard", 25.0, 2, 0.50),
}


def iou_2d(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def _covered_fraction(det, region):
    iw = min(det[2], region[2]) - max(det[0], region[0])
    ih = min(det[3], region[3]) - max(det[1], region[1])
    area = (det[2] - det[0]) * (det[3] - det[1])
    if iw <= 0 or ih <= 0 or area <= 0:
        return 0.0
    return iw * ih / area


@dataclass
class FrameMatch:
    scores: np.ndarray  # per detection
    status: np.ndarray  # TP / FP / IGNORED per detection
    found: np.ndarray  # per positive label
    num_positives: int


def match_detections(det_boxes, det_scores, gt_boxes, gt_ignored, iou_threshold,
                     dontcare_boxes=(), det_ignored=None):
    """Greedy one-to-one matching in descending score order.

    A detection matching an unmatched positive label is a TP. Otherwise, if it
    overlaps an ignored label (or mostly lies in a DontCare region) it is
    ignored, and else it is a FP. ``det_ignored`` marks detections excluded
    up front (e.g. too small for the difficulty) unless they hit a positive.
    """
    det_scores = np.asarray(det_scores, dtype=np.float64)
    gt_ignored = np.asarray(gt_ignored, dtype=bool).reshape(-1)
    n_det, n_gt = len(det_boxes), len(gt_boxes)
    status = np.full(n_det, FP, dtype=np.int8)
    matched = np.zeros(n_gt, dtype=bool)
    if det_ignored is None:
        det_ignored = np.zeros(n_det, dtype=bool)
    order = np.argsort(-det_scores, kind="stable")
    for d in order:
        best, best_iou = -1, iou_threshold
        for g in range(n_gt):
            if matched[g] or gt_ignored[g]:
                continue
            ov = iou_2d(det_boxes[d], gt_boxes[g])
            if ov >= best_iou:
                best, best_iou = g, ov
        if best >= 0:
            matched[best] = True
            status[d] = TP
            continue
        if det_ignored[d]:
            status[d] = IGNORED
            continue
        if any(gt_ignored[g] and iou_2d(det_boxes[d], gt_boxes[g]) >= iou_threshold
               for g in range(n_gt)):
            status[d] = IGNORED
        elif any(_covered_fraction(det_boxes[d], r) >= 0.5 for r in dontcare_boxes):
            status[d] = IGNORED
    positives = ~gt_ignored
    return FrameMatch(det_scores, status, matched[positives], int(positives.sum()))


def match_frame(detections, labels, class_name, difficulty="moderate", iou_threshold=None):
    """Match KITTI label records for one frame and class."""
    spec = DIFFICULTIES[difficulty] if isinstance(difficulty, str) else difficulty
    thr = iou_threshold if iou_threshold is not None else IOU_THRESHOLDS.get(class_name, 0.5)
    neighbors = NEIGHBOR_CLASSES.get(class_name, set())
    gts = [lb for lb in labels if lb.type == class_name or lb.type in neighbors]
    gt_ignored = [lb.type != class_name or not spec.admits(lb) for lb in gts]
    dontcare = [lb.bbox for lb in labels if lb.is_dontcare]
    dets = [d for d in detections if d.type == class_name]
    det_ignored = np.array([d.height_px < spec.min_height for d in dets], dtype=bool)
    return match_detections([d.bbox for d in dets],
                            [d.score if d.score is not None else 0.0 for d in dets],
                            [g.bbox for g in gts], gt_ignored, thr, dontcare, det_ignored)


@dataclass
class APResult:
    ap: Optional[float]
    thresholds: np.ndarray = field(default_factory=lambda: np.empty(0))
    precision: np.ndarray = field(default_factory=lambda: np.empty(0))
    recall: np.ndarray = field(default_factory=lambda: np.empty(0))
    num_positives: int = 0
    num_tp: np.ndarray = field(default_factory=lambda: np.empty(0, int))
    num_fp: np.ndarray = field(default_factory=lambda: np.empty(0, int))

    def to_dict(self):
        return {
            "ap": self.ap,
            "num_positives": self.num_positives,
            "curve": [
                {"threshold": float(t), "precision": float(p), "recall": float(r),
                 "tp": int(tp), "fp": int(fp)}
                for t, p, r, tp, fp in zip(self.thresholds, self.precision, self.recall,
                                           self.num_tp, self.num_fp)
            ],
        }


def pr_curve(matches):
    """Precision/recall at every distinct score, sweeping from high to low."""
    scores = np.concatenate([m.scores[m.status != IGNORED] for m in matches] or [np.empty(0)])
    is_tp = np.concatenate([m.status[m.status != IGNORED] == TP for m in matches]
                           or [np.empty(0, bool)])
    npos = sum(m.num_positives for m in matches)
    if scores.size == 0:
        e = np.empty(0)
        return e, e, e, np.empty(0, int), np.empty(0, int), npos
    order = np.argsort(-scores, kind="stable")
    scores, is_tp = scores[order], is_tp[order]
    tp = np.cumsum(is_tp)
    fp = np.cumsum(~is_tp)
    # one point per distinct score: the last index of each run of ties
    last = np.r_[np.flatnonzero(np.diff(scores) != 0), scores.size - 1]
    tp, fp, thr = tp[last], fp[last], scores[last]
    precision = tp / (tp + fp)
    recall = tp / npos if npos else np.zeros_like(precision)
    return thr, precision, recall, tp, fp, npos


def average_precision(matches):
    """11-point interpolated AP over all frames; ``ap`` is None without positives."""
    thr, precision, recall, tp, fp, npos = pr_curve(matches)
    if npos == 0:
        return APResult(None, thr, precision, recall, 0, tp, fp)
    ap = 0.0
    for r in RECALL_POINTS:
        reach = precision[recall >= r - 1e-12]
        ap += reach.max() if reach.size else 0.0
    return APResult(float(ap / RECALL_POINTS.size), thr, precision, recall, npos, tp, fp)


def evaluate(detections_by_frame, labels_by_frame, class_name, difficulty="moderate",
             iou_threshold=None):
    """AP of one class over frames given as parallel lists of label records."""
    matches = [match_frame(d, g, class_name, difficulty, iou_threshold)
               for d, g in zip(detections_by_frame, labels_by_frame)]
    return average_precision(matches)


def write_pr_csv(path, result):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "precision", "recall", "tp", "fp"])
        for row in result.to_dict()["curve"]:
            w.writerow([row["threshold"], row["precision"], row["recall"], row["tp"], row["fp"]])


def write_results_json(path, results):
    """``results`` maps ``(class, difficulty)`` to :class:`APResult`."""
    payload = {f"{c}/{d}": r.to_dict() for (c, d), r in results.items()}
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
