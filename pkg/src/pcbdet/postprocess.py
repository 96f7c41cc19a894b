"""NMS and per-class adaptive confidence thresholding."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import DefectClass
from .losses import iou


@dataclass
class ThresholdSet:
    """Per-class confidence thresholds plus the NMS IoU threshold."""
    thresholds: dict  # DefectClass (or int) -> float in [0,1]
    nms_iou: float = 0.5

    def __post_init__(self):
        self.thresholds = {int(k): float(v) for k, v in self.thresholds.items()}
        for v in self.thresholds.values():
            if not 0.0 <= v <= 1.0:
                raise ValueError("thresholds must lie in [0,1]")

    @staticmethod
    def uniform(value: float, num_classes: int = 6, nms_iou: float = 0.5):
        return ThresholdSet({c: value for c in range(num_classes)}, nms_iou)

    def to_dict(self) -> dict:
        return {"thresholds": {str(k): v for k, v in self.thresholds.items()},
                "nms_iou": self.nms_iou}

    @staticmethod
    def from_dict(d: dict) -> "ThresholdSet":
        return ThresholdSet({int(k): v for k, v in d["thresholds"].items()},
                            d.get("nms_iou", 0.5))


def nms(boxes: np.ndarray, scores: np.ndarray, classes: np.ndarray,
        iou_thresh: float = 0.5) -> np.ndarray:
    """Class-wise greedy NMS; returns kept indices in keep order.

    Sort is by score descending, ties broken by smaller area then input order.
    A box is kept iff its IoU with every previously kept box of the same class
    is <= iou_thresh.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    classes = np.asarray(classes)
    areas = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], areas[i], i))
    kept: list[int] = []
    for i in order:
        ok = True
        for j in kept:
            if classes[j] == classes[i] and iou(boxes[i], boxes[j]) > iou_thresh:
                ok = False
                break
        if ok:
            kept.append(i)
    return np.array(kept, dtype=np.int64)


def apply_nms(det: dict, iou_thresh: float = 0.5) -> dict:
    keep = nms(det["boxes"], det["scores"], det["classes"], iou_thresh)
    return {k: np.asarray(det[k])[keep] for k in ("boxes", "scores", "classes")}


def calibrate_thresholds(val_dets: list, val_gts: list, match_iou: float = 0.5,
                         num_classes: int = 6, nms_iou: float = 0.5) -> ThresholdSet:
    """Pick per-class confidence cuts maximizing F1 on a validation set.

    TP/FP flags are computed once on the full (post-NMS) detection set by the
    greedy matcher; F1 is then swept over the observed score cut-points with
    ties resolved toward the higher threshold. Classes absent from the ground
    truth get threshold 1.0.
    """
    from .evaluate import match_detections

    flags, _ = match_detections(val_dets, val_gts, match_iou)
    thresholds = {}
    for c in range(num_classes):
        n_gt = sum(int((np.asarray(g["classes"]) == c).sum()) for g in val_gts)
        if n_gt == 0:
            thresholds[c] = 1.0
            continue
        scores, is_tp = [], []
        for di, det in enumerate(val_dets):
            cls = np.asarray(det["classes"])
            for j in np.nonzero(cls == c)[0]:
                scores.append(float(det["scores"][j]))
                is_tp.append(bool(flags[di][j]))
        if not scores:
            thresholds[c] = 1.0
            continue
        order = np.argsort(-np.asarray(scores), kind="stable")
        s_sorted = np.asarray(scores)[order]
        tp_sorted = np.asarray(is_tp)[order]
        best_f1, best_thr = -1.0, 1.0
        for cut in sorted(set(s_sorted), reverse=True):
            keep = s_sorted >= cut
            tp = int(tp_sorted[keep].sum())
            fp = int(keep.sum()) - tp
            prec = tp / max(tp + fp, 1)
            rec = tp / n_gt
            f1 = 2 * prec * rec / max(prec + rec, 1e-12)
            if f1 > best_f1:
                best_f1, best_thr = f1, float(cut)
        thresholds[c] = best_thr
    return ThresholdSet(thresholds, nms_iou=nms_iou)


def filter_detections(det: dict, thresholds: ThresholdSet) -> dict:
    """Keep detections scoring at least their class threshold; order preserved."""
    cls = np.asarray(det["classes"])
    scores = np.asarray(det["scores"], dtype=np.float64)
    thr = np.array([thresholds.thresholds.get(int(c), 1.0) for c in cls])
    keep = scores >= thr
    return {k: np.asarray(det[k])[keep] for k in ("boxes", "scores", "classes")}
