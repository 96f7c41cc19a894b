"""Composite detection objective: focal classification loss, CIoU box loss,
and distribution focal loss over DFL bins, plus the weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .detector import Assignment, DetectorConfig

_EPS = 1e-9
_LOG_CLAMP = 1e-12


@dataclass
class LossWeights:
    w_box: float = 7.5
    w_cls: float = 0.5
    w_dfl: float = 1.5

    def __post_init__(self):
        if min(self.w_box, self.w_cls, self.w_dfl) <= 0:
            raise ValueError("loss weights must be positive")


# ---- geometry -----------------------------------------------------------------


def iou(a, b) -> float:
    """Intersection-over-union of two corner boxes (Box objects or 4-arrays)."""
    ax1, ay1, ax2, ay2 = _as4(a)
    bx1, by1, bx2, by2 = _as4(b)
    iw = max(0.0, min(ax2, bx2) - max(ax1, bx1))
    ih = max(0.0, min(ay2, by2) - max(ay1, by1))
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    return inter / union if union > 0 else 0.0


def _as4(box):
    if hasattr(box, "as_array"):
        return box.as_array()
    return np.asarray(box, dtype=np.float64).reshape(4)


def ciou_loss(pred: Tensor, gt, alpha_override: np.ndarray | None = None) -> Tensor:
    """1 - CIoU for predicted boxes [..,4] against constant gt boxes [..,4].

    CIoU = IoU - rho^2/c^2 - alpha*v with alpha = v/((1-IoU)+v) held constant
    in the gradient (the standard convention; finite-difference oracles must
    hold alpha fixed too).
    """
    gt = np.asarray(gt, dtype=np.float64)
    px1, py1, px2, py2 = (pred[..., 0], pred[..., 1], pred[..., 2], pred[..., 3])
    gx1, gy1, gx2, gy2 = (gt[..., 0], gt[..., 1], gt[..., 2], gt[..., 3])

    iw = _min_t(px2, gx2) - _max_t(px1, gx1)
    ih = _min_t(py2, gy2) - _max_t(py1, gy1)
    inter = iw.maximum(0.0) * ih.maximum(0.0)
    area_p = (px2 - px1) * (py2 - py1)
    area_g = (gx2 - gx1) * (gy2 - gy1)
    union = area_p + area_g - inter
    iou_t = inter / (union + _EPS)

    cw = _max_t(px2, gx2) - _min_t(px1, gx1)
    ch = _max_t(py2, gy2) - _min_t(py1, gy1)
    c2 = cw * cw + ch * ch + _EPS
    dx = (px1 + px2 - gx1 - gx2) * 0.5
    dy = (py1 + py2 - gy1 - gy2) * 0.5
    rho2 = dx * dx + dy * dy

    wp = px2 - px1
    hp = py2 - py1
    wg = gx2 - gx1
    hg = gy2 - gy1
    v = (4.0 / math.pi ** 2) * (
        Tensor(np.arctan(wg / np.maximum(hg, _EPS))) - (wp / (hp + _EPS)).atan()) ** 2
    if alpha_override is None:
        alpha = v.data / ((1.0 - iou_t.data) + v.data + _EPS)
    else:
        alpha = alpha_override
    ciou = iou_t - rho2 / c2 - Tensor(alpha) * v
    return 1.0 - ciou


def _min_t(a: Tensor, b) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(b)
    diff = a - b
    return b + diff * Tensor(diff.data < 0)


def _max_t(a: Tensor, b) -> Tensor:
    b = b if isinstance(b, Tensor) else Tensor(b)
    diff = a - b
    return b + diff * Tensor(diff.data > 0)


# ---- focal losses -------------------------------------------------------------


def focal_terms(logits: Tensor, targets: np.ndarray, alpha: float = 0.25,
                gamma: float = 2.0) -> Tensor:
    """Elementwise binary focal loss vs 0/1 targets (no reduction)."""
    t = np.asarray(targets, dtype=np.float64)
    p = logits.sigmoid()
    p_t = p * Tensor(t) + (1.0 - p) * Tensor(1.0 - t)
    alpha_t = alpha * t + (1.0 - alpha) * (1.0 - t)
    mod = (1.0 - p_t) ** gamma if gamma != 0 else 1.0
    return -Tensor(alpha_t) * mod * p_t.maximum(_LOG_CLAMP).log()


def focal_loss(class_logits: Tensor, targets, alpha: float = 0.25,
               gamma: float = 2.0) -> Tensor:
    """Focal loss summed over the class axis, averaged over positions."""
    terms = focal_terms(class_logits, targets, alpha=alpha, gamma=gamma)
    summed = terms.sum(axis=-1)
    return summed.mean()


def quality_focal_terms(logits: Tensor, soft_targets: np.ndarray,
                        gamma: float = 2.0) -> Tensor:
    """Focal-modulated BCE against soft targets in [0,1] (objectness)."""
    t = np.asarray(soft_targets, dtype=np.float64)
    p = logits.sigmoid()
    bce = -(Tensor(t) * p.maximum(_LOG_CLAMP).log()
            + Tensor(1.0 - t) * (1.0 - p).maximum(_LOG_CLAMP).log())
    mod = (p - Tensor(t)).abs() ** gamma
    return mod * bce


def dfl_loss(side_logits: Tensor, target_offset, reduce: bool = True) -> Tensor:
    """Interpolated NLL over DFL bins.

    side_logits [.., bins], target_offset [..] in [0, bins-1] (clamped).
    With i = floor(y): loss = -((i+1-y) log S_i + (y-i) log S_{i+1}).
    """
    bins = side_logits.shape[-1]
    y = np.clip(np.asarray(target_offset, dtype=np.float64), 0.0, bins - 1 - 1e-6)
    i = np.floor(y).astype(np.int64)
    wl = (i + 1) - y
    wr = y - i
    log_s = side_logits.softmax(axis=-1).maximum(_LOG_CLAMP).log()
    idx = tuple(np.indices(y.shape))
    left = log_s[idx + (i,)]
    right = log_s[idx + (np.minimum(i + 1, bins - 1),)]
    terms = -(Tensor(wl) * left + Tensor(wr) * right)
    return terms.mean() if reduce else terms


# ---- composite ----------------------------------------------------------------


def total_loss(raw: list, assignment: Assignment, config: DetectorConfig,
               weights: LossWeights | None = None, iou_aware_obj: bool = True,
               focal_alpha: float = 0.25, focal_gamma: float = 2.0,
               frozen: dict | None = None) -> dict:
    """Weighted composite loss.

    box (CIoU) and dfl average over assigned positives; cls covers every grid
    position with background as all-zero targets, and the objectness logit is
    folded in with an IoU-aware soft target (IoU of the decoded positive box
    against its gt; 0 at background).

    The CIoU alpha factor and the soft objectness targets are treated as
    constants in the gradient. `frozen`, as returned under the "frozen" key of
    a previous call, pins both so finite-difference checks can replicate that
    convention.
    """
    weights = weights or LossWeights()
    bins = config.dfl_bins
    nc = config.num_classes
    a_per = config.anchors_per_scale
    span = 4 * bins + 1 + nc
    strides = config.strides

    zero = Tensor(np.zeros(()))
    box_l = zero
    dfl_l = zero
    n_pos = assignment.num_pos

    # Per-scale reshaped views [B, A, span, H, W].
    views = []
    for raw_s in raw:
        b, _, hh, ww = raw_s.shape
        views.append(raw_s.reshape(b, a_per, span, hh, ww))

    # Soft objectness targets per scale, filled from decoded positives below.
    obj_targets = [np.zeros((v.shape[0], a_per, v.shape[3], v.shape[4]))
                   for v in views]
    cls_targets = [np.zeros((v.shape[0], a_per, nc, v.shape[3], v.shape[4]))
                   for v in views]

    frozen_out = {"alpha": {}, "obj_targets": None}
    if n_pos > 0:
        pred_boxes_parts = []
        dfl_terms_parts = []
        for si, v in enumerate(views):
            mask = assignment.scale == si
            if not mask.any():
                continue
            bi = assignment.b[mask]
            ai = assignment.anchor[mask]
            gy = assignment.gy[mask]
            gx = assignment.gx[mask]
            gtb = assignment.gt_boxes[mask]
            gtc = assignment.gt_cls[mask]
            stride = strides[si]
            pos = v[bi, ai, :, gy, gx]  # [P, span]
            dfl_logits = pos[:, :4 * bins].reshape(-1, 4, bins)
            offs = dfl_logits.softmax(axis=-1) * Tensor(np.arange(bins, dtype=np.float64))
            offs = offs.sum(axis=-1) * float(stride)  # [P,4] l,t,r,b
            cx = (gx + 0.5) * stride
            cy = (gy + 0.5) * stride
            signs = np.array([-1.0, -1.0, 1.0, 1.0])
            centers = np.stack([cx, cy, cx, cy], axis=1)
            pred_box = Tensor(centers) + offs * Tensor(signs)
            pred_boxes_parts.append((pred_box, gtb))
            # DFL targets: gt side distances from the cell center in stride units.
            tx = np.stack([cx - gtb[:, 0], cy - gtb[:, 1],
                           gtb[:, 2] - cx, gtb[:, 3] - cy], axis=1) / stride
            dfl_terms_parts.append(dfl_loss(dfl_logits, tx, reduce=False))
            # Class / objectness targets.
            cls_targets[si][bi, ai, gtc, gy, gx] = 1.0
            if frozen is not None and frozen.get("obj_targets") is not None:
                pass  # overridden wholesale below
            elif iou_aware_obj:
                dec = pred_box.data
                ious = np.array([iou(dec[j], gtb[j]) for j in range(len(gtb))])
                obj_targets[si][bi, ai, gy, gx] = ious
            else:
                obj_targets[si][bi, ai, gy, gx] = 1.0
        ciou_all = []
        for part_i, (pb, gtb) in enumerate(pred_boxes_parts):
            alpha = None
            if frozen is not None and part_i in frozen.get("alpha", {}):
                alpha = frozen["alpha"][part_i]
            term = ciou_loss(pb, gtb, alpha_override=alpha)
            frozen_out["alpha"][part_i] = (
                alpha if alpha is not None else _ciou_alpha(pb.data, gtb))
            ciou_all.append(term)
        box_l = T.concat([c.reshape(-1) for c in ciou_all]).mean()
        dfl_l = T.concat([t.reshape(-1) for t in dfl_terms_parts]).mean()

    if frozen is not None and frozen.get("obj_targets") is not None:
        obj_targets = frozen["obj_targets"]
    frozen_out["obj_targets"] = obj_targets

    cls_parts = []
    for si, v in enumerate(views):
        cls_logits = v[:, :, 4 * bins + 1:]  # [B,A,nc,H,W]
        obj_logits = v[:, :, 4 * bins]  # [B,A,H,W]
        cls_t = focal_terms(cls_logits, cls_targets[si], alpha=focal_alpha,
                            gamma=focal_gamma).sum(axis=2)
        obj_t = quality_focal_terms(obj_logits, obj_targets[si],
                                    gamma=focal_gamma)
        cls_parts.append((cls_t + obj_t).reshape(-1))
    cls_l = T.concat(cls_parts).mean()

    total = weights.w_box * box_l + weights.w_cls * cls_l + weights.w_dfl * dfl_l
    return {"box": box_l, "cls": cls_l, "dfl": dfl_l, "total": total,
            "frozen": frozen_out}


def _ciou_alpha(pred: np.ndarray, gt: np.ndarray) -> np.ndarray:
    """alpha = v / ((1 - IoU) + v) evaluated on raw arrays."""
    gt = np.asarray(gt, dtype=np.float64)
    iou_v = np.array([iou(pred[i], gt[i]) for i in range(len(gt))])
    wp = pred[:, 2] - pred[:, 0]
    hp = pred[:, 3] - pred[:, 1]
    wg = gt[:, 2] - gt[:, 0]
    hg = gt[:, 3] - gt[:, 1]
    v = (4.0 / math.pi ** 2) * (
        np.arctan(wg / np.maximum(hg, _EPS)) - np.arctan(wp / (hp + _EPS))) ** 2
    return v / ((1.0 - iou_v) + v + _EPS)
