"""Tiny anchor-based single-stage detector.

Backbone mixes depthwise-separable (lightweight) and residual (deep) conv
blocks, predicts at strides 8 and 16 with a nearest-upsample fusion path, and
emits per anchor slot: 4 side-offset distributions (DFL bins), one objectness
logit, and one logit per defect class. Anchors come from IoU-distance k-means
and are used as shape priors for dynamic assignment; box decoding itself is
distance-from-cell-center via DFL expectation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import expit

from . import tensor as T
from .tensor import Tensor


@dataclass
class DetectorConfig:
    input_size: int = 96
    num_classes: int = 6
    strides: tuple = (8, 16)
    anchors_per_scale: int = 3
    dfl_bins: int = 8
    stem_channels: int = 16
    dw_channels: tuple = (32, 48)
    deep_channels: int = 64
    head_channels: int = 64

    def __post_init__(self):
        if self.input_size % max(self.strides) != 0:
            raise ValueError("input_size must be divisible by the largest stride")

    @property
    def head_out_channels(self) -> int:
        return self.anchors_per_scale * (4 * self.dfl_bins + 1 + self.num_classes)

    @property
    def grid_sizes(self) -> tuple:
        return tuple(self.input_size // s for s in self.strides)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class AnchorSet:
    """Per-scale prior (w, h) pairs, sorted by area ascending within a scale."""
    per_scale: list  # list over scales of [(w, h), ...]

    def __post_init__(self):
        for anchors in self.per_scale:
            for w, h in anchors:
                if w <= 0 or h <= 0:
                    raise ValueError("anchor dims must be positive")

    def to_list(self):
        return [[list(a) for a in s] for s in self.per_scale]

    @staticmethod
    def from_list(data):
        return AnchorSet([[tuple(a) for a in s] for s in data])


# ---- k-means anchors ----------------------------------------------------------


def wh_iou(wh_a: np.ndarray, wh_b: np.ndarray) -> np.ndarray:
    """IoU matrix of co-centered boxes given as (w, h) rows."""
    a = wh_a[:, None]
    b = wh_b[None]
    inter = np.minimum(a, b).prod(-1)
    return inter / (a.prod(-1) + b.prod(-1) - inter)


def kmeans_anchors(gt_wh, k: int, iters: int = 50, seed: int = 0,
                   n_scales: int = 2, return_history: bool = False):
    """Lloyd's k-means under d = 1 - IoU with per-cluster median centroids.

    The mean best-anchor IoU is tracked per iteration; an update that would
    lower it is rolled back, so the metric is nondecreasing by construction.
    Anchors are split across scales by area, smallest areas first.
    """
    wh = np.asarray(gt_wh, dtype=np.float64).reshape(-1, 2)
    if len(wh) < k:
        raise ValueError(f"need at least k={k} boxes, got {len(wh)}")
    rng = np.random.default_rng(seed)
    centroids = wh[rng.choice(len(wh), size=k, replace=False)].copy()
    history = [wh_iou(wh, centroids).max(axis=1).mean()]
    for _ in range(iters):
        assign = wh_iou(wh, centroids).argmax(axis=1)
        new_c = centroids.copy()
        for c in range(k):
            members = wh[assign == c]
            if len(members):
                new_c[c] = np.median(members, axis=0)
        score = wh_iou(wh, new_c).max(axis=1).mean()
        if score < history[-1]:
            break
        if np.allclose(new_c, centroids):
            history.append(score)
            break
        centroids = new_c
        history.append(score)
    order = np.argsort(centroids.prod(axis=1))
    centroids = centroids[order]
    per = k // n_scales
    scales = [sorted(map(tuple, centroids[i * per:(i + 1) * per]),
                     key=lambda a: a[0] * a[1])
              for i in range(n_scales)]
    anchors = AnchorSet(scales)
    if return_history:
        return anchors, history
    return anchors


def anchors_from_dataset(images, config: DetectorConfig, seed: int = 0) -> AnchorSet:
    wh = [(b.width, b.height) for im in images for b, _ in im.boxes]
    k = config.anchors_per_scale * len(config.strides)
    if len(wh) < k:
        wh = wh + [(16.0, 16.0)] * (k - len(wh))
    return kmeans_anchors(wh, k=k, seed=seed, n_scales=len(config.strides))


# ---- parameters & forward -----------------------------------------------------


def _conv_param(params, rng, name, f, c, k):
    params[f"{name}.w"] = T.he_normal((f, c, k, k), rng, fan_in=c * k * k)
    b = Tensor(np.zeros(f))
    b.requires_grad = True
    params[f"{name}.b"] = b


def _dw_param(params, rng, name, c, k=3):
    params[f"{name}.w"] = T.he_normal((c, k, k), rng, fan_in=k * k)
    b = Tensor(np.zeros(c))
    b.requires_grad = True
    params[f"{name}.b"] = b


def init_detector_params(config: DetectorConfig, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    p: dict = {}
    c0 = config.stem_channels
    c1, c2 = config.dw_channels
    c3 = config.deep_channels
    hc = config.head_channels
    out = config.head_out_channels
    _conv_param(p, rng, "stem", c0, 3, 3)
    _dw_param(p, rng, "dw1.dw", c0)
    _conv_param(p, rng, "dw1.pw", c1, c0, 1)
    _dw_param(p, rng, "dw2.dw", c1)
    _conv_param(p, rng, "dw2.pw", c2, c1, 1)
    _conv_param(p, rng, "res8.a", c2, c2, 3)
    _conv_param(p, rng, "res8.b", c2, c2, 3)
    _conv_param(p, rng, "down", c3, c2, 3)
    _conv_param(p, rng, "res16.a", c3, c3, 3)
    _conv_param(p, rng, "res16.b", c3, c3, 3)
    _conv_param(p, rng, "lat", c2, c3, 1)
    _conv_param(p, rng, "fuse", c2, c2, 3)
    _conv_param(p, rng, "head8.conv", hc, c2, 3)
    _conv_param(p, rng, "head8.out", out, hc, 1)
    _conv_param(p, rng, "head16.conv", hc, c3, 3)
    _conv_param(p, rng, "head16.out", out, hc, 1)
    # Objectness bias starts low so early training is not flooded with boxes.
    for head in ("head8.out", "head16.out"):
        b = p[f"{head}.b"].data
        span = 4 * config.dfl_bins + 1 + config.num_classes
        b.reshape(config.anchors_per_scale, span)[:, 4 * config.dfl_bins] = -4.0
    return p


def _conv(x, params, name, stride=1, padding=1):
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    y = T.conv2d(x, w, stride=stride, padding=padding)
    return y + b.reshape(1, -1, 1, 1)


def _dwconv(x, params, name, stride=1, padding=1):
    w = params[f"{name}.w"]
    b = params[f"{name}.b"]
    y = T.depthwise_conv2d(x, w, stride=stride, padding=padding)
    return y + b.reshape(1, -1, 1, 1)


def detector_forward(x: Tensor, params: dict, config: DetectorConfig) -> list:
    """Run the backbone + heads; returns raw per-scale prediction tensors."""
    n, c, h, w = x.shape
    if h != config.input_size or w != config.input_size:
        raise ValueError(f"expected {config.input_size}px input, got {h}x{w}")
    y = _conv(x, params, "stem", stride=2).silu()
    y = _conv(_dwconv(y, params, "dw1.dw", stride=2), params, "dw1.pw",
              padding=0).silu()
    y = _conv(_dwconv(y, params, "dw2.dw", stride=2), params, "dw2.pw",
              padding=0).silu()
    r = _conv(y, params, "res8.a").silu()
    r = _conv(r, params, "res8.b")
    p3 = (y + r).silu()
    y16 = _conv(p3, params, "down", stride=2).silu()
    r = _conv(y16, params, "res16.a").silu()
    r = _conv(r, params, "res16.b")
    p4 = (y16 + r).silu()
    lat = T.upsample_nearest(_conv(p4, params, "lat", padding=0), 2)
    p3 = _conv(p3 + lat, params, "fuse").silu()
    out8 = _conv(_conv(p3, params, "head8.conv").silu(), params, "head8.out",
                 padding=0)
    out16 = _conv(_conv(p4, params, "head16.conv").silu(), params, "head16.out",
                  padding=0)
    return [out8, out16]


# ---- decoding -----------------------------------------------------------------


def decode_scale(raw: np.ndarray, stride: int, config: DetectorConfig):
    """Decode one scale's raw [B, A*C, H, W] array to flat per-position arrays.

    Returns (boxes [B,P,4], obj [B,P], cls_probs [B,P,nc]) where each side
    offset is the expectation over softmaxed DFL bins times the stride and
    boxes are clipped to the input square.
    """
    bins = config.dfl_bins
    nc = config.num_classes
    a = config.anchors_per_scale
    b, _, hh, ww = raw.shape
    r = raw.reshape(b, a, 4 * bins + 1 + nc, hh, ww)
    dfl = r[:, :, :4 * bins].reshape(b, a, 4, bins, hh, ww)
    dfl = dfl - dfl.max(axis=3, keepdims=True)
    sm = np.exp(dfl)
    sm /= sm.sum(axis=3, keepdims=True)
    offsets = (sm * np.arange(bins)[None, None, None, :, None, None]).sum(axis=3)
    offsets *= stride  # [b, a, 4(l,t,r,b), h, w]
    cx = (np.arange(ww) + 0.5) * stride
    cy = (np.arange(hh) + 0.5) * stride
    x1 = cx[None, None, None, :] - offsets[:, :, 0]
    y1 = cy[None, None, :, None] - offsets[:, :, 1]
    x2 = cx[None, None, None, :] + offsets[:, :, 2]
    y2 = cy[None, None, :, None] + offsets[:, :, 3]
    boxes = np.stack([x1, y1, x2, y2], axis=-1)  # [b,a,h,w,4]
    np.clip(boxes, 0, config.input_size, out=boxes)
    obj = expit(r[:, :, 4 * bins])  # [b,a,h,w]
    cl = r[:, :, 4 * bins + 1:]
    cl = cl - cl.max(axis=2, keepdims=True)
    cle = np.exp(cl)
    cls_probs = cle / cle.sum(axis=2, keepdims=True)  # [b,a,nc,h,w]
    boxes = boxes.reshape(b, -1, 4)
    obj = obj.reshape(b, -1)
    cls_probs = cls_probs.transpose(0, 1, 3, 4, 2).reshape(b, -1, nc)
    return boxes, obj, cls_probs


def decode_predictions(raw: list, config: DetectorConfig, score_floor: float = 0.0):
    """Decode all scales to per-image detections (pre-NMS).

    Returns a list over batch of dicts {boxes [M,4], scores [M], classes [M]}.
    """
    all_boxes, all_obj, all_cls = [], [], []
    for raw_s, stride in zip(raw, config.strides):
        data = raw_s.data if isinstance(raw_s, Tensor) else raw_s
        bx, ob, cp = decode_scale(data, stride, config)
        all_boxes.append(bx)
        all_obj.append(ob)
        all_cls.append(cp)
    boxes = np.concatenate(all_boxes, axis=1)
    obj = np.concatenate(all_obj, axis=1)
    cls_probs = np.concatenate(all_cls, axis=1)
    out = []
    for b in range(boxes.shape[0]):
        best = cls_probs[b].argmax(axis=1)
        score = obj[b] * cls_probs[b].max(axis=1)
        keep = score >= score_floor
        # Degenerate clipped boxes can't match anything; drop them.
        valid = (boxes[b, :, 2] > boxes[b, :, 0]) & (boxes[b, :, 3] > boxes[b, :, 1])
        keep &= valid
        out.append({"boxes": boxes[b][keep], "scores": score[keep],
                    "classes": best[keep]})
    return out


# ---- dynamic target assignment ------------------------------------------------


def _box_iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between [N,4] and [M,4] corner boxes."""
    if len(a) == 0 or len(b) == 0:
        return np.zeros((len(a), len(b)))
    tl = np.maximum(a[:, None, :2], b[None, :, :2])
    br = np.minimum(a[:, None, 2:], b[None, :, 2:])
    inter = np.clip(br - tl, 0, None).prod(-1)
    area_a = np.clip(a[:, 2:] - a[:, :2], 0, None).prod(-1)
    area_b = np.clip(b[:, 2:] - b[:, :2], 0, None).prod(-1)
    union = area_a[:, None] + area_b[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1e-12), 0.0)


@dataclass
class Assignment:
    """Flat positive assignments across the batch.

    Parallel arrays: scale, b (batch index), anchor, gy, gx (ints),
    gt_boxes [P,4], gt_cls [P], plus grid position centers for decoding.
    """
    scale: np.ndarray
    b: np.ndarray
    anchor: np.ndarray
    gy: np.ndarray
    gx: np.ndarray
    gt_boxes: np.ndarray
    gt_cls: np.ndarray

    @property
    def num_pos(self) -> int:
        return len(self.scale)


def _position_table(config: DetectorConfig):
    """Global position index -> (scale, anchor, gy, gx, center_x, center_y)."""
    rows = []
    for si, stride in enumerate(config.strides):
        g = config.input_size // stride
        for a in range(config.anchors_per_scale):
            for gy in range(g):
                for gx in range(g):
                    rows.append((si, a, gy, gx, (gx + 0.5) * stride,
                                 (gy + 0.5) * stride))
    return rows


def assign_targets(batch_gts, anchors: AnchorSet, raw: list,
                   config: DetectorConfig) -> Assignment:
    """Dynamic-k assignment of grid positions to ground truths.

    Rule, applied per image:
      1. candidates(gt) = positions whose cell center lies inside the gt box;
      2. alignment(pos, gt) = class_prob[gt class] * IoU(decoded box, gt);
      3. k(gt) = clamp(round(sum of top-10 candidate IoUs), 1, 10);
         the top-k(gt) candidates by alignment are claimed;
      4. a position claimed by several gts goes to the highest alignment
         (ties: lower gt index);
      5. a gt left without positions gets its highest-IoU position among the
         still-unassigned ones (ties: lower position index).
    """
    decode = []
    for raw_s, stride in zip(raw, config.strides):
        data = raw_s.data if isinstance(raw_s, Tensor) else raw_s
        decode.append(decode_scale(data, stride, config))
    boxes = np.concatenate([d[0] for d in decode], axis=1)  # [B,P,4]
    cls_probs = np.concatenate([d[2] for d in decode], axis=1)
    table = _position_table(config)
    centers = np.array([(r[4], r[5]) for r in table])
    n_pos_total = len(table)
    out = {k: [] for k in ("scale", "b", "anchor", "gy", "gx")}
    gt_boxes_out, gt_cls_out = [], []
    for bi, (gtb, gtc) in enumerate(batch_gts):
        gtb = np.asarray(gtb, dtype=np.float64).reshape(-1, 4)
        gtc = np.asarray(gtc, dtype=np.int64).reshape(-1)
        if len(gtb) == 0:
            continue
        ious = _box_iou_matrix(boxes[bi], gtb)  # [P, G]
        owner = np.full(n_pos_total, -1, dtype=np.int64)
        owner_align = np.full(n_pos_total, -np.inf)
        for gi in range(len(gtb)):
            x1, y1, x2, y2 = gtb[gi]
            inside = ((centers[:, 0] > x1) & (centers[:, 0] < x2) &
                      (centers[:, 1] > y1) & (centers[:, 1] < y2))
            cand = np.nonzero(inside)[0]
            if len(cand) == 0:
                continue
            cand_iou = ious[cand, gi]
            k = int(np.clip(round(float(np.sort(cand_iou)[::-1][:10].sum())), 1, 10))
            align = cls_probs[bi, cand, gtc[gi]] * cand_iou
            top = cand[np.argsort(-align, kind="stable")[:k]]
            top_align = cls_probs[bi, top, gtc[gi]] * ious[top, gi]
            for pos, al in zip(top, top_align):
                if al > owner_align[pos]:
                    owner[pos] = gi
                    owner_align[pos] = al
        # Fallback: guarantee every gt at least one position.
        assigned_gts = set(owner[owner >= 0].tolist())
        for gi in range(len(gtb)):
            if gi in assigned_gts:
                continue
            free = owner < 0
            if not free.any():
                break
            cand = np.nonzero(free)[0]
            pos = cand[np.argmax(ious[cand, gi])]
            owner[pos] = gi
            owner_align[pos] = np.inf
        for pos in np.nonzero(owner >= 0)[0]:
            si, a, gy, gx, _, _ = table[pos]
            out["scale"].append(si)
            out["b"].append(bi)
            out["anchor"].append(a)
            out["gy"].append(gy)
            out["gx"].append(gx)
            gt_boxes_out.append(gtb[owner[pos]])
            gt_cls_out.append(gtc[owner[pos]])
    return Assignment(
        scale=np.array(out["scale"], dtype=np.int64),
        b=np.array(out["b"], dtype=np.int64),
        anchor=np.array(out["anchor"], dtype=np.int64),
        gy=np.array(out["gy"], dtype=np.int64),
        gx=np.array(out["gx"], dtype=np.int64),
        gt_boxes=(np.array(gt_boxes_out).reshape(-1, 4)
                  if gt_boxes_out else np.zeros((0, 4))),
        gt_cls=np.array(gt_cls_out, dtype=np.int64),
    )
