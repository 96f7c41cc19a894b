"""Detector training loop: Nadam + cosine annealing over the composite loss,
with per-epoch loss logging and post-training threshold calibration."""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .data import AnnotatedImage, normalize_image
from .detector import (AnchorSet, DetectorConfig, anchors_from_dataset,
                       assign_targets, decode_predictions, detector_forward,
                       init_detector_params)
from .losses import LossWeights, total_loss
from .optim import CosineSchedule, Nadam, NadamHyper, cosine_lr
from .postprocess import ThresholdSet, apply_nms, calibrate_thresholds


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss."""


@dataclass
class TrainResult:
    params: dict
    config: DetectorConfig
    anchors: AnchorSet
    thresholds: ThresholdSet
    curves: list  # per-epoch loss rows (train + val)


def _to_batch(images: list) -> Tensor:
    return Tensor(np.concatenate([normalize_image(im.image).data for im in images]))


def _gts_of(images: list):
    out = []
    for im in images:
        boxes = np.array([b.as_array() for b, _ in im.boxes]).reshape(-1, 4)
        classes = np.array([int(c) for _, c in im.boxes], dtype=np.int64)
        out.append((boxes, classes))
    return out


def _loss_on(images, params, config, anchors, weights):
    x = _to_batch(images)
    raw = detector_forward(x, params, config)
    assignment = assign_targets(_gts_of(images), anchors, raw, config)
    return total_loss(raw, assignment, config, weights)


def train_detector(train_images: list, val_images: list,
                   config: DetectorConfig | None = None,
                   epochs: int = 40, batch_size: int = 8, seed: int = 0,
                   hyper: NadamHyper | None = None, lr_min: float = 1e-5,
                   weights: LossWeights | None = None, nms_iou: float = 0.5,
                   score_floor: float = 0.05,
                   progress=None) -> TrainResult:
    config = config or DetectorConfig()
    hyper = hyper or NadamHyper()
    weights = weights or LossWeights()
    rng = np.random.default_rng(seed)

    anchors = anchors_from_dataset(train_images, config, seed=seed)
    params = init_detector_params(config, seed=seed)
    opt = Nadam(params, hyper)
    steps_per_epoch = max(1, (len(train_images) + batch_size - 1) // batch_size)
    sched = CosineSchedule(lr_max=hyper.lr, lr_min=lr_min,
                           total_steps=max(1, epochs * steps_per_epoch))

    curves = []
    step = 0
    for epoch in range(epochs):
        order = rng.permutation(len(train_images))
        epoch_losses = []
        for start in range(0, len(train_images), batch_size):
            batch = [train_images[i] for i in order[start:start + batch_size]]
            losses = _loss_on(batch, params, config, anchors, weights)
            total = losses["total"]
            if not np.isfinite(total.data):
                raise DivergenceError(f"non-finite loss at epoch {epoch}")
            total.backward()
            grads = {}
            for k, p in params.items():
                grads[k] = p.grad if p.grad is not None else np.zeros_like(p.data)
                p.grad = None
            opt.step(grads, lr=cosine_lr(step, sched))
            step += 1
            epoch_losses.append({k: float(losses[k].data)
                                 for k in ("box", "cls", "dfl", "total")})
        mean_of = lambda key: float(np.mean([e[key] for e in epoch_losses]))
        curves.append({"epoch": epoch, "split": "train",
                       "box_loss": mean_of("box"), "cls_loss": mean_of("cls"),
                       "dfl_loss": mean_of("dfl")})
        if val_images:
            vl = _loss_on(val_images, params, config, anchors, weights)
            curves.append({"epoch": epoch, "split": "val",
                           "box_loss": float(vl["box"].data),
                           "cls_loss": float(vl["cls"].data),
                           "dfl_loss": float(vl["dfl"].data)})
        if progress:
            progress(epoch, curves[-1], params, anchors)

    if val_images:
        dets = predict(params, config, val_images, nms_iou=nms_iou,
                       score_floor=score_floor)
        gts = [{"boxes": g[0], "classes": g[1]} for g in _gts_of(val_images)]
        thresholds = calibrate_thresholds(dets, gts, match_iou=0.5,
                                          num_classes=config.num_classes,
                                          nms_iou=nms_iou)
    else:
        thresholds = ThresholdSet.uniform(0.25, config.num_classes, nms_iou)
    return TrainResult(params=params, config=config, anchors=anchors,
                       thresholds=thresholds, curves=curves)


def predict(params: dict, config: DetectorConfig, images: list,
            nms_iou: float = 0.5, score_floor: float = 0.05,
            thresholds: ThresholdSet | None = None,
            chunk: int = 16) -> list:
    """Forward + decode + class-wise NMS (+ optional confidence filter)."""
    from .postprocess import filter_detections

    out = []
    for start in range(0, len(images), chunk):
        batch = images[start:start + chunk]
        raw = detector_forward(_to_batch(batch), params, config)
        dets = decode_predictions(raw, config, score_floor=score_floor)
        for det in dets:
            det = apply_nms(det, nms_iou)
            if thresholds is not None:
                det = filter_detections(det, thresholds)
            out.append(det)
    return out


# ---- checkpoint + sidecar -----------------------------------------------------


def save_detector(path, result: TrainResult) -> None:
    """Binary checkpoint plus a JSON sidecar with config/anchors/thresholds."""
    path = Path(path)
    T.save_checkpoint(path, result.params)
    sidecar = {"config": result.config.to_dict(),
               "anchors": result.anchors.to_list(),
               "thresholds": result.thresholds.to_dict()}
    path.with_suffix(".json").write_text(json.dumps(sidecar, indent=2))


def load_detector(path) -> TrainResult:
    path = Path(path)
    arrays = T.load_checkpoint(path)
    side = json.loads(path.with_suffix(".json").read_text())
    cfg_dict = dict(side["config"])
    cfg_dict["strides"] = tuple(cfg_dict["strides"])
    cfg_dict["dw_channels"] = tuple(cfg_dict["dw_channels"])
    config = DetectorConfig(**cfg_dict)
    params = {}
    for k, v in arrays.items():
        t = Tensor(v)
        t.requires_grad = True
        params[k] = t
    return TrainResult(params=params, config=config,
                       anchors=AnchorSet.from_list(side["anchors"]),
                       thresholds=ThresholdSet.from_dict(side["thresholds"]),
                       curves=[])
