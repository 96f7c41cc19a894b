"""Sklearn-style estimator facade over the detector training loop."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator

from .detector import DetectorConfig
from .evaluate import map_range
from .losses import LossWeights
from .optim import NadamHyper
from .train import predict, train_detector
from .validation import to_annotated


class PCBDefectDetector(BaseEstimator):
    """Anchor-assisted single-stage defect detector with a fit/predict API.

    X is a list of HxWx3 uint8 rasters (all input_size square); y is a list of
    per-image targets, each either [(Box, DefectClass)] or a (boxes, labels)
    array pair. predict returns one dict per image with keys
    {"boxes", "scores", "classes"}.
    """

    def __init__(self, input_size=96, num_classes=6, epochs=30, batch_size=8,
                 lr=0.001, lr_min=1e-5, w_box=7.5, w_cls=0.5, w_dfl=1.5,
                 nms_iou=0.5, score_floor=0.05, seed=0):
        self.input_size = input_size
        self.num_classes = num_classes
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.lr_min = lr_min
        self.w_box = w_box
        self.w_cls = w_cls
        self.w_dfl = w_dfl
        self.nms_iou = nms_iou
        self.score_floor = score_floor
        self.seed = seed

    def fit(self, X, y, X_val=None, y_val=None):
        train_images = to_annotated(X, y)
        val_images = to_annotated(X_val, y_val) if X_val is not None else []
        config = DetectorConfig(input_size=self.input_size,
                                num_classes=self.num_classes)
        result = train_detector(
            train_images, val_images, config=config, epochs=self.epochs,
            batch_size=self.batch_size, seed=self.seed,
            hyper=NadamHyper(lr=self.lr), lr_min=self.lr_min,
            weights=LossWeights(self.w_box, self.w_cls, self.w_dfl),
            nms_iou=self.nms_iou, score_floor=self.score_floor)
        self.result_ = result
        self.curves_ = result.curves
        self.anchors_ = result.anchors
        self.thresholds_ = result.thresholds
        return self

    def predict(self, X, apply_thresholds: bool = False):
        self._check_fitted()
        images = to_annotated(X)
        thresholds = self.thresholds_ if apply_thresholds else None
        return predict(self.result_.params, self.result_.config, images,
                       nms_iou=self.nms_iou, score_floor=self.score_floor,
                       thresholds=thresholds)

    def score(self, X, y) -> float:
        """mAP@0.5 over the given set."""
        self._check_fitted()
        dets = self.predict(X)
        images = to_annotated(X, y)
        gts = [{"boxes": np.array([b.as_array() for b, _ in im.boxes]).reshape(-1, 4),
                "classes": np.array([int(c) for _, c in im.boxes])}
               for im in images]
        return map_range(dets, gts, num_classes=self.num_classes)["mAP50"]

    def _check_fitted(self):
        if not hasattr(self, "result_"):
            raise RuntimeError("estimator is not fitted; call fit first")
