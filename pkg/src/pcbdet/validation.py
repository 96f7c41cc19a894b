"""Input validation helpers for the estimator-facing API."""

from __future__ import annotations

import numpy as np

from .data import AnnotatedImage, Box, DefectClass


def check_raster(x) -> np.ndarray:
    """Validate one HxWx3 8-bit image."""
    arr = np.asarray(x)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"expected HxWx3 image, got shape {arr.shape}")
    if arr.dtype != np.uint8:
        if arr.min() < 0 or arr.max() > 255:
            raise ValueError("image values must lie in [0, 255]")
        arr = arr.astype(np.uint8)
    return arr


def check_targets(y, image_shape) -> list:
    """Validate one image's targets as [(Box, DefectClass)].

    Accepts either that form directly or a (boxes [N,4], labels [N]) pair.
    """
    h, w = image_shape[:2]
    if isinstance(y, tuple) and len(y) == 2:
        boxes, labels = y
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        labels = np.asarray(labels).reshape(-1)
        y = [(Box(*b), DefectClass(int(l))) for b, l in zip(boxes, labels)]
    out = []
    for box, cls in y:
        if not isinstance(box, Box):
            box = Box(*np.asarray(box, dtype=np.float64))
        cls = DefectClass(int(cls))
        if box.xmin < 0 or box.ymin < 0 or box.xmax > w or box.ymax > h:
            raise ValueError(f"box {box} outside {w}x{h} image")
        out.append((box, cls))
    return out


def to_annotated(X, y=None, source: str = "real") -> list:
    """Convert parallel (images, targets) lists to AnnotatedImages."""
    images = []
    for i, raster in enumerate(X):
        raster = check_raster(raster)
        boxes = check_targets(y[i], raster.shape) if y is not None else []
        images.append(AnnotatedImage(image=raster, boxes=boxes,
                                     source=source, id=f"img-{i}"))
    return images
