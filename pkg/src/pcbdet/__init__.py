"""Desk-scale GAN-augmented PCB surface defect detection."""

from .data import AnnotatedImage, Box, DefectClass
from .detector import AnchorSet, DetectorConfig
from .estimator import PCBDefectDetector
from .evaluate import EvalReport
from .losses import LossWeights
from .optim import CosineSchedule, Nadam, NadamHyper
from .postprocess import ThresholdSet
from .tensor import Tensor

__version__ = "0.1.0"

__all__ = [
    "AnnotatedImage", "AnchorSet", "Box", "CosineSchedule", "DefectClass",
    "DetectorConfig", "EvalReport", "LossWeights", "Nadam", "NadamHyper",
    "PCBDefectDetector", "Tensor", "ThresholdSet",
]
