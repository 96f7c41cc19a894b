"""Run configuration: a fully serializable description of one pipeline run."""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, asdict, field
from pathlib import Path

# Validation fraction mirroring the source dataset's 66/1386 split; desk-scale
# synthetic runs override it (see RunConfig.val_fraction).
DEFAULT_VAL_FRACTION = 66.0 / 1386.0


def component_seed(master_seed: int, component: str) -> int:
    """Stable per-component seed: first 8 LE bytes of sha256("master:name")."""
    digest = hashlib.sha256(f"{master_seed}:{component}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


@dataclass
class RunConfig:
    out_dir: str = "runs/default"
    seed: int = 0
    # Dataset: either an existing manifest dir, or a synthetic spec.
    data_dir: str = ""
    synth_boards: int = 250
    synth_width: int = 96
    synth_height: int = 96
    synth_min_defects: int = 1
    synth_max_defects: int = 3
    # Index-aligned with DefectClass; default exercises 3 visually distinct
    # archetypes at desk scale.
    synth_class_weights: list = field(
        default_factory=lambda: [1.0, 0.0, 0.0, 1.0, 0.0, 1.0])
    val_fraction: float = 0.2
    augmentations: list = field(default_factory=list)  # list of [op, arg] seqs
    # Detector.
    input_size: int = 96
    num_classes: int = 6
    anchors_per_scale: int = 3
    dfl_bins: int = 8
    # Training.
    epochs: int = 40
    batch_size: int = 8
    lr: float = 0.001
    lr_min: float = 1e-5
    w_box: float = 7.5
    w_cls: float = 0.5
    w_dfl: float = 1.5
    # Post-processing.
    nms_iou: float = 0.5
    score_floor: float = 0.05
    # GAN augmentation.
    gan_latent_dim: int = 16
    gan_patch_size: int = 32
    gan_lr: float = 2e-4
    gan_batch: int = 32
    gan_steps: int = 800
    gan_fidelity_gate: float = 0.6
    augment_boards: int = 100

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    @staticmethod
    def from_json(text: str) -> "RunConfig":
        data = json.loads(text)
        known = {f for f in RunConfig.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return RunConfig(**data)

    @staticmethod
    def load(path) -> "RunConfig":
        return RunConfig.from_json(Path(path).read_text())

    def config_hash(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()[:16]

    def stamp(self) -> dict:
        return {"config_hash": self.config_hash(), "seed": self.seed}
