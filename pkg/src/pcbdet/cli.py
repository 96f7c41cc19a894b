"""Command-line pipeline: synth-data, train-gan, augment, train, eval, detect,
report. Every command echoes its exact RunConfig and a config-hash/seed stamp
into the output directory so runs are reproducible from (config, seed) alone.

Exit codes: 0 ok, 2 usage error, 3 training divergence.
"""

from __future__ import annotations

import json
import os
import sys
from pathlib import Path

import click
import numpy as np

from .config import RunConfig, component_seed
from .data import (AnnotatedImage, DefectClass, SynthSpec, load_dataset,
                   parse_voc_annotation, save_image, serialize_voc_annotation,
                   synth_board, write_dataset, VocRecord)
from .detector import DetectorConfig
from .evaluate import (EvalReport, evaluate, log_training_curves, report_table)
from .gan import (GanConfig, GanPair, composite_defect, extract_defect_patches,
                  gan_fidelity_stats, gan_generator_forward, train_gan)
from .losses import LossWeights
from .optim import NadamHyper
from .postprocess import ThresholdSet
from .tensor import Tensor, save_checkpoint
from .train import (DivergenceError, TrainResult, load_detector, predict,
                    save_detector, train_detector)


def _load_config(config_path, seed, epochs, nms_iou, out) -> RunConfig:
    cfg = RunConfig.load(config_path) if config_path else RunConfig()
    if seed is not None:
        cfg.seed = seed
    if epochs is not None:
        cfg.epochs = epochs
    if nms_iou is not None:
        cfg.nms_iou = nms_iou
    if out is not None:
        cfg.out_dir = out
    return cfg


def _prepare_out(cfg: RunConfig) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json())
    (out / "stamp.json").write_text(json.dumps(cfg.stamp(), indent=2))
    return out


def _dataset_dir(cfg: RunConfig) -> Path:
    d = Path(cfg.data_dir) if cfg.data_dir else Path(cfg.out_dir) / "dataset"
    if not (d / "manifest.json").exists():
        raise click.UsageError(f"no dataset manifest under {d}")
    return d


def _detector_config(cfg: RunConfig) -> DetectorConfig:
    return DetectorConfig(input_size=cfg.input_size, num_classes=cfg.num_classes,
                          anchors_per_scale=cfg.anchors_per_scale,
                          dfl_bins=cfg.dfl_bins)


def _gts_of(images):
    return [{"boxes": np.array([b.as_array() for b, _ in im.boxes]).reshape(-1, 4),
             "classes": np.array([int(c) for _, c in im.boxes], dtype=np.int64)}
            for im in images]


_shared = [
    click.option("--config", "config_path", type=click.Path(exists=True),
                 default=None, help="JSON RunConfig file"),
    click.option("--seed", type=int, default=None, help="master seed override"),
    click.option("--epochs", type=int, default=None),
    click.option("--nms-iou", type=float, default=None),
    click.option("--out", type=click.Path(), default=None,
                 help="output directory override"),
    click.option("--deterministic", is_flag=True, default=False,
                 help="pin BLAS to one thread"),
]


def shared_options(fn):
    for opt in reversed(_shared):
        fn = opt(fn)
    return fn


def _apply_determinism(deterministic: bool):
    if deterministic:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS",
                    "MKL_NUM_THREADS"):
            os.environ[var] = "1"


@click.group()
def main():
    """Desk-scale GAN-augmented PCB defect detection pipeline."""


@main.command("synth-data")
@shared_options
def synth_data_cmd(config_path, seed, epochs, nms_iou, out, deterministic):
    """Generate a procedural synthetic dataset with VOC annotations."""
    _apply_determinism(deterministic)
    cfg = _load_config(config_path, seed, epochs, nms_iou, out)
    out_dir = _prepare_out(cfg)
    spec = SynthSpec(width=cfg.synth_width, height=cfg.synth_height,
                     min_defects=cfg.synth_min_defects,
                     max_defects=cfg.synth_max_defects,
                     class_weights=tuple(cfg.synth_class_weights))
    base = component_seed(cfg.seed, "synth")
    images = [synth_board((base + i) % 2**63, spec)
              for i in range(cfg.synth_boards)]
    # Board ids must be unique even when seeds wrap.
    for i, im in enumerate(images):
        im.id = f"board-{i:05d}"
    manifest = write_dataset(out_dir / "dataset", images, cfg.val_fraction,
                             component_seed(cfg.seed, "split"))
    click.echo(f"wrote {len(images)} boards -> {manifest}")


@main.command("train-gan")
@shared_options
def train_gan_cmd(config_path, seed, epochs, nms_iou, out, deterministic):
    """Train one patch GAN per defect class present in the train split."""
    _apply_determinism(deterministic)
    cfg = _load_config(config_path, seed, epochs, nms_iou, out)
    out_dir = _prepare_out(cfg)
    train_images = load_dataset(_dataset_dir(cfg) / "manifest.json", "train")
    stats_all = {}
    for cls in DefectClass:
        patches = extract_defect_patches(train_images, cls, cfg.gan_patch_size)
        if len(patches) < 4:
            continue
        gcfg = GanConfig(latent_dim=cfg.gan_latent_dim,
                         patch_size=cfg.gan_patch_size, lr=cfg.gan_lr,
                         batch=cfg.gan_batch, steps=cfg.gan_steps,
                         seed=component_seed(cfg.seed, f"gan-{cls.name}") % 2**32)
        pair, _ = train_gan(patches, gcfg, probe_every=50)
        save_checkpoint(out_dir / f"gan_{cls.name}.pcbd", pair.named_tensors())
        rng = np.random.default_rng(gcfg.seed + 2)
        z = Tensor(rng.normal(size=(64, gcfg.latent_dim)))
        fake = gan_generator_forward(z, pair).data
        idx = rng.integers(0, len(patches), size=64)
        stats = gan_fidelity_stats(patches[idx], fake)
        stats_all[cls.name] = {"d_mean": stats["d_mean"].tolist(),
                               "d_std": stats["d_std"].tolist(),
                               "moment_distance": stats["moment_distance"]}
        click.echo(f"{cls.name}: moment_distance={stats['moment_distance']:.3f}")
    (out_dir / "gan_stats.json").write_text(json.dumps(stats_all, indent=2))


@main.command("augment")
@shared_options
def augment_cmd(config_path, seed, epochs, nms_iou, out, deterministic):
    """Composite GAN patches onto train boards (fidelity gate permitting)."""
    _apply_determinism(deterministic)
    cfg = _load_config(config_path, seed, epochs, nms_iou, out)
    out_dir = _prepare_out(cfg)
    data_dir = _dataset_dir(cfg)
    manifest_path = data_dir / "manifest.json"
    entries = json.loads(manifest_path.read_text())
    train_images = load_dataset(manifest_path, "train")
    stats_path = out_dir / "gan_stats.json"
    if not stats_path.exists():
        raise click.UsageError("run train-gan before augment")
    stats = json.loads(stats_path.read_text())
    eligible = [DefectClass[name] for name, s in stats.items()
                if s["moment_distance"] <= cfg.gan_fidelity_gate]
    if not eligible:
        click.echo("no GAN passed the fidelity gate; nothing to augment")
        return
    rng = np.random.default_rng(component_seed(cfg.seed, "augment"))
    added = 0
    for i in range(cfg.augment_boards):
        cls = eligible[int(rng.integers(len(eligible)))]
        ckpt = out_dir / f"gan_{cls.name}.pcbd"
        gcfg = GanConfig(latent_dim=cfg.gan_latent_dim,
                         patch_size=cfg.gan_patch_size)
        pair = GanPair(gcfg)
        from .tensor import load_checkpoint
        pair.load_named(load_checkpoint(ckpt))
        board = train_images[int(rng.integers(len(train_images)))]
        z = Tensor(rng.normal(size=(1, gcfg.latent_dim)))
        patch = gan_generator_forward(z, pair).data[0]
        s = gcfg.patch_size
        h, w = board.image.shape[:2]
        x = int(rng.integers(0, w - s + 1))
        y = int(rng.integers(0, h - s + 1))
        comp = composite_defect(board, patch, (x, y), cls)
        comp.id = f"ganaug-{i:05d}"
        img_path = data_dir / "images" / f"{comp.id}.png"
        ann_path = data_dir / "annotations" / f"{comp.id}.xml"
        save_image(img_path, comp.image)
        rec = VocRecord(filename=img_path.name, width=w, height=h,
                        boxes=comp.boxes)
        ann_path.write_text(serialize_voc_annotation(rec))
        entries.append({"id": comp.id, "image_path": str(img_path),
                        "annotation_path": str(ann_path), "split": "train",
                        "source": "gan_composited"})
        added += 1
    manifest_path.write_text(json.dumps(entries, indent=2))
    click.echo(f"appended {added} gan-composited boards")


@main.command("train")
@shared_options
def train_cmd(config_path, seed, epochs, nms_iou, out, deterministic):
    """Train the detector; emits checkpoint, thresholds.json, curves.csv."""
    _apply_determinism(deterministic)
    cfg = _load_config(config_path, seed, epochs, nms_iou, out)
    out_dir = _prepare_out(cfg)
    manifest = _dataset_dir(cfg) / "manifest.json"
    train_images = load_dataset(manifest, "train")
    val_images = load_dataset(manifest, "val")
    dcfg = _detector_config(cfg)
    ckpt_path = out_dir / "checkpoint.pcbd"

    def checkpoint_cb(epoch, row, params, anchors):
        interim = TrainResult(params=params, config=dcfg, anchors=anchors,
                              thresholds=ThresholdSet.uniform(
                                  0.25, dcfg.num_classes, cfg.nms_iou),
                              curves=[])
        save_detector(ckpt_path, interim)

    try:
        result = train_detector(
            train_images, val_images, config=dcfg, epochs=cfg.epochs,
            batch_size=cfg.batch_size, seed=component_seed(cfg.seed, "train"),
            hyper=NadamHyper(lr=cfg.lr), lr_min=cfg.lr_min,
            weights=LossWeights(cfg.w_box, cfg.w_cls, cfg.w_dfl),
            nms_iou=cfg.nms_iou, score_floor=cfg.score_floor,
            progress=checkpoint_cb)
    except DivergenceError as e:
        click.echo(f"training diverged: {e}; last-good checkpoint retained",
                   err=True)
        sys.exit(3)
    save_detector(ckpt_path, result)
    (out_dir / "thresholds.json").write_text(
        json.dumps(result.thresholds.to_dict(), indent=2))
    (out_dir / "curves.csv").write_text(log_training_curves(result.curves))
    click.echo(f"trained {cfg.epochs} epochs -> {ckpt_path}")


@main.command("eval")
@shared_options
@click.option("--split", default="val", show_default=True)
def eval_cmd(config_path, seed, epochs, nms_iou, out, deterministic, split):
    """Evaluate a checkpoint; emits report.txt and report.json."""
    _apply_determinism(deterministic)
    cfg = _load_config(config_path, seed, epochs, nms_iou, out)
    out_dir = _prepare_out(cfg)
    ckpt = out_dir / "checkpoint.pcbd"
    if not ckpt.exists():
        raise click.UsageError(f"no checkpoint at {ckpt}")
    result = load_detector(ckpt)
    images = load_dataset(_dataset_dir(cfg) / "manifest.json", split)
    dets = predict(result.params, result.config, images,
                   nms_iou=cfg.nms_iou, score_floor=cfg.score_floor)
    report = evaluate(dets, _gts_of(images), result.config.num_classes)
    (out_dir / "report.json").write_text(report.to_json())
    (out_dir / "report.txt").write_text(report_table(report))
    click.echo(report_table(report).rstrip())


@main.command("detect")
@shared_options
@click.option("--split", default="val", show_default=True)
def detect_cmd(config_path, seed, epochs, nms_iou, out, deterministic, split):
    """Run thresholded inference; one detection JSON per image."""
    _apply_determinism(deterministic)
    cfg = _load_config(config_path, seed, epochs, nms_iou, out)
    out_dir = _prepare_out(cfg)
    ckpt = out_dir / "checkpoint.pcbd"
    if not ckpt.exists():
        raise click.UsageError(f"no checkpoint at {ckpt}")
    result = load_detector(ckpt)
    images = load_dataset(_dataset_dir(cfg) / "manifest.json", split)
    dets = predict(result.params, result.config, images,
                   nms_iou=cfg.nms_iou, score_floor=cfg.score_floor,
                   thresholds=result.thresholds)
    det_dir = out_dir / "detections"
    det_dir.mkdir(exist_ok=True)
    for im, det in zip(images, dets):
        payload = {"id": im.id,
                   "detections": [
                       {"box": det["boxes"][i].tolist(),
                        "score": float(det["scores"][i]),
                        "class": DefectClass(int(det["classes"][i])).name}
                       for i in range(len(det["scores"]))]}
        (det_dir / f"{im.id}.json").write_text(json.dumps(payload, indent=2))
    click.echo(f"wrote {len(images)} detection files -> {det_dir}")


@main.command("report")
@shared_options
def report_cmd(config_path, seed, epochs, nms_iou, out, deterministic):
    """Re-render report.txt from report.json."""
    cfg = _load_config(config_path, seed, epochs, nms_iou, out)
    out_dir = Path(cfg.out_dir)
    src = out_dir / "report.json"
    if not src.exists():
        raise click.UsageError(f"no report.json at {src}")
    report = EvalReport.from_json(src.read_text())
    (out_dir / "report.txt").write_text(report_table(report))
    click.echo(report_table(report).rstrip())


if __name__ == "__main__":
    main()
