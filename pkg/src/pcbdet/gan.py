"""Toy patch-level GAN for defect augmentation.

A small generator maps latents to 3xSxS defect patches (sigmoid head, so
outputs live in [0,1]); the discriminator is a strided conv stack to a single
logit. Trained patches are composited onto boards with exact synthetic labels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor
from .data import AnnotatedImage, Box, DefectClass, _nearest_resample
from .optim import Nadam, NadamHyper

_LOG_CLAMP = 1e-12


@dataclass
class GanConfig:
    latent_dim: int = 16
    patch_size: int = 32
    lr: float = 2e-4
    batch: int = 32
    steps: int = 2000
    seed: int = 0

    def __post_init__(self):
        s = self.patch_size
        if s < 16 or (s & (s - 1)) != 0:
            raise ValueError("patch_size must be a power of two >= 16")


class GanPair:
    """Generator + discriminator parameters with their own Nadam instances."""

    def __init__(self, config: GanConfig):
        self.config = config
        rng = np.random.default_rng(config.seed)
        s = config.patch_size
        self.n_up = int(np.log2(s // 4))
        g: dict = {}
        base = 32
        g["fc.w"] = T.he_normal((config.latent_dim, base * 4 * 4), rng,
                                fan_in=config.latent_dim)
        g["fc.b"] = _zeros(base * 4 * 4)
        ch = base
        for i in range(self.n_up):
            out = max(base // (2 ** (i + 1)), 8)
            g[f"up{i}.w"] = T.he_normal((out, ch, 3, 3), rng, fan_in=ch * 9)
            g[f"up{i}.b"] = _zeros(out)
            ch = out
        g["head.w"] = T.he_normal((3, ch, 3, 3), rng, fan_in=ch * 9)
        g["head.b"] = _zeros(3)
        self.G = g

        d: dict = {}
        widths = [16, 32, 64]
        ch = 3
        size = s
        for i, wdt in enumerate(widths):
            d[f"c{i}.w"] = T.he_normal((wdt, ch, 3, 3), rng, fan_in=ch * 9)
            d[f"c{i}.b"] = _zeros(wdt)
            ch = wdt
            size //= 2
        d["out.w"] = T.he_normal((1, ch, size, size), rng, fan_in=ch * size * size)
        d["out.b"] = _zeros(1)
        self.D = d

        hyper = NadamHyper(lr=config.lr, beta1=0.5)
        self.opt_G = Nadam(self.G, hyper)
        self.opt_D = Nadam(self.D, hyper)

    def named_tensors(self) -> dict:
        out = {f"G/{k}": v for k, v in self.G.items()}
        out.update({f"D/{k}": v for k, v in self.D.items()})
        return out

    def load_named(self, tensors: dict) -> None:
        for k, v in tensors.items():
            scope, name = k.split("/", 1)
            target = self.G if scope == "G" else self.D
            target[name].data = np.asarray(v, dtype=np.float64)


def _zeros(n):
    t = Tensor(np.zeros(n))
    t.requires_grad = True
    return t


def _bias(x, b):
    return x + b.reshape(1, -1, 1, 1)


def gan_generator_forward(z: Tensor, pair: GanPair) -> Tensor:
    """Latent batch [B, latent_dim] -> patches [B, 3, S, S] in [0, 1]."""
    cfg = pair.config
    if z.shape[-1] != cfg.latent_dim:
        raise ValueError(f"latent dim {z.shape[-1]} != {cfg.latent_dim}")
    g = pair.G
    y = T.matmul(z, g["fc.w"]) + g["fc.b"]
    y = y.reshape(z.shape[0], 32, 4, 4).leaky_relu(0.1)
    for i in range(pair.n_up):
        y = T.upsample_nearest(y, 2)
        y = _bias(T.conv2d(y, g[f"up{i}.w"], padding=1), g[f"up{i}.b"]).leaky_relu(0.1)
    y = _bias(T.conv2d(y, g["head.w"], padding=1), g["head.b"])
    return y.sigmoid()


def gan_discriminator_forward(x: Tensor, pair: GanPair) -> Tensor:
    """Patch batch -> logits [B]."""
    d = pair.D
    y = x
    for i in range(3):
        y = _bias(T.conv2d(y, d[f"c{i}.w"], stride=2, padding=1),
                  d[f"c{i}.b"]).leaky_relu(0.1)
    y = _bias(T.conv2d(y, d["out.w"], padding=0), d["out.b"])
    return y.reshape(y.shape[0])


def _bce_real_fake(d_real: Tensor, d_fake: Tensor) -> Tensor:
    """-mean[log D(x) + log(1 - D(G(z)))] on sigmoid probabilities."""
    p_real = d_real.sigmoid().maximum(_LOG_CLAMP)
    q_fake = (1.0 - d_fake.sigmoid()).maximum(_LOG_CLAMP)
    return -(p_real.log().mean() + q_fake.log().mean())


def gan_train_step(pair: GanPair, real_batch: Tensor, z: Tensor) -> dict:
    """One discriminator update then one non-saturating generator update."""
    if real_batch.shape[0] < 2:
        raise ValueError("GAN batch must contain at least 2 samples")
    fake = gan_generator_forward(z, pair)
    fake_const = Tensor(fake.data)

    d_real = gan_discriminator_forward(real_batch, pair)
    d_fake = gan_discriminator_forward(fake_const, pair)
    loss_d = _bce_real_fake(d_real, d_fake)
    loss_d.backward()
    grads_d = _collect_grads(pair.D)
    pair.opt_D.step(grads_d)

    fake2 = gan_generator_forward(z, pair)
    d_fake2 = gan_discriminator_forward(fake2, pair)
    loss_g = -(d_fake2.sigmoid().maximum(_LOG_CLAMP).log().mean())
    loss_g.backward()
    grads_g = _collect_grads(pair.G)
    pair.opt_G.step(grads_g)
    for p in pair.D.values():  # stale grads from the generator pass
        p.grad = None

    ld, lg = float(loss_d.data), float(loss_g.data)
    if not (np.isfinite(ld) and np.isfinite(lg)):
        raise FloatingPointError("non-finite GAN loss")
    return {"loss_D": ld, "loss_G": lg}


def _collect_grads(params: dict) -> dict:
    out = {}
    for k, p in params.items():
        out[k] = p.grad if p.grad is not None else np.zeros_like(p.data)
        p.grad = None
    return out


def gan_fidelity_stats(real: np.ndarray, fake: np.ndarray) -> dict:
    """Per-channel first/second moment gaps between two patch batches."""
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    if real.shape[1:] != fake.shape[1:]:
        raise ValueError("real/fake batches must share patch shape")
    d_mean = np.abs(real.mean(axis=(0, 2, 3)) - fake.mean(axis=(0, 2, 3)))
    d_std = np.abs(real.std(axis=(0, 2, 3)) - fake.std(axis=(0, 2, 3)))
    return {"d_mean": d_mean, "d_std": d_std,
            "moment_distance": float(d_mean.sum() + d_std.sum())}


def composite_defect(board: AnnotatedImage, patch: np.ndarray, location,
                     defect_class: DefectClass) -> AnnotatedImage:
    """Paste a [3,S,S] patch in [0,1] at (x, y) and append its exact label."""
    x, y = int(location[0]), int(location[1])
    s = patch.shape[-1]
    h, w = board.image.shape[:2]
    if x < 0 or y < 0 or x + s > w or y + s > h:
        raise ValueError(f"patch at ({x},{y}) size {s} exceeds {w}x{h} board")
    raster = board.image.copy()
    block = np.clip(np.round(np.asarray(patch) * 255.0), 0, 255).astype(np.uint8)
    raster[y:y + s, x:x + s] = block.transpose(1, 2, 0)
    boxes = list(board.boxes) + [(Box(x, y, x + s, y + s), defect_class)]
    return AnnotatedImage(image=raster, boxes=boxes, source="gan_composited",
                          id=board.id + "+gan")


def extract_defect_patches(images, defect_class: DefectClass, patch_size: int,
                           limit: int | None = None) -> np.ndarray:
    """Crop gt regions of one class and nearest-resize them to patch_size.

    Returns [N, 3, S, S] float64 in [0, 1].
    """
    out = []
    for im in images:
        for box, cls in im.boxes:
            if cls != defect_class:
                continue
            x1, y1 = int(np.floor(box.xmin)), int(np.floor(box.ymin))
            x2, y2 = int(np.ceil(box.xmax)), int(np.ceil(box.ymax))
            crop = im.image[y1:y2, x1:x2]
            if crop.size == 0:
                continue
            crop = _nearest_resample(crop, patch_size, patch_size)
            out.append(crop.astype(np.float64).transpose(2, 0, 1) / 255.0)
            if limit and len(out) >= limit:
                return np.stack(out)
    if not out:
        return np.zeros((0, 3, patch_size, patch_size))
    return np.stack(out)


def train_gan(patches: np.ndarray, config: GanConfig, log_every: int = 0,
              probe_every: int = 0, probe_batch: int = 64) -> tuple:
    """Train a GanPair on a patch bank; returns (pair, history).

    With probe_every > 0 the generator's channel moments are probed against a
    real sample every that many steps, and the generator snapshot with the
    smallest moment distance is restored at the end. Adversarial training at
    this scale oscillates, so picking the best probed snapshot rather than the
    final step makes the returned generator's fidelity stable.
    """
    pair = GanPair(config)
    rng = np.random.default_rng(config.seed + 1)
    probe_rng = np.random.default_rng(config.seed + 2)
    history = []
    n = len(patches)
    if n < 2:
        raise ValueError("need at least 2 real patches to train the GAN")
    best = (np.inf, None)
    for step in range(config.steps):
        idx = rng.integers(0, n, size=config.batch)
        real = Tensor(patches[idx])
        z = Tensor(rng.normal(size=(config.batch, config.latent_dim)))
        losses = gan_train_step(pair, real, z)
        if log_every and step % log_every == 0:
            history.append({"step": step, **losses})
        if probe_every and (step + 1) % probe_every == 0:
            z = Tensor(probe_rng.normal(size=(probe_batch, config.latent_dim)))
            fake = gan_generator_forward(z, pair).data
            sample = patches[probe_rng.integers(0, n, size=probe_batch)]
            dist = gan_fidelity_stats(sample, fake)["moment_distance"]
            if dist < best[0]:
                best = (dist, {k: v.data.copy() for k, v in pair.G.items()})
    if best[1] is not None:
        for k, v in best[1].items():
            pair.G[k].data = v
    return pair, history
