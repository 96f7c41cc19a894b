"""Dataset ingestion and generation: VOC XML annotations, procedural synthetic
boards, geometric/photometric augmentations, and the train/val split."""

from __future__ import annotations

import json
import xml.etree.ElementTree as ET
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path

import numpy as np
from PIL import Image

from .tensor import Tensor


class DefectClass(IntEnum):
    missing_hole = 0
    mouse_bite = 1
    open_circuit = 2
    short = 3
    spur = 4
    spurious_copper = 5


CLASS_NAMES = [c.name for c in DefectClass]

# Board palette (RGB): substrate, copper, drill hole, silkscreen.
_SUBSTRATE = np.array([23, 84, 44], dtype=np.uint8)
_COPPER = np.array([190, 150, 55], dtype=np.uint8)
_HOLE = np.array([15, 15, 15], dtype=np.uint8)
# Solder-filled pad (missing_hole archetype): lighter than plain copper.
_FILL = np.array([228, 196, 120], dtype=np.uint8)


class AnnotationError(ValueError):
    """Malformed or inconsistent VOC annotation."""


class UnknownClassError(AnnotationError):
    """Object name not present in the class map."""


@dataclass(frozen=True)
class Box:
    xmin: float
    ymin: float
    xmax: float
    ymax: float

    def __post_init__(self):
        if not (self.xmin < self.xmax and self.ymin < self.ymax):
            raise AnnotationError(
                f"inverted box ({self.xmin},{self.ymin},{self.xmax},{self.ymax})")

    @property
    def width(self) -> float:
        return self.xmax - self.xmin

    @property
    def height(self) -> float:
        return self.ymax - self.ymin

    @property
    def area(self) -> float:
        return self.width * self.height

    def as_array(self) -> np.ndarray:
        return np.array([self.xmin, self.ymin, self.xmax, self.ymax])


@dataclass
class AnnotatedImage:
    image: np.ndarray  # HxWx3 uint8
    boxes: list  # [(Box, DefectClass)]
    source: str = "real"  # real | synthetic | gan_composited
    id: str = ""

    def __post_init__(self):
        h, w = self.image.shape[:2]
        for box, _ in self.boxes:
            if box.xmin < 0 or box.ymin < 0 or box.xmax > w or box.ymax > h:
                raise AnnotationError(f"box {box} outside {w}x{h} image")


@dataclass
class VocRecord:
    filename: str
    width: int
    height: int
    boxes: list  # [(Box, DefectClass)]


DEFAULT_CLASS_MAP = {name: DefectClass(i) for i, name in enumerate(CLASS_NAMES)}


def parse_voc_annotation(xml_text: str, class_map: dict | None = None) -> VocRecord:
    """Parse one VOC XML annotation into filename/size/box metadata."""
    class_map = class_map or DEFAULT_CLASS_MAP
    try:
        root = ET.fromstring(xml_text)
    except ET.ParseError as e:
        raise AnnotationError(f"malformed XML at line {e.position[0]}: {e}") from e
    size = root.find("size")
    if size is None:
        raise AnnotationError("missing <size> element")
    width = int(float(size.findtext("width")))
    height = int(float(size.findtext("height")))
    filename = root.findtext("filename", default="")
    boxes = []
    for obj in root.findall("object"):
        name = obj.findtext("name")
        if name not in class_map:
            raise UnknownClassError(f"unknown defect class {name!r}")
        bnd = obj.find("bndbox")
        coords = [float(bnd.findtext(k)) for k in ("xmin", "ymin", "xmax", "ymax")]
        box = Box(*coords)
        if box.xmin < 0 or box.ymin < 0 or box.xmax > width or box.ymax > height:
            raise AnnotationError(f"box {coords} outside image {width}x{height}")
        boxes.append((box, class_map[name]))
    return VocRecord(filename=filename, width=width, height=height, boxes=boxes)


def serialize_voc_annotation(record: VocRecord) -> str:
    root = ET.Element("annotation")
    ET.SubElement(root, "filename").text = record.filename
    size = ET.SubElement(root, "size")
    ET.SubElement(size, "width").text = str(record.width)
    ET.SubElement(size, "height").text = str(record.height)
    ET.SubElement(size, "depth").text = "3"
    for box, cls in record.boxes:
        obj = ET.SubElement(root, "object")
        ET.SubElement(obj, "name").text = cls.name
        bnd = ET.SubElement(obj, "bndbox")
        for key, val in zip(("xmin", "ymin", "xmax", "ymax"), box.as_array()):
            ET.SubElement(bnd, key).text = repr(float(val))
    return ET.tostring(root, encoding="unicode")


def split_dataset(items, val_fraction: float, seed: int):
    """Deterministic shuffle-split into (train_ids, val_ids)."""
    items = list(items)
    if not items:
        raise ValueError("cannot split an empty item list")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie in (0, 1)")
    rng = np.random.default_rng(seed)
    order = rng.permutation(len(items))
    n_val = int(round(val_fraction * len(items)))
    val = [items[i] for i in order[:n_val]]
    train = [items[i] for i in order[n_val:]]
    return train, val


# ---- augmentations ------------------------------------------------------------


def _rotate90_box(box: Box, k: int, width: float, height: float) -> Box:
    """Corner map for k counterclockwise quarter turns: (x,y) -> (y, W-x)."""
    corners = [(box.xmin, box.ymin), (box.xmax, box.ymin),
               (box.xmin, box.ymax), (box.xmax, box.ymax)]
    w, h = width, height
    for _ in range(k):
        corners = [(y, w - x) for x, y in corners]
        w, h = h, w
    xs = [c[0] for c in corners]
    ys = [c[1] for c in corners]
    return Box(min(xs), min(ys), max(xs), max(ys))


def _nearest_resample(img: np.ndarray, new_h: int, new_w: int) -> np.ndarray:
    h, w = img.shape[:2]
    rows = np.minimum((np.arange(new_h) * h) // new_h, h - 1)
    cols = np.minimum((np.arange(new_w) * w) // new_w, w - 1)
    return img[rows][:, cols]


def apply_augmentations(img: AnnotatedImage, ops, seed: int = 0) -> AnnotatedImage:
    """Apply a sequence of rotate90(k)/scale(s)/contrast(c) ops with exact
    corner-mapped box transport; contrast leaves boxes untouched."""
    raster = img.image
    boxes = list(img.boxes)
    for op in ops:
        kind = op[0]
        if kind == "rotate90":
            k = int(op[1])
            if k not in (1, 2, 3):
                raise ValueError("rotate90 k must be in {1,2,3}")
            h, w = raster.shape[:2]
            raster = np.rot90(raster, k=k)
            boxes = [(_rotate90_box(b, k, w, h), c) for b, c in boxes]
        elif kind == "scale":
            s = float(op[1])
            if not 0.5 <= s <= 2.0:
                raise ValueError("scale factor must lie in [0.5, 2.0]")
            h, w = raster.shape[:2]
            new_h, new_w = int(round(h * s)), int(round(w * s))
            sy, sx = new_h / h, new_w / w
            raster = _nearest_resample(raster, new_h, new_w)
            boxes = [(Box(b.xmin * sx, b.ymin * sy, b.xmax * sx, b.ymax * sy), c)
                     for b, c in boxes]
        elif kind == "contrast":
            c = float(op[1])
            if not 0.5 <= c <= 1.5:
                raise ValueError("contrast factor must lie in [0.5, 1.5]")
            mean = raster.reshape(-1, 3).mean(axis=0)
            adjusted = np.round(mean + c * (raster.astype(np.float64) - mean))
            raster = np.clip(adjusted, 0, 255).astype(np.uint8)
        else:
            raise ValueError(f"unknown augmentation {kind!r}")
    return AnnotatedImage(image=raster, boxes=boxes, source=img.source,
                          id=img.id + "+aug")


# ---- procedural synthetic boards ----------------------------------------------


@dataclass
class SynthSpec:
    width: int = 96
    height: int = 96
    min_defects: int = 1
    max_defects: int = 3
    # Per-class sampling weights, index-aligned with DefectClass.
    class_weights: tuple = (1.0, 1.0, 1.0, 1.0, 1.0, 1.0)

    def __post_init__(self):
        if self.width < 64 or self.height < 64:
            raise ValueError("board must be at least 64x64")


def _disk_mask(h, w, cy, cx, r):
    yy, xx = np.ogrid[:h, :w]
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _blank_board(spec: SynthSpec, rng: np.random.Generator):
    """Substrate + vertical copper traces + pads with drill holes.

    Returns (raster, trace_centers, trace_halfwidth, pad_centers, pad_radius).
    """
    h, w = spec.height, spec.width
    img = np.empty((h, w, 3), dtype=np.uint8)
    img[:] = _SUBSTRATE
    noise = rng.integers(-6, 7, size=(h, w, 1))
    img = np.clip(img.astype(np.int16) + noise, 0, 255).astype(np.uint8)

    n_traces = 3 + int(rng.integers(0, 2))
    halfw = 2
    margin = 12
    xs = np.linspace(margin, w - margin, n_traces)
    xs = (xs + rng.integers(-3, 4, size=n_traces)).astype(int)
    for x in xs:
        img[:, x - halfw:x + halfw + 1] = _COPPER

    pad_r = 5
    hole_r = 2
    pads = []
    ys = np.arange(16, h - 12, 26) + int(rng.integers(-4, 5))
    for x in xs:
        for y in ys:
            if 8 <= y < h - 8:
                img[_disk_mask(h, w, y, x, pad_r)] = _COPPER
                img[_disk_mask(h, w, y, x, hole_r)] = _HOLE
                pads.append((int(y), int(x)))
    return img, list(xs), halfw, pads, pad_r


def _inject_defect(img, cls, rng, traces, halfw, pads, pad_r):
    """Draw one defect archetype; returns its ground-truth Box or None."""
    h, w = img.shape[:2]
    if cls == DefectClass.missing_hole and pads:
        y, x = pads[int(rng.integers(len(pads)))]
        img[_disk_mask(h, w, y, x, pad_r - 1)] = _FILL
        m = pad_r + 2
        return Box(max(x - m, 0), max(y - m, 0), min(x + m, w), min(y + m, h))
    if cls == DefectClass.mouse_bite:
        x = traces[int(rng.integers(len(traces)))]
        y = int(rng.integers(10, h - 10))
        r = int(rng.integers(3, 5))
        side = x + halfw if rng.random() < 0.5 else x - halfw
        img[_disk_mask(h, w, y, side, r)] = _SUBSTRATE
        return Box(max(side - r - 1, 0), max(y - r - 1, 0),
                   min(side + r + 1, w), min(y + r + 1, h))
    if cls == DefectClass.open_circuit:
        x = traces[int(rng.integers(len(traces)))]
        y = int(rng.integers(10, h - 14))
        gap = int(rng.integers(4, 9))
        img[y:y + gap, max(x - halfw - 1, 0):x + halfw + 2] = _SUBSTRATE
        return Box(max(x - halfw - 3, 0), max(y - 2, 0),
                   min(x + halfw + 4, w), min(y + gap + 2, h))
    if cls == DefectClass.short and len(traces) >= 2:
        i = int(rng.integers(len(traces) - 1))
        x1, x2 = sorted((traces[i], traces[i + 1]))
        y = int(rng.integers(12, h - 12))
        t = int(rng.integers(2, 4))
        img[y - t:y + t + 1, x1:x2 + 1] = _COPPER
        return Box(max(x1 - 2, 0), max(y - t - 2, 0),
                   min(x2 + 3, w), min(y + t + 3, h))
    if cls == DefectClass.spur:
        x = traces[int(rng.integers(len(traces)))]
        y = int(rng.integers(10, h - 10))
        length = int(rng.integers(5, 9))
        sign = 1 if rng.random() < 0.5 else -1
        for i in range(length):
            hw = max(1, (length - i) // 2)
            xi = x + sign * (halfw + i)
            if 0 <= xi < w:
                img[max(y - hw, 0):min(y + hw + 1, h), xi] = _COPPER
        x0, x1 = sorted((x + sign * halfw, x + sign * (halfw + length)))
        m = length // 2 + 2
        return Box(max(x0 - 1, 0), max(y - m, 0), min(x1 + 2, w), min(y + m + 1, h))
    if cls == DefectClass.spurious_copper:
        for _ in range(20):
            cx = int(rng.integers(8, w - 8))
            cy = int(rng.integers(8, h - 8))
            if all(abs(cx - tx) > halfw + 7 for tx in traces):
                break
        r = int(rng.integers(3, 6))
        img[_disk_mask(h, w, cy, cx, r)] = _COPPER
        img[_disk_mask(h, w, cy + 1, cx + r - 1, max(r - 2, 1))] = _COPPER
        m = r + 3
        return Box(max(cx - m, 0), max(cy - m, 0), min(cx + m, w), min(cy + m, h))
    return None


def synth_board(seed: int, spec: SynthSpec | None = None) -> AnnotatedImage:
    """Deterministic procedural PCB-like board with injected labeled defects."""
    spec = spec or SynthSpec()
    rng = np.random.default_rng(seed)
    img, traces, halfw, pads, pad_r = _blank_board(spec, rng)
    weights = np.asarray(spec.class_weights, dtype=np.float64)
    probs = weights / weights.sum()
    n = int(rng.integers(spec.min_defects, spec.max_defects + 1))
    boxes = []
    for _ in range(n):
        cls = DefectClass(int(rng.choice(len(probs), p=probs)))
        for _ in range(10):
            box = _inject_defect(img, cls, rng, traces, halfw, pads, pad_r)
            if box is None:
                break
            # Reject heavy overlap with an existing defect of another class.
            if all(_overlap_frac(box, b) < 0.3 for b, _ in boxes):
                boxes.append((box, cls))
                break
    return AnnotatedImage(image=img, boxes=boxes, source="synthetic",
                          id=f"synth-{seed}")


def _overlap_frac(a: Box, b: Box) -> float:
    ix = max(0.0, min(a.xmax, b.xmax) - max(a.xmin, b.xmin))
    iy = max(0.0, min(a.ymax, b.ymax) - max(a.ymin, b.ymin))
    return ix * iy / min(a.area, b.area)


def normalize_image(raster: np.ndarray) -> Tensor:
    """8-bit HxWx3 raster -> [1,3,H,W] tensor in [0,1]."""
    chw = raster.astype(np.float64).transpose(2, 0, 1) / 255.0
    return Tensor(chw[None])


# ---- on-disk dataset ----------------------------------------------------------


def save_image(path, raster: np.ndarray) -> None:
    Image.fromarray(raster, mode="RGB").save(path)


def load_image(path) -> np.ndarray:
    return np.asarray(Image.open(path).convert("RGB"))


def write_dataset(out_dir, images: list, val_fraction: float, seed: int) -> Path:
    """Write PNGs + VOC XMLs + a JSON manifest; returns the manifest path."""
    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "annotations").mkdir(parents=True, exist_ok=True)
    train_ids, val_ids = split_dataset([im.id for im in images], val_fraction, seed)
    split_of = {i: "train" for i in train_ids}
    split_of.update({i: "val" for i in val_ids})
    entries = []
    for im in images:
        img_path = out_dir / "images" / f"{im.id}.png"
        ann_path = out_dir / "annotations" / f"{im.id}.xml"
        save_image(img_path, im.image)
        rec = VocRecord(filename=img_path.name, width=im.image.shape[1],
                        height=im.image.shape[0], boxes=im.boxes)
        ann_path.write_text(serialize_voc_annotation(rec))
        entries.append({"id": im.id, "image_path": str(img_path),
                        "annotation_path": str(ann_path),
                        "split": split_of[im.id], "source": im.source})
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(entries, indent=2))
    return manifest_path


def load_dataset(manifest_path, split: str | None = None) -> list:
    """Load AnnotatedImages listed in a manifest, optionally one split."""
    entries = json.loads(Path(manifest_path).read_text())
    out = []
    for e in entries:
        if split is not None and e["split"] != split:
            continue
        rec = parse_voc_annotation(Path(e["annotation_path"]).read_text())
        out.append(AnnotatedImage(image=load_image(e["image_path"]),
                                  boxes=rec.boxes,
                                  source=e.get("source", "real"), id=e["id"]))
    return out
