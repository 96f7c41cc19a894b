"""Detection metrics: greedy matching, 101-point interpolated AP, mAP50 and
mAP50-95, the per-class report table, and training-curve CSV emission."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass

import numpy as np

from .data import CLASS_NAMES
from .losses import iou

IOU_THRESHOLDS = tuple(np.round(np.arange(0.50, 0.96, 0.05), 2))

REPORT_COLUMNS = ("Class", "Images", "Instances", "P", "R", "mAP50", "mAP50-95")


def match_detections(dets: list, gts: list, iou_thresh: float):
    """Greedy per-image, per-class TP/FP flagging.

    dets/gts are lists over images of {boxes, scores?, classes}. Within each
    image and class, detections are taken in score-descending order (ties:
    input order); a detection is TP iff it matches a still-unmatched gt with
    IoU >= iou_thresh, choosing the highest-IoU gt (ties: lower gt index).

    Returns (flags, fn_counts): flags[i] is a bool array aligned with image
    i's detections; fn_counts[i] the number of unmatched gts in image i.
    """
    flags = []
    fn_counts = []
    for det, gt in zip(dets, gts):
        d_boxes = np.asarray(det["boxes"], dtype=np.float64).reshape(-1, 4)
        d_cls = np.asarray(det["classes"])
        d_scores = np.asarray(det["scores"], dtype=np.float64)
        g_boxes = np.asarray(gt["boxes"], dtype=np.float64).reshape(-1, 4)
        g_cls = np.asarray(gt["classes"])
        tp = np.zeros(len(d_boxes), dtype=bool)
        matched = np.zeros(len(g_boxes), dtype=bool)
        order = sorted(range(len(d_boxes)), key=lambda i: (-d_scores[i], i))
        for i in order:
            best_iou, best_j = 0.0, -1
            for j in range(len(g_boxes)):
                if matched[j] or g_cls[j] != d_cls[i]:
                    continue
                ov = iou(d_boxes[i], g_boxes[j])
                if ov > best_iou:
                    best_iou, best_j = ov, j
            if best_j >= 0 and best_iou >= iou_thresh:
                tp[i] = True
                matched[best_j] = True
        flags.append(tp)
        fn_counts.append(int((~matched).sum()))
    return flags, fn_counts


def average_precision(tp_flags: np.ndarray, n_gt: int) -> float:
    """101-point interpolated AP from score-ordered TP/FP flags."""
    if n_gt == 0:
        return 0.0
    tp_flags = np.asarray(tp_flags, dtype=bool)
    if len(tp_flags) == 0:
        return 0.0
    tp_cum = np.cumsum(tp_flags)
    fp_cum = np.cumsum(~tp_flags)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    grid = np.linspace(0.0, 1.0, 101)
    ap = 0.0
    for r in grid:
        mask = recall >= r - 1e-12
        ap += precision[mask].max() if mask.any() else 0.0
    return ap / 101.0


def _class_flags(dets, gts, cls, tau):
    """Score-ordered TP flags across all images for one class at one tau."""
    sub_dets, sub_gts = [], []
    for det, gt in zip(dets, gts):
        dm = np.asarray(det["classes"]) == cls
        gm = np.asarray(gt["classes"]) == cls
        sub_dets.append({"boxes": np.asarray(det["boxes"]).reshape(-1, 4)[dm],
                         "scores": np.asarray(det["scores"])[dm],
                         "classes": np.asarray(det["classes"])[dm]})
        sub_gts.append({"boxes": np.asarray(gt["boxes"]).reshape(-1, 4)[gm],
                        "classes": np.asarray(gt["classes"])[gm]})
    flags, _ = match_detections(sub_dets, sub_gts, tau)
    scores = np.concatenate([d["scores"] for d in sub_dets]) \
        if sub_dets else np.zeros(0)
    all_flags = np.concatenate([f for f in flags]) if flags else np.zeros(0, bool)
    order = np.argsort(-scores, kind="stable")
    n_gt = int(sum(len(g["classes"]) for g in sub_gts))
    return all_flags[order], scores[order], n_gt


def map_range(dets: list, gts: list, num_classes: int = 6) -> dict:
    """AP per class at each IoU threshold in 0.50:0.95:0.05, plus the means.

    Class means cover only classes present in the ground truth.
    """
    per_class = {}
    present = []
    for c in range(num_classes):
        n_gt = sum(int((np.asarray(g["classes"]) == c).sum()) for g in gts)
        aps = {}
        for tau in IOU_THRESHOLDS:
            flags, _, n = _class_flags(dets, gts, c, tau)
            aps[float(tau)] = average_precision(flags, n)
        per_class[c] = {"ap": aps, "n_gt": n_gt,
                        "ap50": aps[0.5],
                        "ap50_95": float(np.mean(list(aps.values())))}
        if n_gt > 0:
            present.append(c)
    map50 = float(np.mean([per_class[c]["ap50"] for c in present])) if present else 0.0
    map50_95 = float(np.mean([per_class[c]["ap50_95"] for c in present])) if present else 0.0
    return {"per_class": per_class, "mAP50": map50, "mAP50_95": map50_95,
            "present": present}


def _best_f1_pr(flags: np.ndarray, n_gt: int):
    """(P, R) at the F1-maximizing score cut given score-ordered flags."""
    if n_gt == 0 or len(flags) == 0:
        return 0.0, 0.0
    tp_cum = np.cumsum(flags)
    fp_cum = np.cumsum(~flags)
    prec = tp_cum / (tp_cum + fp_cum)
    rec = tp_cum / n_gt
    f1 = 2 * prec * rec / np.maximum(prec + rec, 1e-12)
    best = int(np.argmax(f1))
    return float(prec[best]), float(rec[best])


@dataclass
class EvalReport:
    rows: list  # dicts: class_name, images, instances, P, R, mAP50, mAP50_95

    def to_json(self) -> str:
        return json.dumps({"columns": list(REPORT_COLUMNS), "rows": self.rows},
                          indent=2)

    @staticmethod
    def from_json(text: str) -> "EvalReport":
        return EvalReport(rows=json.loads(text)["rows"])


def evaluate(dets: list, gts: list, num_classes: int = 6) -> EvalReport:
    """Full evaluation to the report schema.

    P and R per class are reported at the class's max-F1 confidence cut;
    the "all" row is the unweighted mean over classes present in the gts.
    """
    stats = map_range(dets, gts, num_classes)
    rows = []
    agg = {"P": [], "R": [], "mAP50": [], "mAP50_95": []}
    total_instances = 0
    for c in range(num_classes):
        n_gt = stats["per_class"][c]["n_gt"]
        images = sum(1 for g in gts if (np.asarray(g["classes"]) == c).any())
        flags, _, _ = _class_flags(dets, gts, c, 0.5)
        p, r = _best_f1_pr(flags, n_gt)
        row = {"class_name": CLASS_NAMES[c] if c < len(CLASS_NAMES) else str(c),
               "images": images, "instances": n_gt, "P": p, "R": r,
               "mAP50": stats["per_class"][c]["ap50"],
               "mAP50_95": stats["per_class"][c]["ap50_95"]}
        total_instances += n_gt
        if n_gt > 0:
            rows.append(row)
            for k in agg:
                agg[k].append(row[k])
    all_row = {"class_name": "all", "images": len(gts),
               "instances": total_instances,
               "P": float(np.mean(agg["P"])) if agg["P"] else 0.0,
               "R": float(np.mean(agg["R"])) if agg["R"] else 0.0,
               "mAP50": stats["mAP50"], "mAP50_95": stats["mAP50_95"]}
    return EvalReport(rows=[all_row] + rows)


def report_table(report: EvalReport) -> str:
    """Render the report rows as the fixed-column text table."""
    lines = ["\t".join(REPORT_COLUMNS)]
    for row in report.rows:
        lines.append("\t".join([
            row["class_name"], str(row["images"]), str(row["instances"]),
            f"{row['P']:.2f}", f"{row['R']:.2f}",
            f"{row['mAP50']:.2f}", f"{row['mAP50_95']:.2f}"]))
    return "\n".join(lines) + "\n"


def log_training_curves(epochs: list) -> str:
    """Serialize per-epoch loss components to CSV.

    epochs: list of {epoch, split, box_loss, cls_loss, dfl_loss} dicts.
    Values round-trip at full precision (repr floats).
    """
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["epoch", "split", "box_loss", "cls_loss", "dfl_loss"])
    for row in epochs:
        writer.writerow([row["epoch"], row["split"], repr(float(row["box_loss"])),
                         repr(float(row["cls_loss"])), repr(float(row["dfl_loss"]))])
    return buf.getvalue()


def parse_training_curves(text: str) -> list:
    rows = []
    reader = csv.DictReader(io.StringIO(text))
    for row in reader:
        rows.append({"epoch": int(row["epoch"]), "split": row["split"],
                     "box_loss": float(row["box_loss"]),
                     "cls_loss": float(row["cls_loss"]),
                     "dfl_loss": float(row["dfl_loss"])})
    return rows
