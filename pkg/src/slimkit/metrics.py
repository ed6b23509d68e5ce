"""Detection evaluation: IoU matching, precision/recall/F-score, and
COCO-style mAP over IoU thresholds 0.50:0.05:0.95.

AP uses 101-point interpolation (mean of the interpolated precision at
recall 0.00, 0.01, ..., 1.00).  Classes with no ground truth anywhere in
the dataset are excluded from class averaging.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import InputError

IOU_RANGE = tuple(round(0.50 + 0.05 * i, 2) for i in range(10))
DEFAULT_CONF_CUT = 0.25
DEFAULT_PRF_IOU = 0.5


@dataclass
class BoxDet:
    image_id: object
    class_id: int
    box: tuple  # (x1, y1, x2, y2), x1 < x2, y1 < y2
    confidence: float = 1.0


@dataclass
class MatchCounts:
    tp: int = 0
    fp: int = 0
    fn: int = 0


@dataclass
class MetricsReport:
    ap_per_class: dict = field(default_factory=dict)  # class -> {thr: ap|None}
    map_per_threshold: dict = field(default_factory=dict)
    map50: float = 0.0
    map50_95: float = 0.0
    precision: float = 0.0
    recall: float = 0.0
    f_score: float = 0.0
    num_classes: int = 0

    def to_dict(self) -> dict:
        return {
            "map50": self.map50,
            "map50_95": self.map50_95,
            "precision": self.precision,
            "recall": self.recall,
            "f_score": self.f_score,
            "num_classes": self.num_classes,
            "map_per_threshold": {str(k): v for k, v in
                                  self.map_per_threshold.items()},
            "ap_per_class": {str(c): {str(t): ap for t, ap in d.items()}
                             for c, d in self.ap_per_class.items()},
        }

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


def iou(a, b) -> float:
    """Intersection-over-union of two corner-format boxes; 0 if disjoint
    or either box has zero area."""
    ax1, ay1, ax2, ay2 = a
    bx1, by1, bx2, by2 = b
    iw = min(ax2, bx2) - max(ax1, bx1)
    ih = min(ay2, by2) - max(ay1, by1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (ax2 - ax1) * (ay2 - ay1) + (bx2 - bx1) * (by2 - by1) - inter
    if union <= 0:
        return 0.0
    return inter / union


def match(dets, gts, iou_threshold: float):
    """Greedy confidence-ordered matching within (image, class) slices.

    Returns (MatchCounts, flags) where flags[i] is True iff dets[i]
    (original order) matched a ground truth.
    """
    gt_index = {}
    for j, g in enumerate(gts):
        gt_index.setdefault((g.image_id, g.class_id), []).append(j)

    order = sorted(range(len(dets)),
                   key=lambda i: -dets[i].confidence)  # stable: ties keep order
    matched_gt = set()
    flags = [False] * len(dets)
    for i in order:
        d = dets[i]
        best_j, best_iou = None, 0.0
        for j in gt_index.get((d.image_id, d.class_id), []):
            if j in matched_gt:
                continue
            v = iou(d.box, gts[j].box)
            if v >= iou_threshold and v > best_iou:
                best_j, best_iou = j, v
        if best_j is not None:
            matched_gt.add(best_j)
            flags[i] = True
    tp = sum(flags)
    return MatchCounts(tp=tp, fp=len(dets) - tp, fn=len(gts) - tp), flags


def prf(counts: MatchCounts):
    """(precision, recall, f_score); zero denominators yield 0."""
    p = counts.tp / (counts.tp + counts.fp) if counts.tp + counts.fp else 0.0
    r = counts.tp / (counts.tp + counts.fn) if counts.tp + counts.fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return p, r, f


def average_precision(flags, confidences, gt_count: int):
    """101-point interpolated AP from per-detection tp flags.

    Returns None (excluded from averaging) when there is nothing to score:
    gt_count == 0 and no detections.
    """
    if gt_count == 0 and not len(flags):
        return None
    if gt_count == 0:
        return 0.0
    order = sorted(range(len(flags)), key=lambda i: -confidences[i])
    tp_cum = fp_cum = 0
    precisions, recalls = [], []
    for i in order:
        if flags[i]:
            tp_cum += 1
        else:
            fp_cum += 1
        precisions.append(tp_cum / (tp_cum + fp_cum))
        recalls.append(tp_cum / gt_count)
    precisions = np.asarray(precisions)
    recalls = np.asarray(recalls)
    # precision envelope: max precision at recall >= r
    for i in range(len(precisions) - 2, -1, -1):
        precisions[i] = max(precisions[i], precisions[i + 1])
    ap = 0.0
    for r in np.linspace(0.0, 1.0, 101):
        idx = np.searchsorted(recalls, r, side="left")
        ap += precisions[idx] if idx < len(precisions) else 0.0
    return ap / 101.0


def map_range(dets, gts, thresholds=IOU_RANGE, num_classes=None,
              conf_cut=DEFAULT_CONF_CUT, prf_iou=DEFAULT_PRF_IOU):
    """Full MetricsReport over a detection/ground-truth set."""
    if num_classes is None:
        num_classes = max([g.class_id for g in gts] +
                          [d.class_id for d in dets], default=-1) + 1
    for d in list(dets) + list(gts):
        if not 0 <= d.class_id < num_classes:
            raise InputError(f"class id {d.class_id} outside [0, {num_classes})")

    rep = MetricsReport(num_classes=num_classes)
    gt_counts = {c: sum(1 for g in gts if g.class_id == c)
                 for c in range(num_classes)}
    for c in range(num_classes):
        rep.ap_per_class[c] = {}
        cdets = [d for d in dets if d.class_id == c]
        cgts = [g for g in gts if g.class_id == c]
        for thr in thresholds:
            _, flags = match(cdets, cgts, thr)
            rep.ap_per_class[c][thr] = average_precision(
                flags, [d.confidence for d in cdets], gt_counts[c])

    for thr in thresholds:
        aps = [rep.ap_per_class[c][thr] for c in range(num_classes)
               if rep.ap_per_class[c][thr] is not None]
        rep.map_per_threshold[thr] = float(np.mean(aps)) if aps else 0.0
    rep.map50 = rep.map_per_threshold.get(0.5, 0.0)
    rep.map50_95 = (float(np.mean(list(rep.map_per_threshold.values())))
                    if rep.map_per_threshold else 0.0)

    kept = [d for d in dets if d.confidence >= conf_cut]
    counts, _ = match(kept, gts, prf_iou)
    rep.precision, rep.recall, rep.f_score = prf(counts)
    return rep


# ---------------------------------------------------------------------------
# text-file ingestion (detector label convention)


def load_label_file(path, image_id, image_w: int, image_h: int,
                    with_confidence: bool = False):
    """Parse "class cx cy w h [conf]" lines with [0,1]-normalized coords."""
    out = []
    with open(path) as fh:
        for line_no, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (5, 6):
                raise InputError(f"{path}:{line_no}: expected 5 or 6 fields")
            cls = int(parts[0])
            cx, cy, w, h = (float(v) for v in parts[1:5])
            conf = float(parts[5]) if len(parts) == 6 else 1.0
            if with_confidence and len(parts) != 6:
                raise InputError(f"{path}:{line_no}: missing confidence")
            box = ((cx - w / 2) * image_w, (cy - h / 2) * image_h,
                   (cx + w / 2) * image_w, (cy + h / 2) * image_h)
            out.append(BoxDet(image_id, cls, box, conf))
    return out
