"""Toy single-scale detector on the slimkit graph model.

Head layout per grid cell (boxes_per_cell = 1):
channel 0 objectness logit, channels 1..C class logits, channels
C+1..C+4 box logits (sigmoid -> cell-relative cx, cy and image-relative
w, h).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from ..errors import ConfigError
from ..graph import GraphModel, NodeSpec
from ..metrics import BoxDet, iou

BOX_WEIGHT = 5.0


@dataclass
class ToyDetConfig:
    image_size: int = 96
    base_width: int = 8
    grid_stride: int = 8
    num_classes: int = 4
    conf_threshold: float = 0.25
    nms_iou: float = 0.45
    seed: int = 0

    def __post_init__(self):
        if self.image_size % self.grid_stride:
            raise ConfigError("grid_stride must divide image_size")
        if self.base_width < 1 or self.num_classes < 1:
            raise ConfigError("base_width and num_classes must be >= 1")


def _conv_bn_silu(nodes, rng, name, src, in_ch, out_ch, k, stride):
    fan_in = in_ch * k * k
    w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(out_ch, in_ch, k, k))
    nodes.append(NodeSpec(
        f"{name}_conv", "conv",
        {"in_ch": in_ch, "out_ch": out_ch, "kh": k, "kw": k,
         "stride": stride, "pad": k // 2},
        {"weight": w}, [src] if src else []))
    nodes.append(NodeSpec(
        f"{name}_bn", "batchnorm", {"ch": out_ch, "eps": 1e-5},
        {"gamma": np.ones(out_ch), "beta": np.zeros(out_ch),
         "running_mean": np.zeros(out_ch), "running_var": np.ones(out_ch)},
        [f"{name}_conv"]))
    nodes.append(NodeSpec(f"{name}_act", "silu", {}, {}, [f"{name}_bn"]))
    return f"{name}_act"


def build_toydet(cfg: ToyDetConfig) -> GraphModel:
    """stem + two downsampling blocks + one residual block + detect head.

    The residual block couples two BN layers at its add junction, so the
    graph always carries at least one coupling group.
    """
    if cfg.grid_stride != 8:
        raise ConfigError("toy detector is built for grid_stride 8")
    rng = np.random.default_rng(cfg.seed)
    w = cfg.base_width
    nodes = []
    t = _conv_bn_silu(nodes, rng, "stem", None, 3, w, 3, 2)
    t = _conv_bn_silu(nodes, rng, "down1", t, w, 2 * w, 3, 2)
    r = _conv_bn_silu(nodes, rng, "res1", t, 2 * w, 2 * w, 1, 1)
    r = _conv_bn_silu(nodes, rng, "res2", r, 2 * w, 2 * w, 3, 1)
    nodes.append(NodeSpec("res_add", "add", {}, {}, [t, r]))
    t = _conv_bn_silu(nodes, rng, "down2", "res_add", 2 * w, 4 * w, 3, 2)

    head_out = 1 * (5 + cfg.num_classes)
    hw = rng.normal(0.0, np.sqrt(2.0 / (4 * w)), size=(head_out, 4 * w, 1, 1))
    hb = np.zeros(head_out)
    hb[0] = -4.0  # objectness prior: mostly background
    nodes.append(NodeSpec(
        "head", "detect_head",
        {"in_ch": 4 * w, "classes": cfg.num_classes, "boxes": 1,
         "stride": 1, "pad": 0, "kh": 1, "kw": 1},
        {"weight": hw, "bias": hb}, [t]))

    model = GraphModel(
        name="toydet",
        input_shape=(3, cfg.image_size, cfg.image_size),
        nodes=nodes, outputs=["head"],
        classes=[f"class_{i}" for i in range(cfg.num_classes)])
    model.validate()
    return model


def head_layout(model: GraphModel):
    """(num_classes, stride, grid) of the single detect head."""
    head = next(n for n in model.nodes if n.kind == "detect_head")
    from ..graph import infer_shapes

    shapes = infer_shapes(model)
    grid = shapes[head.id][1]
    stride = model.input_shape[1] // grid
    return head.attrs["classes"], stride, grid


def build_targets(labels, num_classes: int, stride: int, grid: int):
    """Grid-cell target maps for one image.

    Assignment: object center cell, one object per cell, first label in
    row-major scan order wins on collision.
    """
    obj = np.zeros((grid, grid))
    cls = np.zeros((num_classes, grid, grid))
    box = np.zeros((4, grid, grid))
    img_size = stride * grid
    for class_id, (x1, y1, x2, y2) in labels:
        cx, cy = (x1 + x2) / 2.0, (y1 + y2) / 2.0
        j = min(int(cx // stride), grid - 1)
        i = min(int(cy // stride), grid - 1)
        if obj[i, j]:
            continue
        obj[i, j] = 1.0
        cls[class_id, i, j] = 1.0
        box[0, i, j] = cx / stride - j          # cell-relative center
        box[1, i, j] = cy / stride - i
        box[2, i, j] = (x2 - x1) / img_size     # image-relative size
        box[3, i, j] = (y2 - y1) / img_size
    return {"obj": obj, "cls": cls, "box": box}


def _sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _bce_with_logits(p, t):
    """Elementwise stable BCE and its gradient wrt the logit."""
    loss = np.maximum(p, 0.0) - p * t + np.log1p(np.exp(-np.abs(p)))
    grad = _sigmoid(p) - t
    return loss, grad


def det_loss(raw, targets):
    """(scalar loss, gradient wrt raw head output).

    BCE on objectness everywhere, BCE on class logits and weighted squared
    error on sigmoided box values at object cells; mean over the batch.
    """
    raw = np.asarray(raw, dtype=np.float64)
    b = raw.shape[0]
    num_classes = raw.shape[1] - 5
    obj_t = np.stack([t["obj"] for t in targets])
    cls_t = np.stack([t["cls"] for t in targets])
    box_t = np.stack([t["box"] for t in targets])

    grad = np.zeros_like(raw)
    obj_l, obj_g = _bce_with_logits(raw[:, 0], obj_t)
    grad[:, 0] = obj_g
    loss = obj_l.sum()

    mask = obj_t[:, None]  # (b,1,g,g)
    cls_l, cls_g = _bce_with_logits(raw[:, 1 : 1 + num_classes], cls_t)
    grad[:, 1 : 1 + num_classes] = cls_g * mask
    loss += (cls_l * mask).sum()

    box_p = raw[:, 1 + num_classes :]
    s = _sigmoid(box_p)
    box_mask = obj_t[:, None]
    diff = s - box_t
    loss += BOX_WEIGHT * ((diff ** 2) * box_mask).sum()
    grad[:, 1 + num_classes :] = (2.0 * BOX_WEIGHT * diff * s * (1.0 - s)
                                  * box_mask)

    return loss / b, grad / b


def decode_and_nms(raw, cfg: ToyDetConfig, image_ids=None):
    """Raw head output -> per-class NMS-filtered BoxDet list."""
    raw = np.asarray(raw, dtype=np.float64)
    b = raw.shape[0]
    num_classes = raw.shape[1] - 5
    grid = raw.shape[2]
    stride = cfg.image_size // grid
    if image_ids is None:
        image_ids = list(range(b))
    dets = []
    for bi in range(b):
        obj = _sigmoid(raw[bi, 0])
        cls = _sigmoid(raw[bi, 1 : 1 + num_classes])
        box = _sigmoid(raw[bi, 1 + num_classes :])
        cand = []
        for c in range(num_classes):
            score = obj * cls[c]
            for i, j in zip(*np.nonzero(score >= cfg.conf_threshold)):
                cx = (j + box[0, i, j]) * stride
                cy = (i + box[1, i, j]) * stride
                w = box[2, i, j] * cfg.image_size
                h = box[3, i, j] * cfg.image_size
                x1 = max(0.0, cx - w / 2)
                y1 = max(0.0, cy - h / 2)
                x2 = min(float(cfg.image_size), cx + w / 2)
                y2 = min(float(cfg.image_size), cy + h / 2)
                if x2 <= x1 or y2 <= y1:
                    continue
                cand.append(BoxDet(image_ids[bi], c, (x1, y1, x2, y2),
                                   float(score[i, j])))
        dets.extend(nms(cand, cfg.nms_iou))
    return dets


def nms(cands, iou_threshold: float):
    """Greedy per-class suppression of boxes overlapping a kept,
    higher-confidence box with IoU strictly above the threshold."""
    out = []
    by_class = {}
    for d in cands:
        by_class.setdefault(d.class_id, []).append(d)
    for c in sorted(by_class):
        pool = sorted(by_class[c], key=lambda d: -d.confidence)
        kept = []
        for d in pool:
            if all(iou(d.box, k.box) <= iou_threshold for k in kept):
                kept.append(d)
        out.extend(kept)
    return out
