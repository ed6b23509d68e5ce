"""Training and evaluation loops for detector graphs.

run_training is shared by plain training, sparse training (l1_lambda > 0
adds the lambda*sign(gamma) subgradient to every BN scale gradient), and
fine-tuning (keep_best returns the best-by-validation-mAP checkpoint).
"""

from __future__ import annotations

import csv
import math

import numpy as np

from .. import executor
from ..errors import TrainingError
from ..graph import GraphModel
from ..metrics import BoxDet, map_range
from ..runtime import OptState
from .toydet import (ToyDetConfig, build_targets, decode_and_nms, det_loss,
                     head_layout)


def _gamma_arrays(model: GraphModel):
    return [(n.id, n.params["gamma"]) for n in model.nodes
            if n.kind == "batchnorm"]


def _gamma_stats(model: GraphModel):
    gammas = np.concatenate([g for _, g in _gamma_arrays(model)])
    a = np.abs(gammas)
    return float(np.median(a)), float((a < 0.01).mean()), float(a.sum())


def run_training(model: GraphModel, train_set, cfg, l1_lambda: float = 0.0,
                 val_set=None, keep_best: bool = False):
    """Train a copy of the model; returns (trained model, epoch log).

    train_set/val_set: (image (3,h,w), labels) samples as produced by
    scenes.load_split.  The epoch log records task loss, the L1 penalty
    value, and gamma sparsity statistics.
    """
    model = model.copy()
    num_classes, stride, grid = head_layout(model)
    targets = [build_targets(labels, num_classes, stride, grid)
               for _, labels in train_set]
    images = [img for img, _ in train_set]

    rng = np.random.default_rng(cfg.seed)
    opt = OptState(learning_rate=cfg.learning_rate,
                   momentum=getattr(cfg, "momentum", 0.9))
    log = []
    best = None
    best_map = -1.0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(images))
        epoch_loss = 0.0
        n_batches = 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            batch = np.stack([images[i] for i in idx])
            batch_t = [targets[i] for i in idx]
            outs, rec = executor.forward(model, batch, mode="train",
                                         record=True)
            loss, dout = det_loss(outs[0], batch_t)
            if not math.isfinite(loss):
                raise TrainingError(f"loss diverged at epoch {epoch}")
            grads, _ = executor.backward(rec, [dout])
            if l1_lambda > 0.0:
                for nid, gamma in _gamma_arrays(model):
                    grads[(nid, "gamma")] = (grads[(nid, "gamma")]
                                             + l1_lambda * np.sign(gamma))
            for nid, pname, arr in executor.trainable_params(model):
                opt.step((nid, pname), arr, grads[(nid, pname)])
            epoch_loss += loss
            n_batches += 1

        median_abs, frac_small, gamma_l1 = _gamma_stats(model)
        entry = {"epoch": epoch,
                 "task_loss": epoch_loss / max(n_batches, 1),
                 "penalty": l1_lambda * gamma_l1,
                 "median_abs_gamma": median_abs,
                 "frac_below_0.01": frac_small}
        if val_set is not None and keep_best:
            rep = evaluate(model, val_set)
            entry["val_map50"] = rep.map50
            if rep.map50 > best_map:
                best_map = rep.map50
                best = model.copy()
        log.append(entry)

    if keep_best and best is not None:
        return best, log
    return model, log


def evaluate(model: GraphModel, dataset, conf_threshold: float = 0.25,
             nms_iou: float = 0.45, batch_size: int = 16):
    """Inference + decode + NMS + full metrics over a labeled dataset."""
    num_classes, stride, grid = head_layout(model)
    image_size = model.input_shape[1]
    cfg = ToyDetConfig(image_size=image_size, num_classes=num_classes,
                       conf_threshold=conf_threshold, nms_iou=nms_iou)
    dets, gts = [], []
    for start in range(0, len(dataset), batch_size):
        chunk = dataset[start : start + batch_size]
        batch = np.stack([img for img, _ in chunk])
        ids = list(range(start, start + len(chunk)))
        outs, _ = executor.forward(model, batch, mode="inference")
        dets.extend(decode_and_nms(outs[0], cfg, image_ids=ids))
        for img_id, (_, labels) in zip(ids, chunk):
            gts.extend(BoxDet(img_id, cls, box) for cls, box in labels)
    return map_range(dets, gts, num_classes=num_classes)


def write_epoch_log(log, path) -> None:
    """CSV: epoch, median_abs_gamma, frac_below_0.01, task_loss, penalty."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["epoch", "median_abs_gamma", "frac_below_0.01",
                         "task_loss", "penalty"])
        for entry in log:
            writer.writerow([entry["epoch"], entry["median_abs_gamma"],
                             entry["frac_below_0.01"], entry["task_loss"],
                             entry["penalty"]])
