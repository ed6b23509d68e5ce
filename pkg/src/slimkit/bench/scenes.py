"""Synthetic labeled scenes: one distinct filled shape per class on a
noisy, optionally cluttered background.  Generation is pure in
(config, seed); identical seeds produce byte-identical datasets."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
from PIL import Image

from ..errors import ConfigError, InputError

# class id -> (shape, base RGB color)
CLASS_STYLES = [
    ("circle", (220, 60, 50)),
    ("square", (60, 190, 70)),
    ("triangle", (70, 90, 220)),
    ("cross", (230, 200, 40)),
    ("diamond", (200, 70, 200)),
    ("ring", (60, 200, 200)),
]

BACKGROUND = 30.0  # dark gray base


@dataclass
class SceneConfig:
    image_size: int = 96
    num_classes: int = 4
    min_objects: int = 1
    max_objects: int = 3
    clutter: float = 0.05
    noise_sigma: float = 2.0
    seed: int = 0

    def __post_init__(self):
        if self.image_size < 32:
            raise ConfigError("image_size must be >= 32")
        if not 2 <= self.num_classes <= len(CLASS_STYLES):
            raise ConfigError(f"num_classes must lie in [2, {len(CLASS_STYLES)}]")
        if not 0.0 <= self.clutter <= 1.0:
            raise ConfigError("clutter must lie in [0, 1]")
        if not 1 <= self.min_objects <= self.max_objects:
            raise ConfigError("need 1 <= min_objects <= max_objects")


def _shape_mask(shape: str, size: int) -> np.ndarray:
    """Boolean mask of a filled shape on a size x size patch."""
    y, x = np.mgrid[0:size, 0:size]
    c = (size - 1) / 2.0
    r = size / 2.0
    if shape == "circle":
        return (x - c) ** 2 + (y - c) ** 2 <= r * r
    if shape == "square":
        return np.ones((size, size), dtype=bool)
    if shape == "triangle":
        # upward triangle: apex top-center, full-width base
        return (np.abs(x - c) <= (y + 1) / 2.0)
    if shape == "cross":
        arm = max(size // 3, 2)
        m = np.zeros((size, size), dtype=bool)
        lo = (size - arm) // 2
        m[lo : lo + arm, :] = True
        m[:, lo : lo + arm] = True
        return m
    if shape == "diamond":
        return np.abs(x - c) + np.abs(y - c) <= r
    if shape == "ring":
        d2 = (x - c) ** 2 + (y - c) ** 2
        return (d2 <= r * r) & (d2 >= (0.45 * size) ** 2 * 0.25)
    raise ConfigError(f"unknown shape {shape!r}")


def _render_scene(cfg: SceneConfig, rng: np.random.Generator):
    """One (image uint8 HxWx3, labels) pair; labels are (class_id, box_px)."""
    s = cfg.image_size
    img = np.full((s, s, 3), BACKGROUND, dtype=np.float64)

    for _ in range(int(round(cfg.clutter * 8))):
        cw = int(rng.integers(3, max(4, s // 8)))
        cx = int(rng.integers(0, s - cw))
        cy = int(rng.integers(0, s - cw))
        shade = rng.uniform(10, 70)
        img[cy : cy + cw, cx : cx + cw] = shade

    n_obj = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    labels = []
    boxes = []
    for _ in range(n_obj):
        cls = int(rng.integers(0, cfg.num_classes))
        for _attempt in range(20):
            size = int(rng.integers(s // 6, s // 3 + 1))
            x0 = int(rng.integers(1, s - size - 1))
            y0 = int(rng.integers(1, s - size - 1))
            cand = (x0, y0, x0 + size, y0 + size)
            if all(_box_iou(cand, b) < 0.2 for b in boxes):
                break
        else:
            continue
        shape, color = CLASS_STYLES[cls]
        mask = _shape_mask(shape, size)
        jitter = rng.uniform(-20, 20, size=3)
        patch_color = np.clip(np.asarray(color, dtype=np.float64) + jitter, 40, 255)
        region = img[y0 : y0 + size, x0 : x0 + size]
        region[mask] = patch_color
        ys, xs = np.nonzero(mask)
        tight = (x0 + xs.min(), y0 + ys.min(), x0 + xs.max() + 1, y0 + ys.max() + 1)
        boxes.append(tight)
        labels.append((cls, tight))

    if cfg.noise_sigma > 0:
        img += rng.normal(0.0, cfg.noise_sigma, size=img.shape)
    return np.clip(img, 0, 255).astype(np.uint8), labels


def _box_iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / ((a[2] - a[0]) * (a[3] - a[1]) +
                    (b[2] - b[0]) * (b[3] - b[1]) - inter)


def _write_label_file(path, labels, image_size: int) -> None:
    lines = []
    for cls, (x1, y1, x2, y2) in labels:
        cx = (x1 + x2) / 2.0 / image_size
        cy = (y1 + y2) / 2.0 / image_size
        w = (x2 - x1) / image_size
        h = (y2 - y1) / image_size
        lines.append(f"{cls} {cx:.6f} {cy:.6f} {w:.6f} {h:.6f}")
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + ("\n" if lines else ""))


def generate_dataset(cfg: SceneConfig, n_train: int, n_val: int, out_dir):
    """Write PNG images + sibling .txt labels + a manifest; returns the
    manifest path."""
    if n_train < 1 or n_val < 1:
        raise ConfigError("n_train and n_val must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    out_dir = os.fspath(out_dir)
    manifest = {"image_size": cfg.image_size,
                "classes": [CLASS_STYLES[i][0] for i in range(cfg.num_classes)],
                "train": [], "val": []}
    for split, count in (("train", n_train), ("val", n_val)):
        split_dir = os.path.join(out_dir, split)
        os.makedirs(split_dir, exist_ok=True)
        for i in range(count):
            img, labels = _render_scene(cfg, rng)
            img_rel = os.path.join(split, f"img_{i:05d}.png")
            lbl_rel = os.path.join(split, f"img_{i:05d}.txt")
            Image.fromarray(img).save(os.path.join(out_dir, img_rel))
            _write_label_file(os.path.join(out_dir, lbl_rel), labels,
                              cfg.image_size)
            manifest[split].append({"image": img_rel, "label": lbl_rel})
    manifest_path = os.path.join(out_dir, "manifest.json")
    tmp = manifest_path + ".tmp"
    with open(tmp, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    os.replace(tmp, manifest_path)
    return manifest_path


def load_split(manifest_path, split: str):
    """Load one split into memory as (image (3,h,w) in [0,1], labels)
    samples; labels are (class_id, (x1,y1,x2,y2)) in pixels."""
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if split not in ("train", "val"):
        raise InputError(f"unknown split {split!r}")
    base = os.path.dirname(os.fspath(manifest_path))
    size = manifest["image_size"]
    samples = []
    for entry in manifest[split]:
        img = np.asarray(Image.open(os.path.join(base, entry["image"])),
                         dtype=np.float64) / 255.0
        img = img.transpose(2, 0, 1)
        labels = []
        with open(os.path.join(base, entry["label"])) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                cls = int(parts[0])
                cx, cy, w, h = (float(v) * size for v in parts[1:5])
                labels.append((cls, (cx - w / 2, cy - h / 2,
                                     cx + w / 2, cy + h / 2)))
        samples.append((img, labels))
    return samples, manifest
