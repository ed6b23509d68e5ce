"""Desk-scale detection bench: synthetic shape scenes, a toy single-scale
detector, and train/eval loops."""

from .scenes import SceneConfig, generate_dataset, load_split
from .toydet import ToyDetConfig, build_toydet, det_loss, decode_and_nms
from .loop import run_training, evaluate, write_epoch_log

__all__ = [
    "SceneConfig", "generate_dataset", "load_split",
    "ToyDetConfig", "build_toydet", "det_loss", "decode_and_nms",
    "run_training", "evaluate", "write_epoch_log",
]
