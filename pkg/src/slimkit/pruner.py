"""Structured channel pruning driven by batch-norm scaling factors.

Pipeline: sparse-train (L1 subgradient on the BN scale parameters), sort
the scales, compute the threshold index and threshold from the pruning
rate, clamp by the min-of-layer-maxima guard, build per-layer keep masks
(unioned across add-coupled layers), and slice the graph accordingly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .cost import cost_report
from .errors import SlimkitError, SurgeryError
from .graph import (CHANNEL_PRESERVING, GraphModel, coupling_groups,
                    validate_graph)


@dataclass
class SparseConfig:
    """Hyperparameters for sparse training / fine-tuning."""

    lam: float = 1e-2          # L1 penalty factor on BN scales; 0 = plain training
    epochs: int = 60
    learning_rate: float = 0.01
    batch_size: int = 32
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        if self.lam < 0:
            raise SlimkitError("penalty factor must be >= 0")
        if self.epochs < 0 or self.batch_size < 1 or self.learning_rate <= 0:
            raise SlimkitError("invalid training hyperparameters")


@dataclass
class PruneConfig:
    rate: float = 0.2
    min_channels_per_layer: int = 1
    use_absolute_gamma: bool = True

    def __post_init__(self):
        if not 0.0 <= self.rate < 1.0:
            raise SlimkitError(f"pruning rate must lie in [0, 1), got {self.rate}")
        if self.min_channels_per_layer < 1:
            raise SlimkitError("min_channels_per_layer must be >= 1")


@dataclass
class PruneReport:
    gamma_count: int = 0
    threshold_index: int = 0
    threshold: float = 0.0
    guard: float = 0.0
    per_layer: dict = field(default_factory=dict)  # bn id -> (kept, total)
    params_before: int = 0
    params_after: int = 0
    flops_before: int = 0
    flops_after: int = 0
    size_before: int = 0
    size_after: int = 0

    def to_dict(self) -> dict:
        return {
            "gamma_count": self.gamma_count,
            "threshold_index": self.threshold_index,
            "threshold": self.threshold,
            "guard": self.guard,
            "per_layer": {k: {"kept": v[0], "total": v[1]}
                          for k, v in self.per_layer.items()},
            "params_before": self.params_before,
            "params_after": self.params_after,
            "flops_before": self.flops_before,
            "flops_after": self.flops_after,
            "size_before": self.size_before,
            "size_after": self.size_after,
        }


def _bn_nodes(model: GraphModel):
    return [n for n in model.nodes if n.kind == "batchnorm"]


def prunable_bn_ids(model: GraphModel) -> set:
    """BN nodes whose channels can actually be removed.

    A BN is prunable when its input is a conv consumed by that BN alone
    (so the conv's output filters can be sliced with it) and it is not in
    a coupling group pinned by a BN-less add branch.
    """
    cons = model.consumers()
    by_id = model._by_id
    ok = set()
    for n in _bn_nodes(model):
        if len(n.inputs) != 1:
            continue
        producer = by_id[n.inputs[0]]
        if producer.kind == "conv" and cons[producer.id] == [n.id]:
            ok.add(n.id)
    groups, _ = coupling_groups(model)
    for g in groups:
        if g.fixed or any(m not in ok for m in g.members):
            ok -= set(g.members)
    return ok


def collect_sorted_gammas(model: GraphModel, cfg: PruneConfig):
    """Ascending (value, bn_id, channel) triples over all BN channels.

    Values are |gamma| in absolute mode, raw gamma otherwise; ties break
    by (bn_id, channel) so the order is fully deterministic.
    """
    bns = _bn_nodes(model)
    if not bns:
        raise SlimkitError(f"{model.name}: no batchnorm layers to prune")
    entries = []
    for n in bns:
        g = n.params["gamma"]
        vals = np.abs(g) if cfg.use_absolute_gamma else g
        entries.extend((float(v), n.id, i) for i, v in enumerate(vals))
    entries.sort(key=lambda e: (e[0], e[1], e[2]))
    return entries


def max_threshold_guard(model: GraphModel, cfg: PruneConfig) -> float:
    """Min over BN layers of that layer's max |gamma| (or raw gamma)."""
    bns = _bn_nodes(model)
    if not bns:
        raise SlimkitError(f"{model.name}: no batchnorm layers")
    maxima = []
    for n in bns:
        g = n.params["gamma"]
        vals = np.abs(g) if cfg.use_absolute_gamma else g
        maxima.append(float(vals.max()))
    return min(maxima)


def pruning_threshold(sorted_gammas, rate: float):
    """(threshold_index, threshold) from the ascending gamma list.

    index = floor(len * rate), clamped to len-1 so rate -> 1 stays defined.
    """
    if not sorted_gammas:
        raise SlimkitError("empty gamma list")
    if not 0.0 <= rate < 1.0:
        raise SlimkitError(f"rate must lie in [0, 1), got {rate}")
    idx = min(math.floor(len(sorted_gammas) * rate), len(sorted_gammas) - 1)
    value = sorted_gammas[idx]
    if isinstance(value, tuple):
        value = value[0]
    return idx, float(value)


def build_masks(model: GraphModel, threshold: float, guard: float,
                cfg: PruneConfig) -> dict:
    """Per-BN boolean keep vectors.

    A channel is dropped iff its value is strictly below min(threshold,
    guard).  Coupled layers then union their keep sets; any layer left
    under min_channels_per_layer gets its largest channels restored.
    """
    cut = min(threshold, guard)
    prunable = prunable_bn_ids(model)
    masks = {}
    values = {}
    for n in _bn_nodes(model):
        g = n.params["gamma"]
        vals = np.abs(g) if cfg.use_absolute_gamma else np.asarray(g, dtype=float)
        values[n.id] = vals
        if n.id in prunable:
            masks[n.id] = vals >= cut
        else:
            masks[n.id] = np.ones(len(g), dtype=bool)

    groups, _ = coupling_groups(model)
    for grp in groups:
        shared = np.zeros_like(masks[grp.members[0]])
        for m in grp.members:
            shared |= masks[m]
        for m in grp.members:
            masks[m] = shared.copy()

    # restore the strongest channels wherever a layer fell below the floor
    grouped = {m: grp for grp in groups for m in grp.members}
    for nid, keep in masks.items():
        if keep.sum() >= cfg.min_channels_per_layer:
            continue
        members = grouped[nid].members if nid in grouped else [nid]
        rank = np.max([values[m] for m in members], axis=0)
        order = np.argsort(-rank, kind="stable")
        restored = keep.copy()
        for idx in order:
            if restored.sum() >= cfg.min_channels_per_layer:
                break
            restored[idx] = True
        for m in members:
            masks[m] = restored.copy()
    return masks


def _output_keeps(model: GraphModel, masks: dict) -> dict:
    """Per-node output channel keep vector implied by the BN masks."""
    from .graph import infer_channels

    ch = infer_channels(model)
    cons = model.consumers()
    by_id = model._by_id
    keeps = {}
    for nid in model.topo_order():
        n = by_id[nid]
        if n.kind == "batchnorm":
            keep = np.asarray(masks.get(nid, np.ones(n.attrs["ch"], dtype=bool)))
            if len(keep) != n.attrs["ch"]:
                raise SurgeryError(f"node {nid!r}: mask length {len(keep)} "
                                   f"!= {n.attrs['ch']} channels")
            keeps[nid] = keep
        elif n.kind == "conv":
            consumers = cons[nid]
            if len(consumers) == 1 and by_id[consumers[0]].kind == "batchnorm":
                keeps[nid] = np.asarray(
                    masks.get(consumers[0],
                              np.ones(n.attrs["out_ch"], dtype=bool)))
            else:
                keeps[nid] = np.ones(n.attrs["out_ch"], dtype=bool)
        elif n.kind == "detect_head":
            keeps[nid] = np.ones(ch[nid], dtype=bool)
        elif n.kind == "concat":
            keeps[nid] = np.concatenate([keeps[s] for s in n.inputs])
        elif n.kind == "add":
            ref = keeps[n.inputs[0]]
            for s in n.inputs[1:]:
                if not np.array_equal(keeps[s], ref):
                    raise SurgeryError(f"node {nid!r}: add branches carry "
                                       "different channel masks")
            keeps[nid] = ref
        else:  # channel-preserving
            keeps[nid] = keeps[n.inputs[0]] if n.inputs \
                else np.ones(ch[nid], dtype=bool)
    return keeps


def apply_masks(model: GraphModel, masks: dict) -> GraphModel:
    """Graph surgery: slice every parameter along the masked channels."""
    out = model.copy()
    keeps = _output_keeps(out, masks)
    by_id = out._by_id
    input_keep = np.ones(out.input_shape[0], dtype=bool)
    for n in out.nodes:
        in_keep = input_keep if not n.inputs else keeps[n.inputs[0]]
        if n.kind == "conv":
            ok = keeps[n.id]
            w = n.params["weight"]
            if w.shape[1] != len(in_keep):
                raise SurgeryError(f"node {n.id!r}: weight expects {w.shape[1]} "
                                   f"input channels, mask covers {len(in_keep)}")
            n.params["weight"] = w[ok][:, in_keep]
            if "bias" in n.params:
                n.params["bias"] = n.params["bias"][ok]
            n.attrs["in_ch"] = int(in_keep.sum())
            n.attrs["out_ch"] = int(ok.sum())
        elif n.kind == "detect_head":
            n.params["weight"] = n.params["weight"][:, in_keep]
            n.attrs["in_ch"] = int(in_keep.sum())
        elif n.kind == "batchnorm":
            keep = keeps[n.id]
            for pname in ("gamma", "beta", "running_mean", "running_var"):
                n.params[pname] = n.params[pname][keep]
            n.attrs["ch"] = int(keep.sum())
    validate_graph(out)
    return out


def prune(model: GraphModel, cfg: PruneConfig):
    """Full pruning pass; returns (pruned model, PruneReport)."""
    before = cost_report(model)
    entries = collect_sorted_gammas(model, cfg)
    guard = max_threshold_guard(model, cfg)
    idx, threshold = pruning_threshold(entries, cfg.rate)
    masks = build_masks(model, threshold, guard, cfg)
    pruned = apply_masks(model, masks)
    after = cost_report(pruned)

    rep = PruneReport(
        gamma_count=len(entries),
        threshold_index=idx,
        threshold=threshold,
        guard=guard,
        per_layer={nid: (int(keep.sum()), len(keep))
                   for nid, keep in sorted(masks.items())},
        params_before=before.total_params,
        params_after=after.total_params,
        flops_before=before.total_flops,
        flops_after=after.total_flops,
        size_before=before.model_size_bytes,
        size_after=after.model_size_bytes,
    )
    return pruned, rep


def sparse_train(model: GraphModel, dataset, cfg: SparseConfig,
                 val_set=None):
    """Train task loss + lam * sum|gamma|; returns (model, epoch log).

    The penalty is applied as a lam*sign(gamma) subgradient added to each
    BN gamma gradient before the SGD step.
    """
    from .bench.loop import run_training

    return run_training(model, dataset, cfg, l1_lambda=cfg.lam,
                        val_set=val_set)


def fine_tune(model: GraphModel, dataset, cfg: SparseConfig, val_set=None):
    """Plain post-pruning training; returns (best checkpoint, epoch log).

    With a validation set the best-by-mAP@50 epoch checkpoint is returned,
    otherwise the final-epoch model.
    """
    from .bench.loop import run_training

    return run_training(model, dataset, cfg, l1_lambda=0.0,
                        val_set=val_set, keep_best=val_set is not None)
