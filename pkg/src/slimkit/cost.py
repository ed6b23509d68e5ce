"""Parameter and FLOP accounting for detector graphs.

Conventions: one multiply-add counts as 2 FLOPs; batchnorm costs 2 FLOPs
per element (scale + shift on the pre-normalized value); activations and
elementwise add cost 1 FLOP per output element; maxpool2 costs 3 compares
per output element; concat and upsampling are free.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from .graph import GraphModel, head_out_channels, infer_shapes, serialized_bytes


@dataclass
class CostReport:
    params_per_node: dict = field(default_factory=dict)       # id -> trainable
    params_total_per_node: dict = field(default_factory=dict)  # id -> incl. stats
    flops_per_node: dict = field(default_factory=dict)
    total_params: int = 0
    total_params_with_stats: int = 0
    total_flops: int = 0
    model_size_bytes: int = 0

    def to_dict(self) -> dict:
        return {
            "total_params": self.total_params,
            "total_params_with_stats": self.total_params_with_stats,
            "total_flops": self.total_flops,
            "gflops": self.total_flops / 1e9,
            "model_size_bytes": self.model_size_bytes,
            "per_node": {
                nid: {"params": self.params_per_node[nid],
                      "params_with_stats": self.params_total_per_node[nid],
                      "flops": self.flops_per_node.get(nid, 0)}
                for nid in self.params_per_node
            },
        }


def node_param_counts(node) -> tuple:
    """(trainable, total) parameter counts for one node."""
    if node.kind in ("conv", "detect_head"):
        a = node.attrs
        out_ch = a["out_ch"] if node.kind == "conv" else head_out_channels(a)
        kh = a.get("kh", 1)
        kw = a.get("kw", 1)
        n = out_ch * a["in_ch"] * kh * kw
        if "bias" in node.params:
            n += out_ch
        return n, n
    if node.kind == "batchnorm":
        ch = node.attrs["ch"]
        return 2 * ch, 4 * ch
    return 0, 0


def count_params(model: GraphModel, report: CostReport | None = None) -> CostReport:
    rep = report or CostReport()
    for n in model.nodes:
        trainable, total = node_param_counts(n)
        rep.params_per_node[n.id] = trainable
        rep.params_total_per_node[n.id] = total
    rep.total_params = sum(rep.params_per_node.values())
    rep.total_params_with_stats = sum(rep.params_total_per_node.values())
    return rep


def count_flops(model: GraphModel, input_shape=None,
                report: CostReport | None = None) -> CostReport:
    rep = report or CostReport()
    if input_shape is not None:
        model = model.copy()
        model.input_shape = tuple(input_shape)
    shapes = infer_shapes(model)
    for n in model.nodes:
        c, h, w = shapes[n.id]
        if n.kind in ("conv", "detect_head"):
            a = n.attrs
            # multiply-add = 2 FLOPs; bias add is folded into the MAC count
            flops = 2 * c * a["in_ch"] * a.get("kh", 1) * a.get("kw", 1) * h * w
        elif n.kind == "batchnorm":
            flops = 2 * c * h * w
        elif n.kind in ("silu", "relu", "add"):
            flops = c * h * w
        elif n.kind == "maxpool2":
            flops = 3 * c * h * w
        else:  # concat, upsample_nearest2
            flops = 0
        rep.flops_per_node[n.id] = flops
    rep.total_flops = sum(rep.flops_per_node.values())
    return rep


def cost_report(model: GraphModel, input_shape=None) -> CostReport:
    rep = CostReport()
    count_params(model, rep)
    count_flops(model, input_shape, rep)
    rep.model_size_bytes = len(serialized_bytes(model))
    return rep
