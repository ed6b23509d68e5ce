"""Reference detector topology: a small-variant one-stage detector with a
CSP-style backbone, a channel-preserving pooling stack, an FPN/PAN neck,
and three detect heads.

Channel widths follow the public small-variant convention (64..1024 base,
scaled by width_mult); weights are randomly initialized, so the graph is
structural, not weight-faithful.  A pre-generated instance ships as
package data (data/yolov5s_like.json).
"""

from __future__ import annotations

from importlib import resources

import numpy as np

from .graph import GraphModel, NodeSpec, from_json_dict

FIXTURE_CLASSES = [
    "Ok", "Fist", "Two", "Three", "L", "Hang", "Palm",
    "Thumb", "Five", "One", "Four", "Span", "Heavy",
]
FIXTURE_WIDTH_MULT = 0.125
FIXTURE_INPUT_HW = (128, 128)
FIXTURE_SEED = 20240501
# backbone C3 blocks each contribute one add-coupled BN pair
FIXTURE_COUPLING_GROUPS = 4


class _Builder:
    def __init__(self, seed: int):
        self.rng = np.random.default_rng(seed)
        self.nodes = []

    def conv(self, name, src, in_ch, out_ch, k, stride):
        w = self.rng.normal(0.0, np.sqrt(2.0 / (in_ch * k * k)),
                            size=(out_ch, in_ch, k, k))
        self.nodes.append(NodeSpec(
            name, "conv",
            {"in_ch": in_ch, "out_ch": out_ch, "kh": k, "kw": k,
             "stride": stride, "pad": k // 2},
            {"weight": w}, [src] if src else []))
        return name

    def cbs(self, name, src, in_ch, out_ch, k=1, stride=1):
        self.conv(f"{name}_conv", src, in_ch, out_ch, k, stride)
        self.nodes.append(NodeSpec(
            f"{name}_bn", "batchnorm", {"ch": out_ch, "eps": 1e-5},
            {"gamma": np.ones(out_ch), "beta": np.zeros(out_ch),
             "running_mean": np.zeros(out_ch), "running_var": np.ones(out_ch)},
            [f"{name}_conv"]))
        self.nodes.append(NodeSpec(f"{name}_act", "silu", {}, {},
                                   [f"{name}_bn"]))
        return f"{name}_act"

    def op(self, name, kind, inputs):
        self.nodes.append(NodeSpec(name, kind, {}, {}, inputs))
        return name

    def c3(self, name, src, in_ch, out_ch, shortcut=True):
        """CSP-style split/merge block with one bottleneck."""
        h = out_ch // 2
        a = self.cbs(f"{name}_cv1", src, in_ch, h)
        b = self.cbs(f"{name}_cv2", src, in_ch, h)
        m = self.cbs(f"{name}_m1", a, h, h)
        m = self.cbs(f"{name}_m2", m, h, h, k=3)
        t = self.op(f"{name}_add", "add", [a, m]) if shortcut else m
        cat = self.op(f"{name}_cat", "concat", [t, b])
        return self.cbs(f"{name}_cv3", cat, 2 * h, out_ch)

    def pool_stack(self, name, src, ch):
        """Multi-scale pooling that preserves spatial dims: pool, then
        upsample back before concatenation."""
        x = self.cbs(f"{name}_cv1", src, ch, ch // 2)
        p1 = self.op(f"{name}_p1", "maxpool2", [x])
        u1 = self.op(f"{name}_u1", "upsample_nearest2", [p1])
        p2 = self.op(f"{name}_p2", "maxpool2", [p1])
        u2a = self.op(f"{name}_u2a", "upsample_nearest2", [p2])
        u2 = self.op(f"{name}_u2b", "upsample_nearest2", [u2a])
        cat = self.op(f"{name}_cat", "concat", [x, u1, u2])
        return self.cbs(f"{name}_cv2", cat, 3 * (ch // 2), ch)

    def head(self, name, src, in_ch, classes, boxes=3):
        out_ch = boxes * (5 + classes)
        w = self.rng.normal(0.0, np.sqrt(2.0 / in_ch),
                            size=(out_ch, in_ch, 1, 1))
        self.nodes.append(NodeSpec(
            name, "detect_head",
            {"in_ch": in_ch, "classes": classes, "boxes": boxes},
            {"weight": w, "bias": np.zeros(out_ch)}, [src]))
        return name


def build_yolov5s_like(width_mult: float = FIXTURE_WIDTH_MULT,
                       input_hw=FIXTURE_INPUT_HW, classes=None,
                       seed: int = FIXTURE_SEED) -> GraphModel:
    classes = list(classes) if classes is not None else list(FIXTURE_CLASSES)
    c1, c2, c3_, c4, c5 = (max(4, int(round(64 * (2 ** i) * width_mult)))
                           for i in range(5))
    b = _Builder(seed)

    stem = b.cbs("stem", None, 3, c1, k=3, stride=2)            # /2
    d2 = b.cbs("d2", stem, c1, c2, k=3, stride=2)               # /4
    b2 = b.c3("c3_1", d2, c2, c2)
    d3 = b.cbs("d3", b2, c2, c3_, k=3, stride=2)                # /8
    p3 = b.c3("c3_2", d3, c3_, c3_)
    d4 = b.cbs("d4", p3, c3_, c4, k=3, stride=2)                # /16
    p4 = b.c3("c3_3", d4, c4, c4)
    d5 = b.cbs("d5", p4, c4, c5, k=3, stride=2)                 # /32
    b5 = b.c3("c3_4", d5, c5, c5)
    p5 = b.pool_stack("spp", b5, c5)

    lat5 = b.cbs("lat5", p5, c5, c4)
    up5 = b.op("up5", "upsample_nearest2", [lat5])
    cat4 = b.op("cat4", "concat", [up5, p4])
    n4 = b.c3("nt4", cat4, 2 * c4, c4, shortcut=False)
    lat4 = b.cbs("lat4", n4, c4, c3_)
    up4 = b.op("up4", "upsample_nearest2", [lat4])
    cat3 = b.op("cat3", "concat", [up4, p3])
    n3 = b.c3("nt3", cat3, 2 * c3_, c3_, shortcut=False)

    dn3 = b.cbs("dn3", n3, c3_, c3_, k=3, stride=2)
    cat4b = b.op("cat4b", "concat", [dn3, lat4])
    n4b = b.c3("nb4", cat4b, 2 * c3_, c4, shortcut=False)
    dn4 = b.cbs("dn4", n4b, c4, c4, k=3, stride=2)
    cat5b = b.op("cat5b", "concat", [dn4, lat5])
    n5b = b.c3("nb5", cat5b, 2 * c4, c5, shortcut=False)

    heads = [b.head("head_p3", n3, c3_, len(classes)),
             b.head("head_p4", n4b, c4, len(classes)),
             b.head("head_p5", n5b, c5, len(classes))]

    model = GraphModel(
        name="yolov5s_like",
        input_shape=(3, input_hw[0], input_hw[1]),
        nodes=b.nodes, outputs=heads, classes=classes)
    model.validate()
    return model


def load_fixture() -> GraphModel:
    """The shipped, pre-generated topology instance."""
    import json

    data = resources.files("slimkit").joinpath("data/yolov5s_like.json")
    with data.open("rb") as fh:
        return from_json_dict(json.load(fh))
