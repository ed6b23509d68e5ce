"""Serialized detector-graph data model: validation, shape inference,
channel-coupling analysis, and (de)serialization.

File format: JSON with schema tag "slimkit_graph_v1".  Parameter arrays are
little-endian float64, base64-encoded; small inline float lists are also
accepted on load.
"""

from __future__ import annotations

import base64
import json
import os
import tempfile
from dataclasses import dataclass, field

import numpy as np

from .errors import GraphError, ShapeError

SCHEMA = "slimkit_graph_v1"

NODE_KINDS = frozenset({
    "conv", "batchnorm", "silu", "relu", "maxpool2",
    "upsample_nearest2", "concat", "add", "detect_head",
})

# kinds whose output channel count equals their (single) input's
CHANNEL_PRESERVING = frozenset({"silu", "relu", "maxpool2", "upsample_nearest2"})


@dataclass
class NodeSpec:
    id: str
    kind: str
    attrs: dict = field(default_factory=dict)
    params: dict = field(default_factory=dict)  # name -> np.ndarray (float64)
    inputs: list = field(default_factory=list)

    def copy(self) -> "NodeSpec":
        return NodeSpec(self.id, self.kind, dict(self.attrs),
                        {k: v.copy() for k, v in self.params.items()},
                        list(self.inputs))


def head_out_channels(attrs: dict) -> int:
    return attrs["boxes"] * (5 + attrs["classes"])


@dataclass
class GraphModel:
    name: str
    input_shape: tuple  # (c, h, w)
    nodes: list  # ordered NodeSpec list
    outputs: list  # node ids
    classes: list = field(default_factory=list)

    def node(self, node_id: str) -> NodeSpec:
        return self._by_id[node_id]

    @property
    def _by_id(self) -> dict:
        return {n.id: n for n in self.nodes}

    def consumers(self) -> dict:
        out = {n.id: [] for n in self.nodes}
        for n in self.nodes:
            for src in n.inputs:
                out[src].append(n.id)
        return out

    def topo_order(self) -> list:
        """Node ids in dependency order; raises GraphError on a cycle."""
        by_id = self._by_id
        indeg = {n.id: len(n.inputs) for n in self.nodes}
        cons = self.consumers()
        ready = [n.id for n in self.nodes if indeg[n.id] == 0]
        order = []
        while ready:
            nid = ready.pop(0)
            order.append(nid)
            for c in cons[nid]:
                indeg[c] -= 1
                if indeg[c] == 0:
                    ready.append(c)
        if len(order) != len(self.nodes):
            raise GraphError(f"{self.name}: graph contains a cycle")
        return order

    def copy(self) -> "GraphModel":
        return GraphModel(self.name, tuple(self.input_shape),
                          [n.copy() for n in self.nodes], list(self.outputs),
                          list(self.classes))

    def validate(self) -> None:
        validate_graph(self)


def validate_graph(model: GraphModel) -> None:
    by_id = {}
    for n in model.nodes:
        if n.id in by_id:
            raise GraphError(f"duplicate node id {n.id!r}")
        if n.kind not in NODE_KINDS:
            raise GraphError(f"node {n.id!r}: unknown kind {n.kind!r}")
        by_id[n.id] = n
    for n in model.nodes:
        for src in n.inputs:
            if src not in by_id:
                raise GraphError(f"node {n.id!r}: input {src!r} does not exist")

    sources = [n for n in model.nodes if not n.inputs]
    if len(sources) != 1:
        raise GraphError(f"expected exactly one source node, found {len(sources)}")

    order = model.topo_order()  # raises on cycle

    # reachability from the source
    reachable = {sources[0].id}
    for nid in order:
        n = by_id[nid]
        if n.inputs and all(src in reachable for src in n.inputs):
            reachable.add(nid)
    unreachable = [n.id for n in model.nodes if n.id not in reachable]
    if unreachable:
        raise GraphError(f"nodes unreachable from the input: {unreachable}")

    for out in model.outputs:
        if out not in by_id:
            raise GraphError(f"output {out!r} does not exist")
    if not model.outputs:
        raise GraphError("graph declares no outputs")

    for n in model.nodes:
        _validate_node(n)

    infer_channels(model)  # raises on channel inconsistencies


def _validate_node(n: NodeSpec) -> None:
    def need(cond, msg):
        if not cond:
            raise GraphError(f"node {n.id!r}: {msg}")

    single_input = {"conv", "batchnorm", "detect_head"} | CHANNEL_PRESERVING
    if n.kind in single_input:
        need(len(n.inputs) <= 1, f"{n.kind} takes a single input")
    if n.kind in ("concat", "add"):
        need(len(n.inputs) >= 2, f"{n.kind} needs at least two inputs")

    if n.kind == "conv":
        for key in ("in_ch", "out_ch", "kh", "kw", "stride", "pad"):
            need(key in n.attrs, f"conv missing attr {key!r}")
        w = n.params.get("weight")
        need(w is not None, "conv missing weight")
        exp = (n.attrs["out_ch"], n.attrs["in_ch"], n.attrs["kh"], n.attrs["kw"])
        need(w.shape == exp, f"weight shape {w.shape} != attrs {exp}")
        b = n.params.get("bias")
        if b is not None:
            need(b.shape == (n.attrs["out_ch"],), "bias length != out_ch")
    elif n.kind == "batchnorm":
        ch = n.attrs.get("ch")
        need(ch is not None, "batchnorm missing attr 'ch'")
        for pname in ("gamma", "beta", "running_mean", "running_var"):
            p = n.params.get(pname)
            need(p is not None, f"batchnorm missing {pname}")
            need(p.shape == (ch,), f"{pname} length {p.shape} != ch {ch}")
        need(n.attrs.get("eps", 1e-5) > 0, "eps must be positive")
        need(bool(np.all(n.params["running_var"] >= 0)), "running_var must be >= 0")
    elif n.kind == "detect_head":
        for key in ("in_ch", "classes", "boxes"):
            need(key in n.attrs, f"detect_head missing attr {key!r}")
        w = n.params.get("weight")
        need(w is not None, "detect_head missing weight")
        exp = (head_out_channels(n.attrs), n.attrs["in_ch"], 1, 1)
        need(w.shape == exp, f"weight shape {w.shape} != expected {exp}")


def infer_channels(model: GraphModel) -> dict:
    """Output channel count per node id."""
    by_id = model._by_id
    ch = {}
    for nid in model.topo_order():
        n = by_id[nid]
        in_ch = ([model.input_shape[0]] if not n.inputs
                 else [ch[s] for s in n.inputs])
        if n.kind == "conv":
            if in_ch[0] != n.attrs["in_ch"]:
                raise ShapeError(f"node {nid!r}: expects {n.attrs['in_ch']} input "
                                 f"channels, producer supplies {in_ch[0]}")
            ch[nid] = n.attrs["out_ch"]
        elif n.kind == "detect_head":
            if in_ch[0] != n.attrs["in_ch"]:
                raise ShapeError(f"node {nid!r}: expects {n.attrs['in_ch']} input "
                                 f"channels, producer supplies {in_ch[0]}")
            ch[nid] = head_out_channels(n.attrs)
        elif n.kind == "batchnorm":
            if in_ch[0] != n.attrs["ch"]:
                raise ShapeError(f"node {nid!r}: batchnorm over {n.attrs['ch']} "
                                 f"channels fed with {in_ch[0]}")
            ch[nid] = in_ch[0]
        elif n.kind == "concat":
            ch[nid] = sum(in_ch)
        elif n.kind == "add":
            if len(set(in_ch)) != 1:
                raise ShapeError(f"node {nid!r}: add inputs have channel "
                                 f"counts {in_ch}")
            ch[nid] = in_ch[0]
        else:
            ch[nid] = in_ch[0]
    return ch


def infer_shapes(model: GraphModel) -> dict:
    """Per-node output (c, h, w) for the model's declared input shape."""
    by_id = model._by_id
    shapes = {}
    for nid in model.topo_order():
        n = by_id[nid]
        ins = ([tuple(model.input_shape)] if not n.inputs
               else [shapes[s] for s in n.inputs])
        c, h, w = ins[0]
        if n.kind in ("conv", "detect_head"):
            if c != n.attrs["in_ch"]:
                raise ShapeError(f"node {nid!r}: channel mismatch "
                                 f"({c} fed, {n.attrs['in_ch']} expected)")
            kh = n.attrs.get("kh", 1)
            kw = n.attrs.get("kw", 1)
            stride = n.attrs.get("stride", 1)
            pad = n.attrs.get("pad", 0)
            hout = (h + 2 * pad - kh) // stride + 1
            wout = (w + 2 * pad - kw) // stride + 1
            if hout <= 0 or wout <= 0:
                raise ShapeError(f"node {nid!r}: kernel does not fit {h}x{w}")
            out_c = (n.attrs["out_ch"] if n.kind == "conv"
                     else head_out_channels(n.attrs))
            shapes[nid] = (out_c, hout, wout)
        elif n.kind == "batchnorm":
            if c != n.attrs["ch"]:
                raise ShapeError(f"node {nid!r}: batchnorm channel mismatch")
            shapes[nid] = (c, h, w)
        elif n.kind == "maxpool2":
            if h % 2 or w % 2:
                raise ShapeError(f"node {nid!r}: maxpool2 needs even dims, got {h}x{w}")
            shapes[nid] = (c, h // 2, w // 2)
        elif n.kind == "upsample_nearest2":
            shapes[nid] = (c, 2 * h, 2 * w)
        elif n.kind == "concat":
            for other in ins[1:]:
                if other[1:] != (h, w):
                    raise ShapeError(f"node {nid!r}: concat spatial mismatch")
            shapes[nid] = (sum(s[0] for s in ins), h, w)
        elif n.kind == "add":
            for other in ins[1:]:
                if other != ins[0]:
                    raise ShapeError(f"node {nid!r}: add shape mismatch "
                                     f"{ins[0]} vs {other}")
            shapes[nid] = ins[0]
        else:
            shapes[nid] = (c, h, w)
    return shapes


# ---------------------------------------------------------------------------
# channel-coupling analysis


@dataclass
class CouplingGroup:
    members: list  # BN node ids sharing one channel mask
    reason: str    # add-junction id(s)
    fixed: bool = False  # a branch without a BN joins the add: nothing prunable


def _trace_bn_producers(model: GraphModel, nid: str) -> list:
    """Walk upstream through channel-preserving ops to BN producers.

    Returns BN node ids, or ["<fixed>"] markers for branches whose channels
    are not governed by a prunable BN (graph input, bare conv, concat).
    """
    n = model._by_id.get(nid)
    if n is None:
        return ["<fixed>"]
    if n.kind == "batchnorm":
        return [n.id]
    if n.kind in CHANNEL_PRESERVING:
        if not n.inputs:  # source activation: fed by the graph input
            return ["<fixed>"]
        return _trace_bn_producers(model, n.inputs[0])
    if n.kind == "add":
        out = []
        for src in n.inputs:
            out.extend(_trace_bn_producers(model, src))
        return out
    return ["<fixed>"]  # conv without BN, concat, detect_head, graph input


def coupling_groups(model: GraphModel):
    """BN nodes meeting at elementwise adds, plus concat channel offsets.

    Returns (groups, concat_offsets) where concat_offsets maps each concat
    node id to a list of (input_id, offset, width).
    """
    parent = {}

    def find(x):
        while parent.get(x, x) != x:
            parent[x] = parent.get(parent[x], parent[x])
            x = parent[x]
        return x

    def union(a, b):
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb

    reasons = {}
    for n in model.nodes:
        if n.kind != "add":
            continue
        members = []
        for src in n.inputs:
            members.extend(_trace_bn_producers(model, src))
        # fixed markers must not bridge unrelated adds: make them junction-local
        members = [m if m != "<fixed>" else f"<fixed:{n.id}>" for m in members]
        for m in members:
            reasons.setdefault(m, []).append(n.id)
        for m in members[1:]:
            union(members[0], m)

    clusters = {}
    for m in reasons:
        clusters.setdefault(find(m), []).append(m)

    groups = []
    for members in clusters.values():
        junctions = sorted({j for m in members for j in reasons[m]})
        fixed = any(m.startswith("<fixed") for m in members)
        bn_members = sorted(m for m in members if not m.startswith("<fixed"))
        if not bn_members:
            continue
        groups.append(CouplingGroup(bn_members, "+".join(junctions), fixed))
    groups.sort(key=lambda g: g.members)

    ch = infer_channels(model)
    offsets = {}
    for n in model.nodes:
        if n.kind != "concat":
            continue
        table, off = [], 0
        for src in n.inputs:
            table.append((src, off, ch[src]))
            off += ch[src]
        offsets[n.id] = table
    return groups, offsets


# ---------------------------------------------------------------------------
# serialization


def _encode_array(a: np.ndarray) -> dict:
    return {"shape": list(a.shape),
            "b64": base64.b64encode(a.astype("<f8").tobytes()).decode("ascii")}


def _decode_array(obj, node_id: str, pname: str) -> np.ndarray:
    if isinstance(obj, list):
        return np.asarray(obj, dtype=np.float64)
    try:
        raw = base64.b64decode(obj["b64"])
        return np.frombuffer(raw, dtype="<f8").astype(np.float64).reshape(obj["shape"])
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"node {node_id!r}: bad parameter {pname!r}: {exc}") from exc


def to_json_dict(model: GraphModel) -> dict:
    return {
        "schema": SCHEMA,
        "name": model.name,
        "input_shape": list(model.input_shape),
        "classes": list(model.classes),
        "nodes": [
            {"id": n.id, "kind": n.kind, "attrs": n.attrs,
             "inputs": n.inputs,
             "params": {k: _encode_array(v) for k, v in n.params.items()}}
            for n in model.nodes
        ],
        "outputs": list(model.outputs),
    }


def from_json_dict(doc: dict) -> GraphModel:
    if not isinstance(doc, dict) or doc.get("schema") != SCHEMA:
        raise GraphError(f"not a {SCHEMA} document")
    try:
        nodes = []
        for nd in doc["nodes"]:
            nodes.append(NodeSpec(
                id=str(nd["id"]), kind=str(nd["kind"]),
                attrs=dict(nd.get("attrs", {})),
                params={k: _decode_array(v, nd["id"], k)
                        for k, v in nd.get("params", {}).items()},
                inputs=[str(s) for s in nd.get("inputs", [])]))
        model = GraphModel(
            name=str(doc.get("name", "unnamed")),
            input_shape=tuple(int(v) for v in doc["input_shape"]),
            nodes=nodes,
            outputs=[str(o) for o in doc["outputs"]],
            classes=list(doc.get("classes", [])))
    except (KeyError, TypeError, ValueError) as exc:
        raise GraphError(f"malformed graph document: {exc}") from exc
    validate_graph(model)
    return model


def serialized_bytes(model: GraphModel) -> bytes:
    return json.dumps(to_json_dict(model)).encode("utf-8")


def save_graph(model: GraphModel, path) -> None:
    """Atomic write: temp file in the target directory, then rename."""
    path = os.fspath(path)
    data = serialized_bytes(model)
    fd, tmp = tempfile.mkstemp(dir=os.path.dirname(path) or ".", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load_graph(path) -> GraphModel:
    try:
        with open(path, "rb") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise GraphError(f"{path}: not valid JSON: {exc}") from exc
    return from_json_dict(doc)
