"""Execute a GraphModel with the runtime kernels.

forward() records every intermediate needed by backward(); one recorded
forward supports exactly one backward pass (static DAG, no tape).
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import runtime
from .errors import SlimkitError
from .graph import GraphModel
from .runtime import as_tensor4


@dataclass
class ForwardRecord:
    model: GraphModel
    mode: str
    order: list
    outputs: dict = field(default_factory=dict)   # node id -> array
    caches: dict = field(default_factory=dict)    # node id -> kernel cache
    consumed: bool = False


def forward(model: GraphModel, x, mode: str = "inference",
            record: bool = False):
    """Run the graph on a batch.

    Returns (outputs, rec): outputs is a list of arrays, one per declared
    graph output; rec is a ForwardRecord when record=True, else None.
    """
    x = as_tensor4(x, "graph input")
    order = model.topo_order()
    by_id = model._by_id
    rec = ForwardRecord(model, mode, order) if record else None
    vals = {}
    for nid in order:
        n = by_id[nid]
        ins = [x] if not n.inputs else [vals[s] for s in n.inputs]
        cache = {} if record else None
        if n.kind in ("conv", "detect_head"):
            out = runtime.conv2d_forward(
                ins[0], n.params["weight"], n.params.get("bias"),
                stride=n.attrs.get("stride", 1), pad=n.attrs.get("pad", 0),
                cache=cache, node=nid)
        elif n.kind == "batchnorm":
            out = runtime.batchnorm_forward(
                ins[0], n.params["gamma"], n.params["beta"],
                n.params["running_mean"], n.params["running_var"],
                eps=n.attrs.get("eps", runtime.BN_EPS), mode=mode,
                cache=cache, node=nid)
        elif n.kind == "silu":
            out = runtime.silu_forward(ins[0], cache=cache)
        elif n.kind == "relu":
            out = runtime.relu_forward(ins[0], cache=cache)
        elif n.kind == "maxpool2":
            out = runtime.maxpool2_forward(ins[0], cache=cache, node=nid)
        elif n.kind == "upsample_nearest2":
            out = runtime.upsample2_forward(ins[0], cache=cache)
        elif n.kind == "concat":
            out = runtime.concat_forward(ins, cache=cache, node=nid)
        elif n.kind == "add":
            out = runtime.add_forward(ins, cache=cache, node=nid)
        else:  # pragma: no cover - validate_graph rejects unknown kinds
            raise SlimkitError(f"node {nid!r}: unknown kind {n.kind!r}")
        vals[nid] = out
        if record:
            rec.outputs[nid] = out
            rec.caches[nid] = cache
    outs = [vals[o] for o in model.outputs]
    return outs, rec


def backward(rec: ForwardRecord, output_grads):
    """Reverse-mode pass over a recorded forward.

    output_grads: list of arrays matching the graph outputs.
    Returns (param_grads, input_grad) with param_grads keyed by
    (node_id, param_name).
    """
    if rec is None or rec.consumed:
        raise SlimkitError("backward requires a fresh recorded forward pass")
    rec.consumed = True
    model = rec.model
    by_id = model._by_id

    grads = {}  # node id -> accumulated output gradient
    for oid, g in zip(model.outputs, output_grads):
        g = np.asarray(g, dtype=np.float64)
        grads[oid] = grads.get(oid, 0.0) + g

    param_grads = {}
    input_grad = None
    for nid in reversed(rec.order):
        dout = grads.pop(nid, None)
        if dout is None:
            continue
        n = by_id[nid]
        cache = rec.caches[nid]
        if n.kind in ("conv", "detect_head"):
            dx, dw, db = runtime.conv2d_backward(dout, cache)
            param_grads[(nid, "weight")] = dw
            if db is not None:
                param_grads[(nid, "bias")] = db
            dins = [dx]
        elif n.kind == "batchnorm":
            dx, dg, db = runtime.batchnorm_backward(dout, cache)
            param_grads[(nid, "gamma")] = dg
            param_grads[(nid, "beta")] = db
            dins = [dx]
        elif n.kind == "silu":
            dins = [runtime.silu_backward(dout, cache)]
        elif n.kind == "relu":
            dins = [runtime.relu_backward(dout, cache)]
        elif n.kind == "maxpool2":
            dins = [runtime.maxpool2_backward(dout, cache)]
        elif n.kind == "upsample_nearest2":
            dins = [runtime.upsample2_backward(dout, cache)]
        elif n.kind == "concat":
            dins = runtime.concat_backward(dout, cache)
        elif n.kind == "add":
            dins = runtime.add_backward(dout, cache)
        else:  # pragma: no cover
            raise SlimkitError(f"node {nid!r}: unknown kind {n.kind!r}")

        if not n.inputs:
            input_grad = dins[0] if input_grad is None else input_grad + dins[0]
        else:
            for src, d in zip(n.inputs, dins):
                if src in grads:
                    grads[src] = grads[src] + d
                else:
                    grads[src] = d
    return param_grads, input_grad


def trainable_params(model: GraphModel):
    """Ordered (node_id, param_name, array) triples the optimizer updates."""
    out = []
    for n in model.nodes:
        if n.kind in ("conv", "detect_head"):
            out.append((n.id, "weight", n.params["weight"]))
            if "bias" in n.params:
                out.append((n.id, "bias", n.params["bias"]))
        elif n.kind == "batchnorm":
            out.append((n.id, "gamma", n.params["gamma"]))
            out.append((n.id, "beta", n.params["beta"]))
    return out
