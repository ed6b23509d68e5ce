import json

import numpy as np
import pytest

from slimkit import executor
from slimkit.cost import cost_report, count_flops, count_params
from slimkit.errors import GraphError, ShapeError
from slimkit.graph import (GraphModel, NodeSpec, coupling_groups,
                           infer_shapes, load_graph, save_graph)
from slimkit.zoo import FIXTURE_COUPLING_GROUPS


def make_conv(nid, in_ch, out_ch, k=1, stride=1, pad=0, inputs=(),
              bias=False, seed=0):
    rng = np.random.default_rng(seed)
    params = {"weight": rng.normal(size=(out_ch, in_ch, k, k))}
    if bias:
        params["bias"] = rng.normal(size=out_ch)
    return NodeSpec(nid, "conv",
                    {"in_ch": in_ch, "out_ch": out_ch, "kh": k, "kw": k,
                     "stride": stride, "pad": pad}, params, list(inputs))


def make_bn(nid, ch, src, gamma=None):
    return NodeSpec(nid, "batchnorm", {"ch": ch, "eps": 1e-5},
                    {"gamma": np.asarray(gamma, dtype=float)
                     if gamma is not None else np.ones(ch),
                     "beta": np.zeros(ch), "running_mean": np.zeros(ch),
                     "running_var": np.ones(ch)}, [src])


def minimal_graph():
    return GraphModel("mini", (3, 4, 4), [make_conv("c", 3, 2)], ["c"])


class TestValidationAndIO:
    def test_minimal_graph_roundtrip(self, tmp_path):
        m = minimal_graph()
        m.validate()
        p = tmp_path / "mini.json"
        save_graph(m, p)
        m2 = load_graph(p)
        assert len(m2.nodes) == 1
        np.testing.assert_array_equal(m2.nodes[0].params["weight"],
                                      m.nodes[0].params["weight"])

    def test_roundtrip_bitwise(self, tmp_path, yolo_fixture):
        p = tmp_path / "y.json"
        save_graph(yolo_fixture, p)
        m2 = load_graph(p)
        for a, b in zip(yolo_fixture.nodes, m2.nodes):
            assert a.params.keys() == b.params.keys()
            for k in a.params:
                assert a.params[k].tobytes() == b.params[k].tobytes()

    def test_fixture_has_three_heads(self, yolo_fixture):
        heads = [n for n in yolo_fixture.nodes if n.kind == "detect_head"]
        assert len(heads) == 3
        yolo_fixture.validate()

    def test_cycle_rejected(self):
        m = GraphModel("cyc", (1, 2, 2), [
            make_conv("a", 1, 1, inputs=[]),
            NodeSpec("x", "silu", {}, {}, ["y"]),
            NodeSpec("y", "relu", {}, {}, ["x"]),
        ], ["a"])
        with pytest.raises(GraphError):
            m.validate()

    def test_dangling_input_named(self):
        m = GraphModel("d", (1, 2, 2),
                       [make_conv("a", 1, 1),
                        NodeSpec("s", "silu", {}, {}, ["ghost"])], ["s"])
        with pytest.raises(GraphError, match="ghost"):
            m.validate()

    def test_bad_schema_tag(self, tmp_path):
        p = tmp_path / "bad.json"
        p.write_text(json.dumps({"schema": "something_else"}))
        with pytest.raises(GraphError):
            load_graph(p)

    def test_weight_shape_mismatch_names_node(self):
        n = make_conv("badconv", 3, 2)
        n.params["weight"] = np.zeros((2, 3, 2, 2))  # attrs say 1x1
        m = GraphModel("b", (3, 4, 4), [n], ["badconv"])
        with pytest.raises(GraphError, match="badconv"):
            m.validate()

    def test_two_sources_rejected(self):
        m = GraphModel("two", (1, 2, 2),
                       [make_conv("a", 1, 1), make_conv("b", 1, 1)], ["a"])
        with pytest.raises(GraphError):
            m.validate()


class TestInferShapes:
    def test_stride2_conv_480(self):
        m = GraphModel("s", (3, 480, 480),
                       [make_conv("c", 3, 16, k=3, stride=2, pad=1)], ["c"])
        assert infer_shapes(m)["c"] == (16, 240, 240)

    def test_upsample_doubles(self):
        m = GraphModel("u", (4, 20, 20),
                       [make_conv("c", 4, 4),
                        NodeSpec("up", "upsample_nearest2", {}, {}, ["c"])],
                       ["up"])
        assert infer_shapes(m)["up"] == (4, 40, 40)

    def test_add_channel_mismatch(self):
        m = GraphModel("bad", (3, 8, 8), [
            make_conv("c", 3, 4),
            make_conv("d", 4, 5, inputs=["c"]),
            NodeSpec("s", "silu", {}, {}, ["c"]),
            NodeSpec("a", "add", {}, {}, ["s", "d"]),
        ], ["a"])
        with pytest.raises(ShapeError, match="'a'"):
            infer_shapes(m)

    def test_forward_respects_inferred_shapes(self, yolo_fixture, rng):
        shapes = infer_shapes(yolo_fixture)
        x = rng.normal(size=(1,) + tuple(yolo_fixture.input_shape))
        outs, rec = executor.forward(yolo_fixture, x, record=True)
        for nid, out in rec.outputs.items():
            assert out.shape[1:] == shapes[nid]


class TestCost:
    def test_conv_param_count(self):
        m = GraphModel("p", (3, 8, 8),
                       [make_conv("c", 3, 16, k=3, pad=1, bias=True)], ["c"])
        rep = count_params(m)
        assert rep.total_params == 3 * 16 * 9 + 16 == 448

    def test_bn_param_count(self):
        m = GraphModel("p", (16, 4, 4),
                       [make_conv("c", 16, 16), make_bn("b", 16, "c")], ["b"])
        rep = count_params(m)
        assert rep.params_per_node["b"] == 32
        assert rep.params_total_per_node["b"] == 64

    def test_single_mac(self):
        m = GraphModel("f", (1, 1, 1), [make_conv("c", 1, 1)], ["c"])
        assert count_flops(m).total_flops == 2

    def test_conv_flops_arithmetic(self):
        m = GraphModel("f", (3, 32, 32),
                       [make_conv("c", 3, 16, k=3, pad=1)], ["c"])
        assert count_flops(m).total_flops == 884736

    def test_additivity_and_reorder_invariance(self, yolo_fixture):
        rep = cost_report(yolo_fixture)
        assert rep.total_params == sum(rep.params_per_node.values())
        assert rep.total_flops == sum(rep.flops_per_node.values())
        shuffled = yolo_fixture.copy()
        shuffled.nodes = shuffled.nodes[::-1]  # keeps topology, reorders list
        rep2 = cost_report(shuffled)
        assert rep2.total_params == rep.total_params
        assert rep2.total_flops == rep.total_flops

    def test_model_size_is_file_size(self, tmp_path, yolo_fixture):
        rep = cost_report(yolo_fixture)
        p = tmp_path / "m.json"
        save_graph(yolo_fixture, p)
        assert rep.model_size_bytes == p.stat().st_size


class TestCouplingGroups:
    def test_linear_chain_no_groups(self):
        m = GraphModel("lin", (3, 4, 4), [
            make_conv("c1", 3, 4),
            make_bn("b1", 4, "c1"),
            make_conv("c2", 4, 2, inputs=["b1"]),
        ], ["c2"])
        groups, offsets = coupling_groups(m)
        assert groups == []
        assert offsets == {}

    def test_residual_block_one_group(self):
        m = GraphModel("res", (3, 4, 4), [
            make_conv("c1", 3, 4),
            make_bn("b1", 4, "c1"),
            NodeSpec("s1", "silu", {}, {}, ["b1"]),
            make_conv("c2", 4, 4, inputs=["s1"]),
            make_bn("b2", 4, "c2"),
            NodeSpec("a", "add", {}, {}, ["s1", "b2"]),
        ], ["a"])
        groups, _ = coupling_groups(m)
        assert len(groups) == 1
        assert groups[0].members == ["b1", "b2"]
        assert groups[0].reason == "a"
        assert not groups[0].fixed

    def test_fixture_group_count(self, yolo_fixture):
        # hand-enumerated: one add-coupled BN pair per backbone CSP block
        groups, _ = coupling_groups(yolo_fixture)
        assert len(groups) == FIXTURE_COUPLING_GROUPS
        assert all(len(g.members) == 2 for g in groups)
        # partition: no BN in two groups
        seen = [m for g in groups for m in g.members]
        assert len(seen) == len(set(seen))

    def test_concat_offset_table(self):
        m = GraphModel("cat", (3, 4, 4), [
            make_conv("c1", 3, 2),
            make_conv("c2", 2, 3, inputs=["c1"]),
            NodeSpec("s", "silu", {}, {}, ["c1"]),
            NodeSpec("k", "concat", {}, {}, ["s", "c2"]),
        ], ["k"])
        _, offsets = coupling_groups(m)
        assert offsets["k"] == [("s", 0, 2), ("c2", 2, 3)]
