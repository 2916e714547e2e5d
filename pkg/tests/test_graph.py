import math

import numpy as np
import pytest

from edgerun.graph import (
    CONVOLUTION,
    Graph,
    GraphError,
    INPUT,
    LayerNode,
    PADDING_SAME,
    PADDING_VALID,
    RELU,
    TensorDesc,
    WeightTensor,
    conv_output_hw,
    conv_paddings,
    count_flops,
    count_params,
    graphs_equal,
    infer_shapes,
    model_size_bytes,
    sparsity_report,
    validate,
    weight_tensor,
)
from edgerun.netbuilder import build_preset

from conftest import make_conv_graph
from oracles import (
    KWS1_STAGES,
    KWS3_STAGES,
    KWS9_STAGES,
    SEED_STAGES,
    arch_flops,
    arch_params,
    conv_out_dim,
)


class TestShapeInference:
    def test_same_padding_matches_ceil(self):
        for h, k, s in [(40, 3, 1), (40, 5, 1), (32, 3, 2), (32, 10, 2),
                        (7, 5, 3), (1, 1, 1)]:
            oh, _ = conv_output_hw(h, 11, k, 1, s, 1, PADDING_SAME)
            assert oh == math.ceil(h / s)

    def test_valid_padding(self):
        oh, ow = conv_output_hw(10, 12, 3, 3, 1, 1, PADDING_VALID)
        assert (oh, ow) == (8, 10)
        oh, ow = conv_output_hw(10, 12, 3, 3, 2, 2, PADDING_VALID)
        assert (oh, ow) == (4, 5)

    def test_valid_kernel_too_large(self):
        with pytest.raises(GraphError):
            conv_output_hw(4, 4, 5, 5, 1, 1, PADDING_VALID)

    def test_same_padding_split_favors_bottom_right(self):
        # even total padding splits evenly; odd total puts the extra after
        assert conv_paddings(40, 32, 3, 3, 1, 1, PADDING_SAME) == (1, 1, 1, 1)
        assert conv_paddings(40, 32, 4, 4, 1, 1, PADDING_SAME) == (1, 2, 1, 2)
        assert conv_paddings(10, 10, 1, 1, 1, 1, PADDING_SAME) == (0, 0, 0, 0)

    def test_chain_shapes(self):
        g = make_conv_graph(
            [{"kh": 3, "kw": 3, "out_channels": 8, "stride_h": 1,
              "stride_w": 2},
             {"kh": 5, "kw": 5, "out_channels": 4}],
            input_shape=(3, 40, 32), tail=("pool", "flatten"))
        shapes = [n.out_desc.shape for n in g.nodes]
        assert shapes == [(3, 40, 32), (8, 40, 16), (4, 40, 16),
                          (4, 1, 1), (4, 1, 1)]

    def test_idempotent(self):
        g = make_conv_graph([{"kh": 3, "kw": 3, "out_channels": 4}])
        before = [n.out_desc for n in g.nodes]
        infer_shapes(g)
        assert [n.out_desc for n in g.nodes] == before

    def test_groups_must_divide(self):
        g = make_conv_graph([{"kh": 3, "kw": 3, "out_channels": 4}],
                            input_shape=(3, 8, 8))
        g.nodes[1].params["groups"] = 2  # in=3 not divisible
        with pytest.raises(GraphError):
            infer_shapes(g)


class TestValidate:
    def test_clean_graph(self):
        assert validate(build_preset("kws9")) == []
        assert validate(build_preset("ds_kws3")) == []

    def test_wrong_weight_shape_one_diagnostic(self):
        g = make_conv_graph([{"kh": 3, "kw": 3, "out_channels": 4}])
        bad = g.weights["c1_w"]
        g.weights["c1_w"] = weight_tensor("c1_w", bad.data[:3])  # 3 != 4 out
        diags = validate(g)
        assert len(diags) == 1
        assert "c1_w" in diags[0]

    def test_reference_to_later_node(self):
        nodes = [LayerNode(0, INPUT), LayerNode(1, RELU, [2]),
                 LayerNode(2, RELU, [0])]
        g = Graph(nodes, {}, TensorDesc((1, 4, 4)))
        diags = validate(g)
        assert any("later node" in d for d in diags)

    def test_missing_weight_tensor(self):
        g = make_conv_graph([{"kh": 1, "kw": 1, "out_channels": 2}])
        del g.weights["c1_b"]
        assert any("c1_b" in d for d in validate(g))

    def test_duplicate_ids_and_multiple_inputs(self):
        nodes = [LayerNode(0, INPUT), LayerNode(0, INPUT)]
        g = Graph(nodes, {}, TensorDesc((1, 4, 4)))
        diags = validate(g)
        assert any("duplicate" in d for d in diags)
        assert any("input" in d for d in diags)

    def test_unknown_kind(self):
        g = Graph([LayerNode(0, INPUT), LayerNode(1, "conv2d", [0])],
                  {}, TensorDesc((1, 4, 4)))
        assert any("unknown kind" in d for d in validate(g))


class TestFlops:
    def test_single_relu_zero(self):
        g = Graph([LayerNode(0, INPUT), LayerNode(1, RELU, [0])],
                  {}, TensorDesc((1, 4, 4)))
        infer_shapes(g)
        assert count_flops(g).total == 0
        assert count_params(g) == 0

    def test_hand_computed_conv(self):
        # 3x3 conv, 2->4 channels, 8x8 same padding: 2*3*3*2*4*8*8
        g = make_conv_graph([{"kh": 3, "kw": 3, "out_channels": 4}],
                            input_shape=(2, 8, 8))
        assert count_flops(g).total == 2 * 3 * 3 * 2 * 4 * 8 * 8

    def test_kws_presets_match_published_mflops(self):
        expected = {"kws1": 223.4, "kws3": 87.6, "kws9": 37.7}
        for name, mflops in expected.items():
            got = count_flops(build_preset(name)).total_mflops
            assert got == pytest.approx(mflops, abs=0.1), name

    def test_presets_match_oracle_exactly(self):
        for name, stages, ds in [("kws1", KWS1_STAGES, False),
                                 ("kws3", KWS3_STAGES, False),
                                 ("kws9", KWS9_STAGES, False),
                                 ("seed", SEED_STAGES, False),
                                 ("ds_kws1", KWS1_STAGES, True),
                                 ("ds_kws9", KWS9_STAGES, True)]:
            g = build_preset(name)
            assert count_flops(g).total == arch_flops(stages, ds=ds), name
            assert count_params(g) == arch_params(stages, ds=ds), name

    def test_seed_cnn_table_values(self):
        g = build_preset("seed")
        assert count_flops(g).total_mflops == pytest.approx(581.1, abs=0.1)
        assert model_size_bytes(g) == 1_832_848

    def test_ds_variant_cheaper_when_kernels_nontrivial(self):
        # holds when at least one stage has k > 1 (always true for presets)
        for name in ["kws1", "kws3", "kws9", "seed"]:
            cnn = count_flops(build_preset(name)).total
            ds = count_flops(build_preset("ds_" + name)).total
            assert ds < cnn, name

    def test_grouped_conv_flops_divide(self):
        dense = make_conv_graph([{"kh": 3, "kw": 3, "out_channels": 4}],
                                input_shape=(4, 8, 8))
        grouped = make_conv_graph(
            [{"kh": 3, "kw": 3, "out_channels": 4, "groups": 4}],
            input_shape=(4, 8, 8))
        assert count_flops(dense).total == 4 * count_flops(grouped).total


class TestSizeAndSparsity:
    def test_published_sizes_within_two_percent(self):
        published = {"kws1": 707.0, "kws3": 282.1, "kws9": 125.3}
        for name, kb in published.items():
            got_kb = model_size_bytes(build_preset(name)) / 1000
            assert abs(got_kb - kb) / kb < 0.02, name

    def test_size_is_four_bytes_per_param(self):
        g = build_preset("kws3")
        assert model_size_bytes(g) == 4 * count_params(g)

    def test_sparsity(self):
        w = np.array([[0.0, 1.0], [0.0, 2.0]], dtype=np.float32)
        g = Graph([LayerNode(0, INPUT)],
                  {"w": weight_tensor("w", w),
                   "z": weight_tensor("z", np.zeros(4, dtype=np.float32))},
                  TensorDesc((1, 2, 2)))
        rep = sparsity_report(g)
        assert rep.per_tensor["w"] == 0.5
        assert rep.per_tensor["z"] == 1.0
        assert rep.overall == 6 / 8


class TestGraphsEqual:
    def test_equal_and_modified(self):
        a = build_preset("kws9", seed=3)
        b = build_preset("kws9", seed=3)
        assert graphs_equal(a, b)
        b.weights["conv1_w"].data[0, 0, 0, 0] += 1e-3
        assert not graphs_equal(a, b)

    def test_structural_difference(self):
        a = build_preset("kws9")
        b = build_preset("kws9")
        b.nodes[1].params["stride_w"] = 1
        assert not graphs_equal(a, b)
