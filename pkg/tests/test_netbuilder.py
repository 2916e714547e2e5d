import numpy as np
import pytest

from edgerun.graph import (
    AVG_POOL,
    BATCH_NORM,
    CONVOLUTION,
    FLATTEN,
    FULLY_CONNECTED,
    RELU,
    SCALE,
    SOFTMAX,
    count_flops,
    count_params,
    validate,
)
from edgerun.netbuilder import (
    ArchSpec,
    Candidate,
    ConvLayerSpec,
    KWS_LABELS,
    PRESETS,
    SearchSpace,
    arch_from_config,
    build_network,
    build_preset,
    pareto_frontier,
    parse_stage,
    sample_arch,
)


class TestPresets:
    def test_all_presets_validate(self):
        for name in PRESETS:
            g = build_preset(name)
            assert validate(g) == [], name
            assert g.labels == list(KWS_LABELS)
            assert g.input_desc.shape == (1, 40, 32)

    def test_layer_sequence_cnn(self):
        g = build_preset("kws9")
        kinds = [n.kind for n in g.nodes]
        stage = [CONVOLUTION, BATCH_NORM, SCALE, RELU]
        expected = (["input"] + stage * 6 +
                    [AVG_POOL, FLATTEN, FULLY_CONNECTED, SOFTMAX])
        assert kinds == expected

    def test_layer_sequence_ds(self):
        g = build_preset("ds_kws9")
        convs = [n for n in g.nodes if n.kind == CONVOLUTION]
        # stage 1 is a regular conv, stages 2..6 are depthwise + pointwise
        assert len(convs) == 1 + 5 * 2
        dw = convs[1]
        assert dw.p("groups") > 1
        pw = convs[2]
        assert (pw.p("kh"), pw.p("kw"), pw.p("groups")) == (1, 1, 1)

    def test_first_stage_stride(self):
        for name in ["kws1", "kws3", "kws9", "seed"]:
            g = build_preset(name)
            conv1 = next(n for n in g.nodes if n.kind == CONVOLUTION)
            assert (conv1.p("stride_h"), conv1.p("stride_w")) == (1, 2), name

    def test_classifier_width(self):
        g = build_preset("kws1")
        fc = next(n for n in g.nodes if n.kind == FULLY_CONNECTED)
        assert fc.out_desc.shape == (12, 1, 1)

    def test_deterministic_given_seed(self):
        a = build_preset("kws3", seed=7)
        b = build_preset("kws3", seed=7)
        c = build_preset("kws3", seed=8)
        assert np.array_equal(a.weights["conv1_w"].data,
                              b.weights["conv1_w"].data)
        assert not np.array_equal(a.weights["conv1_w"].data,
                                  c.weights["conv1_w"].data)

    def test_init_span(self):
        g = build_preset("kws1", seed=0)
        w = g.weights["conv1_w"].data
        assert np.abs(w).max() <= 0.1
        assert np.abs(w).max() > 0.05

    def test_unknown_preset(self):
        with pytest.raises(KeyError):
            build_preset("kws2")


class TestSpecParsing:
    def test_parse_stage_forms(self):
        assert parse_stage("3x3, 40") == ConvLayerSpec(3, 3, 40, 1, 1)
        assert parse_stage("4x10, 100, 1x2") == ConvLayerSpec(4, 10, 100, 1, 2)
        assert parse_stage(" 5X5 , 20 ") == ConvLayerSpec(5, 5, 20, 1, 1)

    def test_parse_stage_rejects_garbage(self):
        for bad in ["3x, 40", "3x3", "3x3, 40, 1", "axb, 10", "3x3 40"]:
            with pytest.raises(ValueError):
                parse_stage(bad)

    def test_arch_from_config(self):
        cfg = {
            "variant": "cnn",
            "stages": ["3x3, 8, 1x2", "3x3, 8", "1x1, 8",
                       "3x3, 8", "3x3, 8", "1x1, 8"],
            "num_classes": 4,
        }
        spec = arch_from_config(cfg)
        assert spec.stages[0].stride_w == 2
        assert spec.stages[1].stride_w == 1
        g = build_network(spec, seed=0)
        assert validate(g) == []
        fc = next(n for n in g.nodes if n.kind == FULLY_CONNECTED)
        assert fc.out_desc.shape[0] == 4

    def test_archspec_requires_six_stages(self):
        with pytest.raises(ValueError):
            ArchSpec("cnn", (ConvLayerSpec(3, 3, 8),) * 5)

    def test_archspec_rejects_variant(self):
        with pytest.raises(ValueError):
            ArchSpec("rnn", (ConvLayerSpec(3, 3, 8),) * 6)


class TestPareto:
    def test_known_frontier(self):
        pts = [Candidate(0.90, 10.0, name="a"),
               Candidate(0.95, 100.0, name="b"),
               Candidate(0.85, 50.0, name="c"),   # dominated by a
               Candidate(0.90, 20.0, name="d"),   # dominated by a
               Candidate(0.99, 600.0, name="e")]
        front = pareto_frontier(pts)
        assert [c.name for c in front] == ["a", "b", "e"]

    def test_sorted_by_cost(self):
        pts = [Candidate(0.99, 600.0), Candidate(0.90, 10.0),
               Candidate(0.95, 100.0)]
        costs = [c.mflops for c in pareto_frontier(pts)]
        assert costs == sorted(costs)

    def test_duplicate_points_keep_first(self):
        pts = [Candidate(0.9, 10.0, name="first"),
               Candidate(0.9, 10.0, name="second")]
        front = pareto_frontier(pts)
        assert [c.name for c in front] == ["first"]

    def test_single_point(self):
        assert len(pareto_frontier([Candidate(0.5, 1.0)])) == 1

    def test_adding_dominated_point_changes_nothing(self):
        base = [Candidate(0.90, 10.0), Candidate(0.95, 100.0)]
        extra = base + [Candidate(0.89, 55.0)]
        assert pareto_frontier(extra) == pareto_frontier(base)


class TestSearchSpace:
    def test_sampled_arch_builds(self):
        space = SearchSpace()
        for seed in range(5):
            spec = sample_arch(space, seed=seed)
            g = build_network(spec, seed=1)
            assert validate(g) == []
            assert count_flops(g).total > 0
            assert count_params(g) > 0

    def test_sampling_deterministic(self):
        assert sample_arch(SearchSpace(), seed=42) == \
            sample_arch(SearchSpace(), seed=42)
        assert sample_arch(SearchSpace(), seed=42) != \
            sample_arch(SearchSpace(), seed=43)
