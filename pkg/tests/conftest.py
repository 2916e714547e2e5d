import numpy as np
import pytest

from edgerun.graph import (
    CONVOLUTION,
    Graph,
    INPUT,
    LayerNode,
    PADDING_SAME,
    TensorDesc,
    infer_shapes,
    weight_tensor,
)


def make_conv_graph(stages, input_shape=(3, 10, 12), padding=PADDING_SAME,
                    seed=0, bias=True, tail=(), bn_scale_relu=False):
    """Small conv-chain builder for kernel and pass tests.

    stages: list of dicts with kh, kw, out_channels and optional stride_h/w,
    groups. tail: any of 'pool', 'flatten', 'fc', 'softmax', 'relu' appended
    in order.
    """
    rng = np.random.default_rng(seed)
    nodes = [LayerNode(0, INPUT)]
    weights = {}
    nid = 1
    in_c = input_shape[0]

    def add(kind, wnames=(), params=None):
        nonlocal nid
        nodes.append(LayerNode(nid, kind, [nid - 1], list(wnames),
                               dict(params or {})))
        nid += 1

    def tensor(name, shape):
        weights[name] = weight_tensor(
            name, rng.uniform(-0.5, 0.5, shape).astype(np.float32))
        return name

    for i, st in enumerate(stages, start=1):
        groups = st.get("groups", 1)
        out_c = st["out_channels"]
        w = tensor(f"c{i}_w", (out_c, in_c // groups, st["kh"], st["kw"]))
        names = [w, tensor(f"c{i}_b", (out_c,))] if bias else [w]
        add(CONVOLUTION, names,
            {"kh": st["kh"], "kw": st["kw"],
             "stride_h": st.get("stride_h", 1),
             "stride_w": st.get("stride_w", 1),
             "out_channels": out_c, "groups": groups,
             "padding": st.get("padding", padding)})
        if bn_scale_relu:
            mean = tensor(f"c{i}_mean", (out_c,))
            var = f"c{i}_var"
            weights[var] = weight_tensor(
                var, rng.uniform(0.2, 2.0, (out_c,)).astype(np.float32))
            add("batchnorm", [mean, var], {"epsilon": 1e-5})
            add("scale", [tensor(f"c{i}_g", (out_c,)),
                          tensor(f"c{i}_be", (out_c,))])
            add("relu")
        in_c = out_c

    for part in tail:
        if part == "pool":
            add("avgpool", params={"global": True})
        elif part == "flatten":
            add("flatten")
        elif part == "fc":
            prev_elems = None  # resolved after shape inference below
            add("fully_connected",
                [tensor("fc_w", (5, _flat_elems(nodes, weights, input_shape))),
                 tensor("fc_b", (5,))],
                {"out_features": 5})
        elif part == "softmax":
            add("softmax")
        elif part == "relu":
            add("relu")
    g = Graph(nodes=nodes, weights=weights, input_desc=TensorDesc(input_shape))
    return infer_shapes(g)


def _flat_elems(nodes, weights, input_shape):
    probe = Graph(nodes=[LayerNode(n.id, n.kind, list(n.inputs),
                                   list(n.weights), dict(n.params))
                         for n in nodes],
                  weights=weights, input_desc=TensorDesc(input_shape))
    infer_shapes(probe)
    return probe.nodes[-1].out_desc.element_count


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
