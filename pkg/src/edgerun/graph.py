"""Computation-graph IR: typed layer nodes, shape inference, validation, and
the FLOP / parameter / size accounting used by every other module.

A Graph is a topologically ordered list of LayerNodes plus a name -> WeightTensor
map. Graphs are treated as immutable once validated; passes copy before mutating.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from typing import Any, Iterable

import numpy as np

# --- data types -------------------------------------------------------------

F32 = "f32"
I16 = "i16"
I8 = "i8"

DTYPE_BYTES = {F32: 4, I16: 2, I8: 1}

# explicit little-endian so serialized bytes are platform independent
NP_DTYPES = {F32: np.dtype("<f4"), I16: np.dtype("<i2"), I8: np.dtype("<i1")}

# --- layouts ----------------------------------------------------------------

CHANNEL_MAJOR = "channel_major"  # physical (C, H, W)
CHANNEL_MINOR = "channel_minor"  # physical (H, W, C)
LAYOUT_ANY = "any"               # valid only in kernel descriptors

# --- node kinds -------------------------------------------------------------

INPUT = "input"
CONVOLUTION = "convolution"
BATCH_NORM = "batchnorm"
SCALE = "scale"
RELU = "relu"
AVG_POOL = "avgpool"
FLATTEN = "flatten"
FULLY_CONNECTED = "fully_connected"
SOFTMAX = "softmax"
LAYOUT_CONVERT = "layout_convert"  # inserted by the compiler, carries no weights

KINDS = frozenset(
    {INPUT, CONVOLUTION, BATCH_NORM, SCALE, RELU, AVG_POOL, FLATTEN,
     FULLY_CONNECTED, SOFTMAX, LAYOUT_CONVERT}
)

# elementwise kinds eligible for in-place execution
ELEMENTWISE = frozenset({RELU, BATCH_NORM, SCALE})

PADDING_SAME = "same"
PADDING_VALID = "valid"

DEFAULT_BN_EPSILON = 1e-5


class GraphError(ValueError):
    """Raised for graphs that violate structural or shape invariants."""


@dataclass(frozen=True)
class TensorDesc:
    """Activation tensor descriptor: logical shape is always (C, H, W)."""

    shape: tuple[int, int, int]
    dtype: str = F32
    layout: str = CHANNEL_MAJOR

    def __post_init__(self):
        if len(self.shape) != 3:
            raise GraphError(f"activation shape must be rank 3, got {self.shape}")
        if self.dtype not in DTYPE_BYTES:
            raise GraphError(f"unknown dtype {self.dtype!r}")

    @property
    def element_count(self) -> int:
        c, h, w = self.shape
        return c * h * w

    @property
    def size_bytes(self) -> int:
        return self.element_count * DTYPE_BYTES[self.dtype]

    def with_layout(self, layout: str) -> "TensorDesc":
        return TensorDesc(self.shape, self.dtype, layout)


@dataclass
class WeightTensor:
    """Named constant tensor. Weights may be any rank (conv filters are 4-D),
    so they carry their own shape rather than a TensorDesc."""

    name: str
    shape: tuple[int, ...]
    dtype: str
    data: np.ndarray  # shaped, row-major

    def __post_init__(self):
        self.shape = tuple(int(s) for s in self.shape)
        want = NP_DTYPES[self.dtype]
        arr = np.asarray(self.data)
        if arr.dtype != want:
            arr = arr.astype(want)
        self.data = np.ascontiguousarray(arr.reshape(self.shape))

    @property
    def element_count(self) -> int:
        return int(np.prod(self.shape)) if self.shape else 1

    @property
    def size_bytes(self) -> int:
        return self.element_count * DTYPE_BYTES[self.dtype]

    def as_f64(self) -> np.ndarray:
        return self.data.astype(np.float64)


def weight_tensor(name: str, data: np.ndarray, dtype: str = F32) -> WeightTensor:
    arr = np.asarray(data)
    return WeightTensor(name, arr.shape, dtype, arr)


@dataclass
class LayerNode:
    """One typed graph node. Kind-specific parameters live in ``params``:

    convolution: kh, kw, stride_h, stride_w, out_channels, groups, padding
    batchnorm:   epsilon
    avgpool:     global (bool) or kh, kw, stride_h, stride_w
    fully_connected: out_features
    layout_convert:  target_layout
    """

    id: int
    kind: str
    inputs: list[int] = field(default_factory=list)
    weights: list[str] = field(default_factory=list)
    params: dict[str, Any] = field(default_factory=dict)
    fused_activation: bool = False
    out_desc: TensorDesc | None = None

    def p(self, key: str, default: Any = None) -> Any:
        return self.params.get(key, default)


@dataclass
class Graph:
    nodes: list[LayerNode]
    weights: dict[str, WeightTensor]
    input_desc: TensorDesc
    name: str = "net"
    labels: list[str] = field(default_factory=list)
    quant: Any = None  # QuantParams once quantized, else None

    # -- lookups ------------------------------------------------------------

    def node(self, node_id: int) -> LayerNode:
        for n in self.nodes:
            if n.id == node_id:
                return n
        raise KeyError(f"no node with id {node_id}")

    def index_of(self, node_id: int) -> int:
        for i, n in enumerate(self.nodes):
            if n.id == node_id:
                return i
        raise KeyError(f"no node with id {node_id}")

    def consumers(self, node_id: int) -> list[LayerNode]:
        return [n for n in self.nodes if node_id in n.inputs]

    def producer(self, node: LayerNode) -> LayerNode:
        if not node.inputs:
            raise GraphError(f"node {node.id} ({node.kind}) has no inputs")
        return self.node(node.inputs[0])

    @property
    def input_node(self) -> LayerNode:
        for n in self.nodes:
            if n.kind == INPUT:
                return n
        raise GraphError("graph has no input node")

    @property
    def output_node(self) -> LayerNode:
        return self.nodes[-1]

    def next_id(self) -> int:
        return max((n.id for n in self.nodes), default=-1) + 1

    def copy(self) -> "Graph":
        return copy.deepcopy(self)


# --- convolution arithmetic -------------------------------------------------


def conv_output_hw(h: int, w: int, kh: int, kw: int, sh: int, sw: int,
                   padding: str) -> tuple[int, int]:
    if padding == PADDING_SAME:
        return math.ceil(h / sh), math.ceil(w / sw)
    if padding == PADDING_VALID:
        if kh > h or kw > w:
            raise GraphError(
                f"kernel {kh}x{kw} larger than input {h}x{w} under valid padding")
        return (h - kh) // sh + 1, (w - kw) // sw + 1
    raise GraphError(f"unknown padding mode {padding!r}")


def conv_paddings(h: int, w: int, kh: int, kw: int, sh: int, sw: int,
                  padding: str) -> tuple[int, int, int, int]:
    """(top, bottom, left, right) zero padding; extra padding goes bottom/right."""
    if padding == PADDING_VALID:
        return 0, 0, 0, 0
    oh, ow = conv_output_hw(h, w, kh, kw, sh, sw, padding)
    ph = max((oh - 1) * sh + kh - h, 0)
    pw = max((ow - 1) * sw + kw - w, 0)
    return ph // 2, ph - ph // 2, pw // 2, pw - pw // 2


# --- shape inference --------------------------------------------------------


def _infer_node(graph: Graph, node: LayerNode) -> TensorDesc:
    if node.kind == INPUT:
        return graph.input_desc
    src = graph.producer(node).out_desc
    assert src is not None
    c, h, w = src.shape
    if node.kind == CONVOLUTION:
        kh, kw = node.p("kh"), node.p("kw")
        sh, sw = node.p("stride_h", 1), node.p("stride_w", 1)
        out_c = node.p("out_channels")
        groups = node.p("groups", 1)
        if c % groups != 0 or out_c % groups != 0:
            raise GraphError(
                f"node {node.id}: groups={groups} must divide in={c} and out={out_c}")
        oh, ow = conv_output_hw(h, w, kh, kw, sh, sw, node.p("padding", PADDING_SAME))
        return TensorDesc((out_c, oh, ow), src.dtype, src.layout)
    if node.kind in (BATCH_NORM, SCALE, RELU, SOFTMAX):
        return src
    if node.kind == AVG_POOL:
        if node.p("global", False):
            return TensorDesc((c, 1, 1), src.dtype, src.layout)
        kh, kw = node.p("kh"), node.p("kw")
        sh, sw = node.p("stride_h", 1), node.p("stride_w", 1)
        if kh > h or kw > w:
            raise GraphError(f"node {node.id}: pool window {kh}x{kw} exceeds {h}x{w}")
        return TensorDesc((c, (h - kh) // sh + 1, (w - kw) // sw + 1),
                          src.dtype, src.layout)
    if node.kind == FLATTEN:
        return TensorDesc((c * h * w, 1, 1), src.dtype, src.layout)
    if node.kind == FULLY_CONNECTED:
        return TensorDesc((node.p("out_features"), 1, 1), src.dtype, src.layout)
    if node.kind == LAYOUT_CONVERT:
        return src.with_layout(node.p("target_layout"))
    raise GraphError(f"cannot infer shape for kind {node.kind!r}")


def infer_shapes(graph: Graph) -> Graph:
    """Populate every node's output TensorDesc in topological order. Idempotent."""
    for node in graph.nodes:
        node.out_desc = _infer_node(graph, node)
    return graph


# --- validation -------------------------------------------------------------

_CONV_REQUIRED = ("kh", "kw", "out_channels")


def validate(graph: Graph) -> list[str]:
    """Check all graph invariants. Returns diagnostics; empty list means valid."""
    diags: list[str] = []
    seen_ids: set[int] = set()
    pos: dict[int, int] = {}
    for i, node in enumerate(graph.nodes):
        if node.id in seen_ids:
            diags.append(f"duplicate node id {node.id}")
        seen_ids.add(node.id)
        pos[node.id] = i

    inputs = [n for n in graph.nodes if n.kind == INPUT]
    if len(inputs) != 1:
        diags.append(f"expected exactly one input node, found {len(inputs)}")

    for i, node in enumerate(graph.nodes):
        if node.kind not in KINDS:
            diags.append(f"node {node.id}: unknown kind {node.kind!r}")
            continue
        if node.kind == INPUT and node.inputs:
            diags.append(f"node {node.id}: input node must not have inputs")
        if node.kind != INPUT and len(node.inputs) != 1:
            diags.append(f"node {node.id} ({node.kind}): expected 1 input, "
                         f"got {len(node.inputs)}")
        for ref in node.inputs:
            if ref not in pos:
                diags.append(f"node {node.id}: references unknown node {ref}")
            elif pos[ref] >= i:
                diags.append(f"node {node.id}: references later node {ref} "
                             f"(graph must be topologically ordered)")
        for wname in node.weights:
            if wname not in graph.weights:
                diags.append(f"node {node.id}: missing weight tensor {wname!r}")
        if node.kind == CONVOLUTION:
            for key in _CONV_REQUIRED:
                if node.p(key) is None:
                    diags.append(f"node {node.id}: convolution missing {key!r}")
        if node.kind == FULLY_CONNECTED and node.p("out_features") is None:
            diags.append(f"node {node.id}: fully_connected missing 'out_features'")
    if diags:
        return diags

    # shape inference on a copy so validate never mutates its argument
    probe = graph.copy()
    try:
        infer_shapes(probe)
    except (GraphError, KeyError) as exc:
        diags.append(f"shape inference failed: {exc}")
        return diags

    for node in probe.nodes:
        diags.extend(_check_weight_shapes(probe, node))
    return diags


def _check_weight_shapes(graph: Graph, node: LayerNode) -> list[str]:
    diags: list[str] = []

    def w(idx: int) -> WeightTensor | None:
        if idx < len(node.weights):
            return graph.weights.get(node.weights[idx])
        return None

    if node.kind == CONVOLUTION:
        in_c = graph.producer(node).out_desc.shape[0]
        out_c = node.p("out_channels")
        groups = node.p("groups", 1)
        expect = (out_c, in_c // groups, node.p("kh"), node.p("kw"))
        wt = w(0)
        if wt is None:
            diags.append(f"node {node.id}: convolution has no weight tensor")
        elif wt.shape != expect:
            diags.append(f"node {node.id}: weight {wt.name!r} shape {wt.shape} "
                         f"!= expected {expect}")
        bt = w(1)
        if bt is not None and bt.shape != (out_c,):
            diags.append(f"node {node.id}: bias {bt.name!r} shape {bt.shape} "
                         f"!= ({out_c},)")
    elif node.kind == FULLY_CONNECTED:
        in_n = graph.producer(node).out_desc.element_count
        out_n = node.p("out_features")
        wt = w(0)
        if wt is None:
            diags.append(f"node {node.id}: fully_connected has no weight tensor")
        elif wt.shape != (out_n, in_n):
            diags.append(f"node {node.id}: weight {wt.name!r} shape {wt.shape} "
                         f"!= ({out_n}, {in_n})")
        bt = w(1)
        if bt is not None and bt.shape != (out_n,):
            diags.append(f"node {node.id}: bias {bt.name!r} shape {bt.shape} "
                         f"!= ({out_n},)")
    elif node.kind in (BATCH_NORM, SCALE):
        c = graph.producer(node).out_desc.shape[0]
        want = 2
        if len(node.weights) != want:
            diags.append(f"node {node.id} ({node.kind}): expected {want} weight "
                         f"tensors, got {len(node.weights)}")
        for wname in node.weights:
            wt = graph.weights.get(wname)
            if wt is not None and wt.shape != (c,):
                diags.append(f"node {node.id}: {wname!r} shape {wt.shape} != ({c},)")
    return diags


# --- accounting -------------------------------------------------------------


@dataclass
class FlopReport:
    per_node: dict[int, int]
    total: int

    @property
    def total_mflops(self) -> float:
        return self.total / 1e6


def count_flops(graph: Graph) -> FlopReport:
    """FLOPs with the 2-per-MAC convention. Only convolution and fully
    connected layers count; normalization, activations, pooling and softmax
    contribute zero."""
    per: dict[int, int] = {}
    for node in graph.nodes:
        if node.out_desc is None:
            raise GraphError("count_flops requires inferred shapes")
        flops = 0
        if node.kind == CONVOLUTION:
            in_c = graph.producer(node).out_desc.shape[0]
            groups = node.p("groups", 1)
            _, oh, ow = node.out_desc.shape
            macs = (node.p("kh") * node.p("kw") * (in_c // groups)
                    * node.p("out_channels") * oh * ow)
            flops = 2 * macs
        elif node.kind == FULLY_CONNECTED:
            in_n = graph.producer(node).out_desc.element_count
            flops = 2 * in_n * node.p("out_features")
        per[node.id] = flops
    return FlopReport(per, sum(per.values()))


def count_params(graph: Graph) -> int:
    """Total number of stored weight scalars (conv/FC weights and biases plus
    the four per-channel tensors of each BatchNorm + Scale pair)."""
    return sum(w.element_count for w in graph.weights.values())


def model_size_bytes(graph: Graph) -> int:
    return sum(w.size_bytes for w in graph.weights.values())


@dataclass
class SparsityReport:
    per_tensor: dict[str, float]
    overall: float


def sparsity_report(graph: Graph) -> SparsityReport:
    """Fraction of exactly-zero weights, per tensor and overall."""
    per: dict[str, float] = {}
    zeros = total = 0
    for name, wt in graph.weights.items():
        z = int(np.count_nonzero(wt.data == 0))
        per[name] = z / wt.element_count if wt.element_count else 0.0
        zeros += z
        total += wt.element_count
    return SparsityReport(per, zeros / total if total else 0.0)


# --- comparison -------------------------------------------------------------


def graphs_equal(a: Graph, b: Graph) -> bool:
    """Structural equality plus bitwise weight equality."""
    if len(a.nodes) != len(b.nodes) or a.input_desc != b.input_desc:
        return False
    if a.name != b.name or a.labels != b.labels:
        return False
    for na, nb in zip(a.nodes, b.nodes):
        if (na.id, na.kind, na.inputs, na.weights, na.params,
                na.fused_activation) != \
           (nb.id, nb.kind, nb.inputs, nb.weights, nb.params,
                nb.fused_activation):
            return False
    if set(a.weights) != set(b.weights):
        return False
    for name, wa in a.weights.items():
        wb = b.weights[name]
        if wa.shape != wb.shape or wa.dtype != wb.dtype:
            return False
        if wa.data.tobytes() != wb.data.tobytes():
            return False
    return True


def topo_check(nodes: Iterable[LayerNode]) -> bool:
    seen: set[int] = set()
    for n in nodes:
        if any(i not in seen for i in n.inputs):
            return False
        seen.add(n.id)
    return True
