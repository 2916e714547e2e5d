"""Graph-to-graph optimization passes and the compile driver.

Passes never mutate their argument: each copies the graph, rewrites it and
returns the new graph plus a report. The driver chains folding, activation
fusion and liveness-based memory planning into an ExecutablePlan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import (
    BATCH_NORM,
    CHANNEL_MAJOR,
    CONVOLUTION,
    DTYPE_BYTES,
    ELEMENTWISE,
    F32,
    FULLY_CONNECTED,
    Graph,
    GraphError,
    INPUT,
    LAYOUT_ANY,
    LAYOUT_CONVERT,
    LayerNode,
    RELU,
    SCALE,
    infer_shapes,
    weight_tensor,
)
from .kernels import KernelRegistry, implementations_for


@dataclass
class PassReport:
    name: str
    nodes_removed: int = 0
    bytes_saved: int = 0
    conversions_inserted: int = 0
    skipped: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"name": self.name, "nodes_removed": self.nodes_removed,
                "bytes_saved": self.bytes_saved,
                "conversions_inserted": self.conversions_inserted,
                "skipped": list(self.skipped)}


# --- BatchNorm / Scale folding ----------------------------------------------

_FOLDABLE_PRODUCERS = (CONVOLUTION, FULLY_CONNECTED)


def _single_consumer_chain(graph: Graph, node: LayerNode) -> bool:
    producer = graph.producer(node)
    return (producer.kind in _FOLDABLE_PRODUCERS
            and not producer.fused_activation
            and len(graph.consumers(producer.id)) == 1)


def _fold_into(graph: Graph, producer: LayerNode, mul: np.ndarray,
               add: np.ndarray) -> None:
    """Rewrite producer weights so y' = y * mul + add per output channel."""
    w = graph.weights[producer.weights[0]]
    wdata = w.as_f64()
    wdata *= mul.reshape((-1,) + (1,) * (wdata.ndim - 1))
    graph.weights[w.name] = weight_tensor(w.name, wdata.astype(np.float32))
    if len(producer.weights) > 1:
        b = graph.weights[producer.weights[1]]
        bdata = b.as_f64() * mul + add
    else:
        bname = f"{producer.weights[0]}_folded_bias"
        producer.weights.append(bname)
        bdata = add
    bname = producer.weights[1]
    graph.weights[bname] = weight_tensor(bname, bdata.astype(np.float32))


def fold_bn_scale(graph: Graph) -> tuple[Graph, PassReport]:
    """Fold BatchNorm and Scale layers into the convolution or FC layer that
    feeds them. Repeats until fixpoint so Conv -> BN -> Scale collapses fully.
    Layers whose producer is not foldable are left in place and reported."""
    g = graph.copy()
    report = PassReport("fold_bn_scale")
    changed = True
    while changed:
        changed = False
        for node in list(g.nodes):
            if node.kind not in (BATCH_NORM, SCALE):
                continue
            if not _single_consumer_chain(g, node):
                continue
            producer = g.producer(node)
            if node.kind == BATCH_NORM:
                mean = g.weights[node.weights[0]].as_f64()
                var = g.weights[node.weights[1]].as_f64()
                inv = 1.0 / np.sqrt(var + node.p("epsilon", 1e-5))
                mul, add = inv, -mean * inv
            else:
                gamma = g.weights[node.weights[0]].as_f64()
                beta = g.weights[node.weights[1]].as_f64()
                mul, add = gamma, beta
            _fold_into(g, producer, mul, add)
            for wname in node.weights:
                report.bytes_saved += g.weights[wname].size_bytes
                del g.weights[wname]
            _remove_node(g, node)
            report.nodes_removed += 1
            changed = True
    for node in g.nodes:
        if node.kind in (BATCH_NORM, SCALE):
            report.skipped.append(
                f"node {node.id} ({node.kind}): producer not foldable")
    return infer_shapes(g), report


def _remove_node(g: Graph, node: LayerNode) -> None:
    producer_id = node.inputs[0]
    for consumer in g.consumers(node.id):
        consumer.inputs = [producer_id if i == node.id else i
                           for i in consumer.inputs]
    g.nodes.remove(node)


# --- activation fusion ------------------------------------------------------


def fuse_activations(graph: Graph) -> tuple[Graph, PassReport]:
    """Absorb each ReLU into the convolution or FC layer directly before it,
    when that layer feeds only the ReLU."""
    g = graph.copy()
    report = PassReport("fuse_activations")
    for node in list(g.nodes):
        if node.kind != RELU:
            continue
        producer = g.producer(node)
        if (producer.kind in _FOLDABLE_PRODUCERS
                and not producer.fused_activation
                and len(g.consumers(producer.id)) == 1):
            producer.fused_activation = True
            _remove_node(g, node)
            report.nodes_removed += 1
    return infer_shapes(g), report


# --- memory planning --------------------------------------------------------


@dataclass
class MemoryPlan:
    buffer_of: dict[int, int]          # node id -> buffer id
    buffer_sizes: dict[int, int]       # buffer id -> bytes
    in_place: set[int]                 # node ids aliasing their input buffer
    intervals: dict[int, tuple[int, int]]  # node id -> (def index, last use)
    peak_bytes: int = 0

    def to_dict(self) -> dict:
        return {
            "buffer_of": {str(k): v for k, v in sorted(self.buffer_of.items())},
            "buffer_sizes": {str(k): v
                             for k, v in sorted(self.buffer_sizes.items())},
            "in_place": sorted(self.in_place),
            "intervals": {str(k): list(v)
                          for k, v in sorted(self.intervals.items())},
            "peak_bytes": self.peak_bytes,
        }


def liveness(graph: Graph) -> dict[int, tuple[int, int]]:
    """(definition index, last consumer index) per node; outputs nobody reads
    die at their own position."""
    pos = {n.id: i for i, n in enumerate(graph.nodes)}
    last = {n.id: pos[n.id] for n in graph.nodes}
    for n in graph.nodes:
        for src in n.inputs:
            last[src] = max(last[src], pos[n.id])
    return {n.id: (pos[n.id], last[n.id]) for n in graph.nodes}


def plan_memory(graph: Graph, in_place: bool = True,
                reuse: bool = True) -> MemoryPlan:
    """Greedy first-fit buffer assignment over liveness intervals. Elementwise
    nodes whose producer has no other consumer run in place."""
    if any(n.out_desc is None for n in graph.nodes):
        raise GraphError("plan_memory requires inferred shapes")
    intervals = liveness(graph)
    pos = {n.id: i for i, n in enumerate(graph.nodes)}
    buffer_of: dict[int, int] = {}
    sizes: dict[int, int] = {}
    ends: dict[int, int] = {}  # buffer id -> last index it is live at
    aliased: set[int] = set()
    next_buf = 0
    for n in graph.nodes:
        need = n.out_desc.size_bytes
        if (in_place and n.kind in ELEMENTWISE
                and len(graph.consumers(n.inputs[0])) == 1):
            buf = buffer_of[n.inputs[0]]
            buffer_of[n.id] = buf
            sizes[buf] = max(sizes[buf], need)
            ends[buf] = max(ends[buf], intervals[n.id][1])
            aliased.add(n.id)
            continue
        chosen = None
        if reuse:
            for buf in range(next_buf):  # first fit in creation order
                if ends[buf] < pos[n.id]:
                    chosen = buf
                    break
        if chosen is None:
            chosen = next_buf
            next_buf += 1
            sizes[chosen] = 0
        buffer_of[n.id] = chosen
        sizes[chosen] = max(sizes[chosen], need)
        ends[chosen] = intervals[n.id][1]
    return MemoryPlan(buffer_of=buffer_of, buffer_sizes=sizes,
                      in_place=aliased, intervals=intervals,
                      peak_bytes=sum(sizes.values()))


def naive_plan(graph: Graph) -> MemoryPlan:
    """One private buffer per node output; no reuse, no aliasing."""
    return plan_memory(graph, in_place=False, reuse=False)


# --- layout conversion insertion --------------------------------------------


def insert_layout_conversions(graph: Graph, assignment: dict[int, str],
                              registry: KernelRegistry) -> tuple[Graph, PassReport]:
    """Insert explicit layout-conversion nodes wherever a producer's physical
    layout differs from what the consumer's chosen implementation needs, and
    convert the graph output back to channel-major. Implementations with
    layout ``any`` pass the incoming layout through."""
    g = graph.copy()
    report = PassReport("insert_layout_conversions")
    for nid, impl_id in assignment.items():
        registry.descriptor(impl_id)  # raises on unknown ids
    out_layout: dict[int, str] = {}
    new_nodes: list[LayerNode] = []
    conv_cache: dict[tuple[int, str], int] = {}
    next_id = g.next_id()

    def convert(src_id: int, target: str) -> int:
        nonlocal next_id
        key = (src_id, target)
        if key in conv_cache:
            return conv_cache[key]
        node = LayerNode(id=next_id, kind=LAYOUT_CONVERT, inputs=[src_id],
                         params={"target_layout": target})
        next_id += 1
        new_nodes.append(node)
        conv_cache[key] = node.id
        out_layout[node.id] = target
        report.conversions_inserted += 1
        return node.id

    for node in g.nodes:
        if node.kind == INPUT:
            out_layout[node.id] = g.input_desc.layout
            new_nodes.append(node)
            continue
        if node.kind == LAYOUT_CONVERT:
            # an existing conversion produces its target layout; without this
            # the pass would not be idempotent on already-prepared graphs
            out_layout[node.id] = node.p("target_layout")
            new_nodes.append(node)
            continue
        impl_id = assignment.get(node.id)
        required = registry.descriptor(impl_id).layout if impl_id else LAYOUT_ANY
        incoming = out_layout[node.inputs[0]]
        if required != LAYOUT_ANY and incoming != required:
            node.inputs = [convert(node.inputs[0], required)]
            incoming = required
        new_nodes.append(node)
        out_layout[node.id] = required if required != LAYOUT_ANY else incoming

    tail = new_nodes[-1]
    if out_layout[tail.id] != CHANNEL_MAJOR:
        new_nodes.append(LayerNode(id=next_id, kind=LAYOUT_CONVERT,
                                   inputs=[tail.id],
                                   params={"target_layout": CHANNEL_MAJOR}))
        report.conversions_inserted += 1
    g.nodes = new_nodes
    return infer_shapes(g), report


# --- compile driver ---------------------------------------------------------


@dataclass(frozen=True)
class CompileOptions:
    fold: bool = True
    fuse: bool = True
    plan: bool = True


@dataclass
class ExecutablePlan:
    graph: Graph
    memory: MemoryPlan
    reports: list[PassReport] = field(default_factory=list)
    options: CompileOptions = CompileOptions()


def compile_graph(graph: Graph, options: CompileOptions | None = None) -> ExecutablePlan:
    """Run the enabled passes in order (fold, fuse, plan) and package the
    result. With everything disabled the graph passes through untouched and
    gets a naive one-buffer-per-output plan."""
    options = options or CompileOptions()
    g = infer_shapes(graph.copy())
    reports: list[PassReport] = []
    if options.fold:
        g, rep = fold_bn_scale(g)
        reports.append(rep)
    if options.fuse:
        g, rep = fuse_activations(g)
        reports.append(rep)
    plan = plan_memory(g) if options.plan else naive_plan(g)
    return ExecutablePlan(graph=g, memory=plan, reports=reports,
                          options=options)
