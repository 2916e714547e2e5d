"""Graph executor: runs an ExecutablePlan over a preallocated buffer arena
with a chosen per-layer implementation assignment, plus a slow float64
reference interpreter used as ground truth by the tests and the calibrator.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from .graph import (
    AVG_POOL,
    BATCH_NORM,
    CHANNEL_MINOR,
    CONVOLUTION,
    F32,
    FLATTEN,
    FULLY_CONNECTED,
    Graph,
    GraphError,
    INPUT,
    LAYOUT_ANY,
    LAYOUT_CONVERT,
    LayerNode,
    RELU,
    SCALE,
    SOFTMAX,
    TensorDesc,
    conv_paddings,
)
from .kernels import (
    KernelRegistry,
    _node_weight_dtype,
    default_registry,
    implementations_for,
)
from .passes import ExecutablePlan, MemoryPlan, insert_layout_conversions, plan_memory

POISON = np.float32(np.nan)


class ExecutionError(RuntimeError):
    pass


def _physical_shape(desc: TensorDesc) -> tuple[int, ...]:
    c, h, w = desc.shape
    return (h, w, c) if desc.layout == CHANNEL_MINOR else (c, h, w)


class ExecutionContext:
    """What kernels see: the graph, raw weight arrays and quantization scales."""

    def __init__(self, graph: Graph):
        self.graph = graph
        self.quant = graph.quant

    def weight(self, name: str) -> np.ndarray:
        return self.graph.weights[name].data

    def scales(self, node: LayerNode) -> tuple[float, float, float]:
        """(input scale, weight scale, output scale) for a quantized node."""
        if self.quant is None:
            raise ExecutionError(f"node {node.id} needs quantization scales "
                                 "but the graph carries none")
        producer = self.graph.producer(node)
        while producer.kind == LAYOUT_CONVERT:  # conversions preserve scale
            producer = self.graph.producer(producer)
        try:
            return (self.quant.act_scales[producer.id],
                    self.quant.weight_scales[node.id],
                    self.quant.act_scales[node.id])
        except KeyError as exc:
            raise ExecutionError(f"node {node.id}: missing quantization "
                                 f"scale {exc}") from exc


def resolve_impl(plan_graph: Graph, node: LayerNode, assignment: dict[int, str],
                 registry: KernelRegistry) -> str:
    impl_id = assignment.get(node.id)
    if impl_id is not None:
        try:
            registry.descriptor(impl_id)
        except KeyError as exc:
            raise ExecutionError(
                f"node {node.id}: assignment names unknown impl "
                f"{impl_id!r}") from exc
        return impl_id
    candidates = implementations_for(registry, node, plan_graph)
    if not candidates:
        raise ExecutionError(f"node {node.id} ({node.kind}): no applicable "
                             "implementation")
    return candidates[0]


def execute(plan: ExecutablePlan, assignment: dict[int, str], x: np.ndarray,
            registry: KernelRegistry | None = None,
            timings: dict[int, float] | None = None,
            poison: bool = False) -> np.ndarray:
    """Run the plan and return the output activation (channel-major). With
    ``timings`` supplied, per-node wall seconds are recorded into it. With
    ``poison`` enabled every buffer is overwritten with NaN the moment its
    liveness interval ends, to expose bad aliasing in the memory plan."""
    registry = registry or default_registry()
    graph, mem = plan.graph, plan.memory
    ctx = ExecutionContext(graph)

    arena = {buf: np.empty(size // 4, dtype=np.float32)
             for buf, size in mem.buffer_sizes.items()}
    views: dict[int, np.ndarray] = {}
    for node in graph.nodes:
        desc = node.out_desc
        if desc is None:
            raise ExecutionError("plan graph is missing inferred shapes")
        if node.id in mem.in_place:
            views[node.id] = views[node.inputs[0]]
        else:
            flat = arena[mem.buffer_of[node.id]][:desc.element_count]
            views[node.id] = flat.reshape(_physical_shape(desc))

    final_buf = mem.buffer_of[graph.nodes[-1].id]
    buf_ends: dict[int, int] = {}
    for nid, buf in mem.buffer_of.items():
        buf_ends[buf] = max(buf_ends.get(buf, -1), mem.intervals[nid][1])
    x = np.asarray(x, dtype=np.float32)

    for i, node in enumerate(graph.nodes):
        out = views[node.id]
        if node.kind == INPUT:
            if x.shape != out.shape:
                raise ExecutionError(f"input shape {x.shape} != expected "
                                     f"{out.shape}")
            np.copyto(out, x)
            elapsed = None
        else:
            impl_id = resolve_impl(graph, node, assignment, registry)
            desc = registry.descriptor(impl_id)
            if node.kind not in desc.kinds:
                raise ExecutionError(f"impl {impl_id!r} does not implement "
                                     f"{node.kind}")
            wdtype = _node_weight_dtype(node, graph)
            if desc.dtype != wdtype:
                raise ExecutionError(
                    f"node {node.id}: impl {impl_id!r} consumes {desc.dtype} "
                    f"weights but the node carries {wdtype}")
            if (desc.layout != LAYOUT_ANY
                    and node.out_desc.layout != desc.layout):
                raise ExecutionError(
                    f"node {node.id}: impl {impl_id!r} needs layout "
                    f"{desc.layout} but graph carries {node.out_desc.layout}; "
                    "run insert_layout_conversions for this assignment")
            src = views[node.inputs[0]]
            kernel = registry.kernel(impl_id)
            t0 = time.perf_counter()
            kernel(ctx, node, src, out)
            elapsed = time.perf_counter() - t0
        if timings is not None and elapsed is not None:
            timings[node.id] = timings.get(node.id, 0.0) + elapsed
        if poison:
            for buf, arr in arena.items():
                if buf != final_buf and buf_ends.get(buf, -1) == i:
                    arr.fill(POISON)

    return views[graph.nodes[-1].id].copy()


# --- assignment helpers -----------------------------------------------------


def filter_candidates(candidates: list[str], allowed: set[str] | None) -> list[str]:
    """Restrict to the allowed ids where possible; if nothing survives the
    filter, keep the original list so the graph stays executable."""
    if not allowed:
        return candidates
    kept = [c for c in candidates if c in allowed]
    return kept or candidates


def default_assignment(graph: Graph, registry: KernelRegistry | None = None,
                       prefer: list[str] | None = None,
                       allowed: set[str] | None = None) -> dict[int, str]:
    """First applicable impl per node, optionally preferring some ids (used
    for uniform all-X assignments) and optionally restricted to a filter."""
    registry = registry or default_registry()
    out: dict[int, str] = {}
    for node in graph.nodes:
        if node.kind == INPUT:
            continue
        candidates = filter_candidates(
            implementations_for(registry, node, graph), allowed)
        if not candidates:
            raise ExecutionError(f"node {node.id} ({node.kind}): no applicable "
                                 "implementation")
        chosen = candidates[0]
        if prefer:
            for p in prefer:
                if p in candidates:
                    chosen = p
                    break
        out[node.id] = chosen
    return out


def prepare(plan: ExecutablePlan, assignment: dict[int, str],
            registry: KernelRegistry | None = None) -> ExecutablePlan:
    """Specialize a plan for an assignment: insert any layout conversions the
    chosen impls require and re-plan memory if the graph changed."""
    registry = registry or default_registry()
    g2, rep = insert_layout_conversions(plan.graph, assignment, registry)
    if rep.conversions_inserted == 0:
        return plan
    mem = plan_memory(g2) if plan.options.plan else \
        plan_memory(g2, in_place=False, reuse=False)
    return ExecutablePlan(graph=g2, memory=mem,
                          reports=plan.reports + [rep], options=plan.options)


def run_assignment(plan: ExecutablePlan, assignment: dict[int, str],
                   x: np.ndarray, registry: KernelRegistry | None = None,
                   timings: dict[int, float] | None = None) -> np.ndarray:
    """prepare() + execute() in one call."""
    registry = registry or default_registry()
    prepared = prepare(plan, assignment, registry)
    return execute(prepared, assignment, x, registry, timings=timings)


def classify(plan: ExecutablePlan, assignment: dict[int, str],
             features: np.ndarray,
             registry: KernelRegistry | None = None) -> tuple[str, np.ndarray]:
    """Run one inference and map the argmax to the graph's label list."""
    probs = run_assignment(plan, assignment, features, registry).ravel()
    labels = plan.graph.labels
    idx = int(np.argmax(probs))
    label = labels[idx] if idx < len(labels) else str(idx)
    return label, probs


# --- float64 reference interpreter ------------------------------------------


def _ref_conv(graph: Graph, node: LayerNode, x: np.ndarray) -> np.ndarray:
    kh, kw = node.p("kh"), node.p("kw")
    sh, sw = node.p("stride_h", 1), node.p("stride_w", 1)
    groups = node.p("groups", 1)
    c, h, w = x.shape
    pt, pb, pl, pr = conv_paddings(h, w, kh, kw, sh, sw,
                                   node.p("padding", "same"))
    xp = np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    wt = _ref_weight(graph, node, 0)
    oc, oh, ow = node.out_desc.shape
    cg, og = c // groups, oc // groups
    out = np.empty((oc, oh, ow), dtype=np.float64)
    for g in range(groups):
        wg = wt[g * og:(g + 1) * og]  # (og, cg, kh, kw)
        for i in range(oh):
            for j in range(ow):
                patch = xp[g * cg:(g + 1) * cg,
                           i * sh:i * sh + kh, j * sw:j * sw + kw]
                out[g * og:(g + 1) * og, i, j] = np.tensordot(
                    wg, patch, axes=([1, 2, 3], [0, 1, 2]))
    if len(node.weights) > 1:
        out += _ref_weight(graph, node, 1).reshape(-1, 1, 1)
    return out


def _ref_weight(graph: Graph, node: LayerNode, idx: int) -> np.ndarray:
    """Weight tensor as float64; quantized codes are dequantized by their
    stored scale so the reference stays the semantic ground truth."""
    wt = graph.weights[node.weights[idx]]
    data = wt.as_f64()
    if wt.dtype != F32 and idx == 0:
        if graph.quant is None:
            raise ExecutionError(f"tensor {wt.name!r} is quantized but the "
                                 "graph has no quantization parameters")
        data = data * graph.quant.weight_scales[node.id]
    return data


def reference_execute(graph: Graph, x: np.ndarray,
                      return_all: bool = False):
    """Straightforward float64 interpreter over logical (C, H, W) tensors.
    Layout conversions are identity here. Returns the final activation, or a
    dict of every node's activation with ``return_all``."""
    acts: dict[int, np.ndarray] = {}
    x = np.asarray(x, dtype=np.float64)
    for node in graph.nodes:
        if node.out_desc is None:
            raise ExecutionError("reference_execute requires inferred shapes")
        if node.kind == INPUT:
            if x.shape != graph.input_desc.shape:
                raise ExecutionError(f"input shape {x.shape} != "
                                     f"{graph.input_desc.shape}")
            y = x.copy()
        else:
            src = acts[node.inputs[0]]
            if node.kind == CONVOLUTION:
                y = _ref_conv(graph, node, src)
            elif node.kind == BATCH_NORM:
                mean = _ref_weight(graph, node, 0).reshape(-1, 1, 1)
                var = _ref_weight(graph, node, 1).reshape(-1, 1, 1)
                y = (src - mean) / np.sqrt(var + node.p("epsilon", 1e-5))
            elif node.kind == SCALE:
                gamma = _ref_weight(graph, node, 0).reshape(-1, 1, 1)
                beta = _ref_weight(graph, node, 1).reshape(-1, 1, 1)
                y = src * gamma + beta
            elif node.kind == RELU:
                y = np.maximum(src, 0.0)
            elif node.kind == AVG_POOL:
                if node.p("global", False):
                    y = src.mean(axis=(1, 2), keepdims=True)
                else:
                    kh, kw = node.p("kh"), node.p("kw")
                    sh, sw = node.p("stride_h", 1), node.p("stride_w", 1)
                    _, oh, ow = node.out_desc.shape
                    y = np.zeros((src.shape[0], oh, ow))
                    for i in range(oh):
                        for j in range(ow):
                            y[:, i, j] = src[:, i * sh:i * sh + kh,
                                             j * sw:j * sw + kw].mean(axis=(1, 2))
            elif node.kind == FLATTEN:
                y = src.reshape(node.out_desc.shape)
            elif node.kind == FULLY_CONNECTED:
                w = _ref_weight(graph, node, 0)
                y = w @ src.reshape(-1)
                if len(node.weights) > 1:
                    y = y + _ref_weight(graph, node, 1)
                y = y.reshape(node.out_desc.shape)
            elif node.kind == SOFTMAX:
                z = src.reshape(-1)
                e = np.exp(z - z.max())
                y = (e / e.sum()).reshape(node.out_desc.shape)
            elif node.kind == LAYOUT_CONVERT:
                y = src.copy()
            else:
                raise ExecutionError(f"reference cannot run kind {node.kind!r}")
            if node.fused_activation:
                y = np.maximum(y, 0.0)
        acts[node.id] = y
    return acts if return_all else acts[graph.nodes[-1].id]
