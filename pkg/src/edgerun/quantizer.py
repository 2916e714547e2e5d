"""Post-training quantization: symmetric per-tensor int8/int16 weights with
activation scales taken from a calibration sweep, plus a per-layer
sensitivity report that quantizes one layer at a time.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .graph import (
    CONVOLUTION,
    F32,
    FULLY_CONNECTED,
    Graph,
    I8,
    I16,
    INPUT,
    WeightTensor,
)

INT8_SYM = "int8_sym"
INT16_SYM = "int16_sym"
SCHEMES = (INT8_SYM, INT16_SYM)

QMAX = {INT8_SYM: 127, INT16_SYM: 32767}
QDTYPE = {INT8_SYM: I8, INT16_SYM: I16}

SCALE_FLOOR = 1e-12

_QUANTIZABLE = (CONVOLUTION, FULLY_CONNECTED)


class QuantizationError(ValueError):
    pass


@dataclass
class QuantParams:
    """Symmetric scales, zero point fixed at 0. ``act_scales`` covers every
    node output (keyed by node id) so any producer can feed a quantized layer;
    ``weight_scales`` covers the conv/FC layers."""

    scheme: str
    weight_scales: dict[int, float] = field(default_factory=dict)
    act_scales: dict[int, float] = field(default_factory=dict)

    def input_scale(self, graph: Graph) -> float:
        return self.act_scales[graph.input_node.id]

    def to_dict(self) -> dict:
        return {
            "scheme": self.scheme,
            "weight_scales": {str(k): v
                              for k, v in sorted(self.weight_scales.items())},
            "act_scales": {str(k): v
                           for k, v in sorted(self.act_scales.items())},
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "QuantParams":
        return cls(
            scheme=doc["scheme"],
            weight_scales={int(k): float(v)
                           for k, v in doc.get("weight_scales", {}).items()},
            act_scales={int(k): float(v)
                        for k, v in doc.get("act_scales", {}).items()},
        )


def round_half_away(x: np.ndarray) -> np.ndarray:
    """0.5 rounds to 1, -0.5 to -1 (away from zero), unlike numpy's
    round-half-even."""
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def quantizable_nodes(graph: Graph) -> list[int]:
    return [n.id for n in graph.nodes if n.kind in _QUANTIZABLE]


def calibrate(graph: Graph, inputs: list[np.ndarray],
              scheme: str = INT16_SYM) -> QuantParams:
    """Derive weight scales from weight extrema and activation scales from the
    max absolute activation each node produces over the calibration inputs,
    using the float reference interpreter."""
    from .executor import reference_execute

    if scheme not in SCHEMES:
        raise QuantizationError(f"unknown scheme {scheme!r}")
    if not inputs:
        raise QuantizationError("calibration needs at least one input")
    qmax = QMAX[scheme]
    params = QuantParams(scheme=scheme)
    for nid in quantizable_nodes(graph):
        node = graph.node(nid)
        w = graph.weights[node.weights[0]].as_f64()
        params.weight_scales[nid] = max(float(np.abs(w).max()) / qmax,
                                        SCALE_FLOOR)
    peaks: dict[int, float] = {}
    for x in inputs:
        acts = reference_execute(graph, x, return_all=True)
        for nid, act in acts.items():
            peaks[nid] = max(peaks.get(nid, 0.0), float(np.abs(act).max()))
    for nid, peak in peaks.items():
        params.act_scales[nid] = max(peak / qmax, SCALE_FLOOR)
    return params


def quantize(graph: Graph, params: QuantParams,
             only: list[int] | None = None) -> Graph:
    """Return a copy with conv/FC weight tensors replaced by integer codes.
    Biases stay float; kernels re-quantize them to the accumulator scale at
    run time. ``only`` limits quantization to the listed node ids."""
    if params.scheme not in SCHEMES:
        raise QuantizationError(f"unknown scheme {params.scheme!r}")
    g = graph.copy()
    qmax = QMAX[params.scheme]
    qdtype = QDTYPE[params.scheme]
    targets = quantizable_nodes(g) if only is None else list(only)
    all_q = set(quantizable_nodes(g))
    for nid in targets:
        if nid not in all_q:
            raise QuantizationError(f"node {nid} is not a quantizable layer")
        if nid not in params.weight_scales:
            raise QuantizationError(f"node {nid}: no weight scale in params")
        node = g.node(nid)
        if nid not in params.act_scales:
            raise QuantizationError(f"node {nid}: no activation scale in params")
        wt = g.weights[node.weights[0]]
        if wt.dtype != F32:
            raise QuantizationError(f"tensor {wt.name!r} is already quantized")
        scale = params.weight_scales[nid]
        codes = np.clip(round_half_away(wt.as_f64() / scale), -qmax, qmax)
        g.weights[wt.name] = WeightTensor(wt.name, wt.shape, qdtype, codes)
    g.quant = QuantParams(
        scheme=params.scheme,
        weight_scales={nid: params.weight_scales[nid] for nid in targets},
        act_scales=dict(params.act_scales),
    )
    return g


def quantized_payload_bytes(graph: Graph) -> int:
    """Bytes of conv/FC weight + bias tensors only (the payload whose size the
    scheme shrinks; BatchNorm/Scale tensors are excluded)."""
    total = 0
    for nid in quantizable_nodes(graph):
        for wname in graph.node(nid).weights:
            total += graph.weights[wname].size_bytes
    return total


@dataclass
class SensitivityEntry:
    node_id: int
    tag: str
    agreement: float
    drop: float

    def to_dict(self) -> dict:
        return {"node_id": self.node_id, "tag": self.tag,
                "agreement": self.agreement, "drop": self.drop}


def sensitivity_report(graph: Graph, inputs: list[np.ndarray],
                       expected: list[int], scheme: str = INT8_SYM,
                       params: QuantParams | None = None) -> list[SensitivityEntry]:
    """Quantize one layer at a time and measure top-1 agreement against the
    expected labels. Sorted by agreement drop (worst first, ties by node id).
    The baseline is the float graph's own agreement."""
    from .executor import default_assignment, execute
    from .passes import CompileOptions, compile_graph

    if len(inputs) != len(expected):
        raise QuantizationError("inputs and expected labels differ in length")
    if params is None:
        params = calibrate(graph, inputs, scheme)

    def agreement(g: Graph) -> float:
        plan = compile_graph(g, CompileOptions(fold=False, fuse=False))
        assignment = default_assignment(plan.graph)
        hits = 0
        for x, label in zip(inputs, expected):
            probs = execute(plan, assignment, x).ravel()
            hits += int(np.argmax(probs)) == int(label)
        return hits / len(inputs)

    base = agreement(graph)
    entries = []
    for nid in quantizable_nodes(graph):
        node = graph.node(nid)
        gq = quantize(graph, params, only=[nid])
        agr = agreement(gq)
        entries.append(SensitivityEntry(
            node_id=nid, tag=node.weights[0] if node.weights else node.kind,
            agreement=agr, drop=base - agr))
    entries.sort(key=lambda e: (-e.drop, e.node_id))
    return entries
