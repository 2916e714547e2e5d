"""Builders for the keyword-spotting network family: six convolutional stages
(each followed by BatchNorm, Scale and ReLU), global average pooling, one
fully connected classifier and a softmax. The depthwise-separable variant
replaces stages 2..6 with a depthwise + pointwise pair.

Also holds the accuracy/FLOPs Pareto helper used for candidate selection.
"""

from __future__ import annotations

import math
import random
import re
from dataclasses import dataclass, field

import numpy as np

from .graph import (
    AVG_POOL,
    BATCH_NORM,
    CONVOLUTION,
    DEFAULT_BN_EPSILON,
    F32,
    FLATTEN,
    FULLY_CONNECTED,
    Graph,
    INPUT,
    PADDING_SAME,
    RELU,
    SCALE,
    SOFTMAX,
    TensorDesc,
    infer_shapes,
    weight_tensor,
)

CNN = "cnn"
DS_CNN = "ds_cnn"

NUM_STAGES = 6

KWS_LABELS = ["silence", "unknown", "yes", "no", "up", "down",
              "left", "right", "on", "off", "stop", "go"]

KWS_INPUT_SHAPE = (1, 40, 32)  # one channel of 40 MFCC coefficients x 32 frames

WEIGHT_INIT_SPAN = 0.1


@dataclass(frozen=True)
class ConvLayerSpec:
    kh: int
    kw: int
    out_channels: int
    stride_h: int = 1
    stride_w: int = 1


@dataclass(frozen=True)
class ArchSpec:
    variant: str
    stages: tuple[ConvLayerSpec, ...]
    num_classes: int = len(KWS_LABELS)
    input_shape: tuple[int, int, int] = KWS_INPUT_SHAPE
    name: str = "net"

    def __post_init__(self):
        if self.variant not in (CNN, DS_CNN):
            raise ValueError(f"unknown variant {self.variant!r}")
        if len(self.stages) != NUM_STAGES:
            raise ValueError(f"expected {NUM_STAGES} stages, got {len(self.stages)}")
        if self.num_classes < 2:
            raise ValueError("num_classes must be at least 2")


def _stage(kh, kw, m, sh=1, sw=1) -> ConvLayerSpec:
    return ConvLayerSpec(kh, kw, m, sh, sw)


def _spec(name: str, variant: str, stages) -> ArchSpec:
    return ArchSpec(variant=variant, stages=tuple(stages), name=name)


# First stage strides the 32-frame time axis by 2; later stages are unit stride.
_SEED_STAGES = [_stage(4, 10, 100, 1, 2)] + [_stage(3, 3, 100)] * 5
_KWS1_STAGES = [_stage(3, 3, 40, 1, 2), _stage(3, 3, 30), _stage(1, 1, 30),
                _stage(5, 5, 50), _stage(5, 5, 50), _stage(5, 5, 50)]
_KWS3_STAGES = [_stage(5, 5, 50, 1, 2), _stage(1, 1, 30), _stage(5, 5, 40),
                _stage(3, 3, 20), _stage(5, 5, 30), _stage(3, 3, 50)]
_KWS9_STAGES = [_stage(5, 5, 50, 1, 2), _stage(1, 1, 20), _stage(1, 1, 50),
                _stage(3, 3, 20), _stage(5, 5, 20), _stage(3, 3, 40)]

PRESETS: dict[str, ArchSpec] = {}
for _name, _stages in [("seed", _SEED_STAGES), ("kws1", _KWS1_STAGES),
                       ("kws3", _KWS3_STAGES), ("kws9", _KWS9_STAGES)]:
    PRESETS[_name] = _spec(_name, CNN, _stages)
    PRESETS["ds_" + _name] = _spec("ds_" + _name, DS_CNN, _stages)


# --- graph construction -----------------------------------------------------


class _Builder:
    def __init__(self, spec: ArchSpec, rng: np.random.Generator):
        self.spec = spec
        self.rng = rng
        self.nodes = []
        self.weights = {}
        self.next_id = 0
        self.last = None  # id of the most recent node

    def _add(self, kind, weights=(), params=None):
        from .graph import LayerNode

        node = LayerNode(id=self.next_id, kind=kind,
                         inputs=[] if self.last is None else [self.last],
                         weights=list(weights), params=dict(params or {}))
        self.nodes.append(node)
        self.next_id += 1
        self.last = node.id
        return node

    def _tensor(self, name, shape, random_init=True, fill=0.0):
        if random_init:
            data = self.rng.uniform(-WEIGHT_INIT_SPAN, WEIGHT_INIT_SPAN,
                                    size=shape).astype(np.float32)
        else:
            data = np.full(shape, fill, dtype=np.float32)
        self.weights[name] = weight_tensor(name, data)
        return name

    def conv(self, tag, in_c, out_c, kh, kw, sh=1, sw=1, groups=1):
        w = self._tensor(f"{tag}_w", (out_c, in_c // groups, kh, kw))
        b = self._tensor(f"{tag}_b", (out_c,))
        self._add(CONVOLUTION, [w, b],
                  {"kh": kh, "kw": kw, "stride_h": sh, "stride_w": sw,
                   "out_channels": out_c, "groups": groups,
                   "padding": PADDING_SAME})

    def bn_scale_relu(self, tag, channels):
        # BatchNorm initialized to identity (zero mean, unit variance);
        # Scale to gamma=1, beta=0. Folding removes both without changing math.
        mean = self._tensor(f"{tag}_bn_mean", (channels,), random_init=False)
        var = self._tensor(f"{tag}_bn_var", (channels,), random_init=False, fill=1.0)
        self._add(BATCH_NORM, [mean, var], {"epsilon": DEFAULT_BN_EPSILON})
        gamma = self._tensor(f"{tag}_sc_gamma", (channels,), random_init=False,
                             fill=1.0)
        beta = self._tensor(f"{tag}_sc_beta", (channels,), random_init=False)
        self._add(SCALE, [gamma, beta])
        self._add(RELU)

    def head(self, in_features):
        self._add(AVG_POOL, params={"global": True})
        self._add(FLATTEN)
        w = self._tensor("fc_w", (self.spec.num_classes, in_features))
        b = self._tensor("fc_b", (self.spec.num_classes,))
        self._add(FULLY_CONNECTED, [w, b],
                  {"out_features": self.spec.num_classes})
        self._add(SOFTMAX)


def build_network(spec: ArchSpec, seed: int = 0) -> Graph:
    """Materialize an ArchSpec as a runnable graph with seeded random conv/FC
    weights and identity BatchNorm/Scale parameters."""
    rng = np.random.default_rng(seed)
    b = _Builder(spec, rng)
    b._add(INPUT)
    in_c = spec.input_shape[0]
    for i, st in enumerate(spec.stages, start=1):
        tag = f"conv{i}"
        if spec.variant == CNN or i == 1:
            b.conv(tag, in_c, st.out_channels, st.kh, st.kw,
                   st.stride_h, st.stride_w)
            b.bn_scale_relu(tag, st.out_channels)
        else:
            # depthwise over each incoming channel, stage stride applied here
            b.conv(f"{tag}_dw", in_c, in_c, st.kh, st.kw,
                   st.stride_h, st.stride_w, groups=in_c)
            b.bn_scale_relu(f"{tag}_dw", in_c)
            # pointwise 1x1 mixes channels up to the stage width
            b.conv(f"{tag}_pw", in_c, st.out_channels, 1, 1)
            b.bn_scale_relu(f"{tag}_pw", st.out_channels)
        in_c = st.out_channels
    b.head(in_c)
    graph = Graph(nodes=b.nodes, weights=b.weights,
                  input_desc=TensorDesc(spec.input_shape),
                  name=spec.name, labels=list(KWS_LABELS[:spec.num_classes])
                  if spec.num_classes <= len(KWS_LABELS)
                  else [f"class{i}" for i in range(spec.num_classes)])
    return infer_shapes(graph)


def build_preset(name: str, seed: int = 0) -> Graph:
    if name not in PRESETS:
        raise KeyError(f"unknown preset {name!r}; have {sorted(PRESETS)}")
    return build_network(PRESETS[name], seed=seed)


# --- textual stage specs ----------------------------------------------------

_STAGE_RE = re.compile(
    r"^\s*(\d+)\s*x\s*(\d+)\s*,\s*(\d+)\s*(?:,\s*(\d+)\s*x\s*(\d+)\s*)?$",
    re.IGNORECASE)


def parse_stage(text: str) -> ConvLayerSpec:
    """Parse ``KHxKW, M[, SHxSW]`` (e.g. ``3x3, 40`` or ``5x5, 50, 1x2``)."""
    m = _STAGE_RE.match(text)
    if not m:
        raise ValueError(f"bad stage spec {text!r}; want 'KHxKW, M[, SHxSW]'")
    kh, kw, out_c = int(m.group(1)), int(m.group(2)), int(m.group(3))
    sh = int(m.group(4)) if m.group(4) else 1
    sw = int(m.group(5)) if m.group(5) else 1
    return ConvLayerSpec(kh, kw, out_c, sh, sw)


def arch_from_config(doc: dict) -> ArchSpec:
    """Build an ArchSpec from a plain dict (YAML/JSON config)."""
    stages = tuple(parse_stage(s) if isinstance(s, str)
                   else ConvLayerSpec(**s) for s in doc["stages"])
    return ArchSpec(variant=doc.get("variant", CNN), stages=stages,
                    num_classes=int(doc.get("num_classes", len(KWS_LABELS))),
                    input_shape=tuple(doc.get("input_shape", KWS_INPUT_SHAPE)),
                    name=doc.get("name", "net"))


# --- candidate selection ----------------------------------------------------


@dataclass(frozen=True)
class Candidate:
    accuracy: float
    mflops: float
    spec: ArchSpec | None = None
    name: str = ""


def pareto_frontier(candidates: list[Candidate]) -> list[Candidate]:
    """Candidates not dominated on (accuracy up, MFLOPs down). Exact ties keep
    the first occurrence; result is sorted by ascending MFLOPs."""
    kept: list[Candidate] = []
    for i, c in enumerate(candidates):
        dominated = False
        for j, d in enumerate(candidates):
            if j == i:
                continue
            better_or_equal = d.accuracy >= c.accuracy and d.mflops <= c.mflops
            strictly = d.accuracy > c.accuracy or d.mflops < c.mflops
            if better_or_equal and (strictly or j < i):
                dominated = True
                break
        if not dominated:
            kept.append(c)
    return sorted(kept, key=lambda c: (c.mflops, -c.accuracy))


# --- random architecture sampling -------------------------------------------


@dataclass(frozen=True)
class SearchSpace:
    kernel_sizes: tuple[int, ...] = (1, 3, 5)
    channel_counts: tuple[int, ...] = (20, 30, 40, 50)
    variant: str = CNN
    first_stage_stride: tuple[int, int] = (1, 2)

    def __post_init__(self):
        if not self.kernel_sizes or not self.channel_counts:
            raise ValueError("search space must offer at least one kernel size "
                             "and one channel count")


def sample_arch(space: SearchSpace, seed: int = 0) -> ArchSpec:
    """Draw a random six-stage architecture from the space. Deterministic in
    (space, seed)."""
    rng = random.Random(seed)
    stages = []
    for i in range(NUM_STAGES):
        kh = rng.choice(space.kernel_sizes)
        kw = rng.choice(space.kernel_sizes)
        m = rng.choice(space.channel_counts)
        sh, sw = space.first_stage_stride if i == 0 else (1, 1)
        stages.append(ConvLayerSpec(kh, kw, m, sh, sw))
    return ArchSpec(variant=space.variant, stages=tuple(stages),
                    name=f"sampled{seed}")
