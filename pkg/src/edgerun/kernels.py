"""Kernel registry and the concrete layer implementations.

Each implementation is registered under a stable string id with a descriptor
stating which node kinds it serves, the physical layout it requires and the
weight dtype it consumes. Convolution ships several interchangeable variants
(direct, im2col + blocked GEMM, Winograd F(2x2,3x3), grouped/depthwise,
pointwise, a channel-minor direct variant and the int8/int16 GEMM kernels) so
the implementation search has a real decision space.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .graph import (
    AVG_POOL,
    BATCH_NORM,
    CHANNEL_MAJOR,
    CHANNEL_MINOR,
    CONVOLUTION,
    F32,
    FLATTEN,
    FULLY_CONNECTED,
    Graph,
    I8,
    I16,
    LAYOUT_ANY,
    LAYOUT_CONVERT,
    LayerNode,
    RELU,
    SCALE,
    SOFTMAX,
    conv_paddings,
)

KernelFn = Callable[["ExecutionContext", LayerNode, np.ndarray, np.ndarray], None]


@dataclass(frozen=True)
class ImplDescriptor:
    id: str
    kinds: frozenset[str]
    layout: str = CHANNEL_MAJOR  # channel_major | channel_minor | any
    dtype: str = F32             # weight dtype the kernel consumes
    note: str = ""


class KernelRegistry:
    """Maps impl ids to (descriptor, kernel, applicability predicate).
    Registration order fixes the default preference order."""

    def __init__(self):
        self._impls: dict[str, tuple[ImplDescriptor, KernelFn,
                                     Callable[[LayerNode], bool] | None]] = {}

    def register(self, desc: ImplDescriptor, fn: KernelFn,
                 applies: Callable[[LayerNode], bool] | None = None) -> None:
        if desc.id in self._impls:
            raise ValueError(f"impl id {desc.id!r} already registered")
        if desc.layout not in (CHANNEL_MAJOR, CHANNEL_MINOR, LAYOUT_ANY):
            raise ValueError(f"impl {desc.id!r}: bad layout {desc.layout!r}")
        self._impls[desc.id] = (desc, fn, applies)

    def ids(self) -> list[str]:
        return list(self._impls)

    def descriptor(self, impl_id: str) -> ImplDescriptor:
        try:
            return self._impls[impl_id][0]
        except KeyError:
            raise KeyError(f"unknown impl id {impl_id!r}") from None

    def kernel(self, impl_id: str) -> KernelFn:
        try:
            return self._impls[impl_id][1]
        except KeyError:
            raise KeyError(f"unknown impl id {impl_id!r}") from None

def _node_weight_dtype(node: LayerNode, graph: Graph | None) -> str:
    if graph is None or not node.weights:
        return F32
    wt = graph.weights.get(node.weights[0])
    return wt.dtype if wt is not None else F32


def implementations_for(registry: KernelRegistry, node: LayerNode,
                        graph: Graph | None = None) -> list[str]:
    """Impl ids applicable to this node, in registration order. Without a
    graph the node's weights are assumed to be F32."""
    dtype = _node_weight_dtype(node, graph)
    out = []
    for impl_id, (desc, _, applies) in registry._impls.items():
        if node.kind not in desc.kinds:
            continue
        if desc.dtype != dtype:
            continue
        if applies is not None and not applies(node):
            continue
        out.append(impl_id)
    return out


# --- shared conv helpers ----------------------------------------------------


def _conv_geometry(ctx, node):
    src = ctx.graph.producer(node).out_desc
    c, h, w = src.shape
    kh, kw = node.p("kh"), node.p("kw")
    sh, sw = node.p("stride_h", 1), node.p("stride_w", 1)
    pt, pb, pl, pr = conv_paddings(h, w, kh, kw, sh, sw,
                                   node.p("padding", "same"))
    oc, oh, ow = node.out_desc.shape
    return (c, h, w), (kh, kw, sh, sw), (pt, pb, pl, pr), (oc, oh, ow)


def _pad_chw(x, pt, pb, pl, pr):
    if pt or pb or pl or pr:
        return np.pad(x, ((0, 0), (pt, pb), (pl, pr)))
    return x


def _finish(node, acc, bias, out):
    if bias is not None:
        acc += bias.reshape(-1, 1, 1)
    if node.fused_activation:
        np.maximum(acc, 0.0, out=acc)
    np.copyto(out, acc)


def _conv_tensors(ctx, node):
    w = ctx.weight(node.weights[0])
    b = ctx.weight(node.weights[1]) if len(node.weights) > 1 else None
    return w, b


# --- F32 convolution kernels ------------------------------------------------


def conv_direct_f32(ctx, node, x, out):
    """Accumulates one shifted input slice per kernel offset."""
    (c, h, w), (kh, kw, sh, sw), pads, (oc, oh, ow) = _conv_geometry(ctx, node)
    wgt, bias = _conv_tensors(ctx, node)
    groups = node.p("groups", 1)
    cg, og = c // groups, oc // groups
    xp = _pad_chw(x, *pads)
    acc = np.zeros((oc, oh, ow), dtype=np.float32)
    for g in range(groups):
        xg = xp[g * cg:(g + 1) * cg]
        wg = wgt[g * og:(g + 1) * og]
        dst = acc[g * og:(g + 1) * og]
        for i in range(kh):
            for j in range(kw):
                xs = xg[:, i:i + oh * sh:sh, j:j + ow * sw:sw]
                dst += np.tensordot(wg[:, :, i, j], xs, axes=([1], [0]))
    _finish(node, acc, bias, out)


def _im2col(xp, kh, kw, sh, sw, oh, ow):
    c = xp.shape[0]
    cols = np.empty((c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, i, j] = xp[:, i:i + oh * sh:sh, j:j + ow * sw:sw]
    return cols.reshape(c * kh * kw, oh * ow)


def _blocked_gemm(a, b, out2d, bm=64, bk=128, bn=256):
    """C = A @ B computed in cache-sized blocks."""
    m, k = a.shape
    n = b.shape[1]
    out2d[:] = 0.0
    for i0 in range(0, m, bm):
        ai = a[i0:i0 + bm]
        ci = out2d[i0:i0 + bm]
        for k0 in range(0, k, bk):
            ab = ai[:, k0:k0 + bk]
            bb = b[k0:k0 + bk]
            for j0 in range(0, n, bn):
                ci[:, j0:j0 + bn] += ab @ bb[:, j0:j0 + bn]


def conv_im2col_f32(ctx, node, x, out):
    """Patch-matrix lowering followed by a blocked GEMM. Single group only."""
    _, (kh, kw, sh, sw), pads, (oc, oh, ow) = _conv_geometry(ctx, node)
    wgt, bias = _conv_tensors(ctx, node)
    cols = _im2col(_pad_chw(x, *pads), kh, kw, sh, sw, oh, ow)
    acc2d = np.empty((oc, oh * ow), dtype=np.float32)
    _blocked_gemm(wgt.reshape(oc, -1), cols, acc2d)
    _finish(node, acc2d.reshape(oc, oh, ow), bias, out)


# Winograd F(2x2, 3x3) transforms
_WG_BT = np.array([[1, 0, -1, 0], [0, 1, 1, 0], [0, -1, 1, 0], [0, 1, 0, -1]],
                  dtype=np.float32)
_WG_G = np.array([[1, 0, 0], [0.5, 0.5, 0.5], [0.5, -0.5, 0.5], [0, 0, 1]],
                 dtype=np.float32)
_WG_AT = np.array([[1, 1, 1, 0], [0, 1, -1, -1]], dtype=np.float32)


def conv_winograd_f32(ctx, node, x, out):
    """F(2x2,3x3) Winograd over 4x4 input tiles; 3x3 stride-1 single-group."""
    _, (kh, kw, sh, sw), pads, (oc, oh, ow) = _conv_geometry(ctx, node)
    wgt, bias = _conv_tensors(ctx, node)
    xp = _pad_chw(x, *pads)
    th, tw = -(-oh // 2), -(-ow // 2)
    need_h, need_w = 2 * th + 2, 2 * tw + 2
    extra_h, extra_w = need_h - xp.shape[1], need_w - xp.shape[2]
    if extra_h > 0 or extra_w > 0:
        xp = np.pad(xp, ((0, 0), (0, max(extra_h, 0)), (0, max(extra_w, 0))))
    tiles = np.lib.stride_tricks.sliding_window_view(
        xp, (4, 4), axis=(1, 2))[:, ::2, ::2]          # (C, th, tw, 4, 4)
    u = np.einsum("ij,ocjk,lk->iloc", _WG_G, wgt, _WG_G)
    v = np.einsum("ij,cabjk,lk->ilcab", _WG_BT, tiles, _WG_BT)
    m = np.einsum("iloc,ilcab->iloab", u, v)
    y = np.einsum("pi,iloab,ql->pqoab", _WG_AT, m, _WG_AT)  # (2,2,O,th,tw)
    full = y.transpose(2, 3, 0, 4, 1).reshape(oc, 2 * th, 2 * tw)
    _finish(node, np.ascontiguousarray(full[:, :oh, :ow]), bias, out)


def conv_depthwise_f32(ctx, node, x, out):
    """Grouped convolution; fast path for the one-channel-per-group case."""
    (c, h, w), (kh, kw, sh, sw), pads, (oc, oh, ow) = _conv_geometry(ctx, node)
    wgt, bias = _conv_tensors(ctx, node)
    groups = node.p("groups", 1)
    cg, og = c // groups, oc // groups
    xp = _pad_chw(x, *pads)
    acc = np.zeros((oc, oh, ow), dtype=np.float32)
    if cg == 1 and og == 1:
        for i in range(kh):
            for j in range(kw):
                xs = xp[:, i:i + oh * sh:sh, j:j + ow * sw:sw]
                acc += wgt[:, 0, i, j][:, None, None] * xs
    else:
        for g in range(groups):
            xg = xp[g * cg:(g + 1) * cg]
            wg = wgt[g * og:(g + 1) * og]
            for i in range(kh):
                for j in range(kw):
                    xs = xg[:, i:i + oh * sh:sh, j:j + ow * sw:sw]
                    acc[g * og:(g + 1) * og] += np.tensordot(
                        wg[:, :, i, j], xs, axes=([1], [0]))
    _finish(node, acc, bias, out)


def conv_pointwise_f32(ctx, node, x, out):
    """1x1 convolution as a single channel-mixing matmul."""
    (c, h, w), (kh, kw, sh, sw), _, (oc, oh, ow) = _conv_geometry(ctx, node)
    wgt, bias = _conv_tensors(ctx, node)
    xs = x[:, ::sh, ::sw] if (sh > 1 or sw > 1) else x
    acc = (wgt.reshape(oc, c) @ xs.reshape(c, oh * ow)).reshape(oc, oh, ow)
    _finish(node, acc, bias, out)


def conv_direct_f32_cmin(ctx, node, x, out):
    """Direct convolution operating natively on (H, W, C) buffers."""
    (c, h, w), (kh, kw, sh, sw), (pt, pb, pl, pr), (oc, oh, ow) = \
        _conv_geometry(ctx, node)
    wgt, bias = _conv_tensors(ctx, node)
    groups = node.p("groups", 1)
    cg, og = c // groups, oc // groups
    xp = np.pad(x, ((pt, pb), (pl, pr), (0, 0))) if (pt or pb or pl or pr) else x
    acc = np.zeros((oh, ow, oc), dtype=np.float32)
    for g in range(groups):
        xg = xp[:, :, g * cg:(g + 1) * cg]
        wg = wgt[g * og:(g + 1) * og]
        dst = acc[:, :, g * og:(g + 1) * og]
        for i in range(kh):
            for j in range(kw):
                xs = xg[i:i + oh * sh:sh, j:j + ow * sw:sw, :]
                dst += xs @ wg[:, :, i, j].T
    if bias is not None:
        acc += bias
    if node.fused_activation:
        np.maximum(acc, 0.0, out=acc)
    np.copyto(out, acc)


# --- quantized convolution / FC ---------------------------------------------


def _round_half_away(x: np.ndarray) -> np.ndarray:
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


def _quantize_codes(x, scale, qmax, itype):
    codes = _round_half_away(np.asarray(x, dtype=np.float64) / scale)
    return np.clip(codes, -qmax, qmax).astype(itype)


def _bias_codes(bias, scale, acc_dtype):
    """Bias re-quantized to the accumulator scale, saturating at the
    accumulator's own range (int32 for the int8 path, int64 for int16)."""
    limit = (2 ** 31 - 1) if acc_dtype == np.int32 else 2 ** 62
    codes = _round_half_away(bias.astype(np.float64) / scale)
    return np.clip(codes, -limit, limit).astype(acc_dtype)


def _conv_quantized(ctx, node, x, out, qmax, acc_dtype):
    (c, h, w), (kh, kw, sh, sw), pads, (oc, oh, ow) = _conv_geometry(ctx, node)
    s_in, s_w, s_out = ctx.scales(node)
    groups = node.p("groups", 1)
    cg, og = c // groups, oc // groups
    wq = ctx.weight(node.weights[0]).astype(acc_dtype)
    bias = ctx.weight(node.weights[1]) if len(node.weights) > 1 else None
    xq = _quantize_codes(_pad_chw(x, *pads), s_in, qmax, acc_dtype)
    acc = np.empty((oc, oh * ow), dtype=acc_dtype)
    for g in range(groups):
        cols = _im2col(xq[g * cg:(g + 1) * cg], kh, kw, sh, sw, oh, ow)
        acc[g * og:(g + 1) * og] = wq[g * og:(g + 1) * og].reshape(og, -1) @ cols
    if bias is not None:
        acc += _bias_codes(bias, s_in * s_w, acc_dtype)[:, None]
    yq = np.clip(_round_half_away(acc * ((s_in * s_w) / s_out)), -qmax, qmax)
    if node.fused_activation:
        np.maximum(yq, 0.0, out=yq)
    np.copyto(out, (yq * s_out).astype(np.float32).reshape(oc, oh, ow))


def conv_gemm_i16(ctx, node, x, out):
    """im2col GEMM on int16 weight codes with 64-bit accumulation."""
    _conv_quantized(ctx, node, x, out, 32767, np.int64)


def conv_gemm_i8(ctx, node, x, out):
    """im2col GEMM on int8 weight codes with 32-bit accumulation."""
    _conv_quantized(ctx, node, x, out, 127, np.int32)


def _fc_quantized(ctx, node, x, out, qmax, acc_dtype):
    s_in, s_w, s_out = ctx.scales(node)
    wq = ctx.weight(node.weights[0]).astype(acc_dtype)
    bias = ctx.weight(node.weights[1]) if len(node.weights) > 1 else None
    xq = _quantize_codes(x.reshape(-1), s_in, qmax, acc_dtype)
    acc = wq @ xq
    if bias is not None:
        acc += _bias_codes(bias, s_in * s_w, acc_dtype)
    yq = np.clip(_round_half_away(acc * ((s_in * s_w) / s_out)), -qmax, qmax)
    if node.fused_activation:
        np.maximum(yq, 0.0, out=yq)
    np.copyto(out, (yq * s_out).astype(np.float32).reshape(out.shape))


def fc_gemv_i16(ctx, node, x, out):
    _fc_quantized(ctx, node, x, out, 32767, np.int64)


def fc_gemv_i8(ctx, node, x, out):
    _fc_quantized(ctx, node, x, out, 127, np.int32)


# --- remaining F32 kernels --------------------------------------------------


def fc_f32(ctx, node, x, out):
    wgt, bias = _conv_tensors(ctx, node)
    acc = wgt @ x.reshape(-1)
    if bias is not None:
        acc = acc + bias
    if node.fused_activation:
        np.maximum(acc, 0.0, out=acc)
    np.copyto(out, acc.reshape(out.shape))


def avgpool_f32(ctx, node, x, out):
    if node.p("global", False):
        np.copyto(out, x.mean(axis=(1, 2), keepdims=True))
        return
    kh, kw = node.p("kh"), node.p("kw")
    sh, sw = node.p("stride_h", 1), node.p("stride_w", 1)
    _, oh, ow = node.out_desc.shape
    acc = np.zeros_like(out, dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            acc += x[:, i:i + oh * sh:sh, j:j + ow * sw:sw]
    np.copyto(out, acc / (kh * kw))


def relu_f32(ctx, node, x, out):
    np.maximum(x, 0.0, out=out)


def _channel_param(ctx, name, layout):
    v = ctx.weight(name)
    # (C,1,1) broadcast for channel-major buffers, plain (C,) for channel-minor
    return v.reshape(-1, 1, 1) if layout == CHANNEL_MAJOR else v


def batchnorm_f32(ctx, node, x, out):
    layout = node.out_desc.layout
    mean = _channel_param(ctx, node.weights[0], layout)
    var = _channel_param(ctx, node.weights[1], layout)
    inv = 1.0 / np.sqrt(var + node.p("epsilon", 1e-5))
    np.copyto(out, (x - mean) * inv)


def scale_f32(ctx, node, x, out):
    layout = node.out_desc.layout
    gamma = _channel_param(ctx, node.weights[0], layout)
    beta = _channel_param(ctx, node.weights[1], layout)
    np.copyto(out, x * gamma + beta)


def softmax_f32(ctx, node, x, out):
    z = x.reshape(-1).astype(np.float32)
    z = z - z.max()
    e = np.exp(z)
    np.copyto(out, (e / e.sum()).reshape(out.shape))


def flatten_f32(ctx, node, x, out):
    np.copyto(out, x.reshape(out.shape))


def layout_convert_kernel(ctx, node, x, out):
    target = node.p("target_layout")
    if target == CHANNEL_MINOR:
        np.copyto(out, np.transpose(x, (1, 2, 0)))  # CHW -> HWC
    else:
        np.copyto(out, np.transpose(x, (2, 0, 1)))  # HWC -> CHW


# --- registry assembly ------------------------------------------------------


def _is_3x3_s1_dense(node):
    return (node.p("kh") == 3 and node.p("kw") == 3
            and node.p("stride_h", 1) == 1 and node.p("stride_w", 1) == 1
            and node.p("groups", 1) == 1)


def _is_1x1_dense(node):
    return (node.p("kh") == 1 and node.p("kw") == 1
            and node.p("groups", 1) == 1)


def _is_dense(node):
    return node.p("groups", 1) == 1


def _is_grouped(node):
    return node.p("groups", 1) > 1


def build_default_registry() -> KernelRegistry:
    r = KernelRegistry()
    conv = frozenset({CONVOLUTION})
    reg = r.register
    reg(ImplDescriptor("direct_f32", conv, CHANNEL_MAJOR, F32,
                       "offset-accumulation direct conv"), conv_direct_f32)
    reg(ImplDescriptor("im2col_f32", conv, CHANNEL_MAJOR, F32,
                       "im2col + blocked GEMM"), conv_im2col_f32, _is_dense)
    reg(ImplDescriptor("winograd_f32", conv, CHANNEL_MAJOR, F32,
                       "Winograd F(2x2,3x3)"), conv_winograd_f32,
        _is_3x3_s1_dense)
    reg(ImplDescriptor("depthwise_f32", conv, CHANNEL_MAJOR, F32,
                       "grouped / depthwise conv"), conv_depthwise_f32,
        _is_grouped)
    reg(ImplDescriptor("pointwise_f32", conv, CHANNEL_MAJOR, F32,
                       "1x1 conv as matmul"), conv_pointwise_f32, _is_1x1_dense)
    reg(ImplDescriptor("direct_f32_cmin", conv, CHANNEL_MINOR, F32,
                       "direct conv on HWC buffers"), conv_direct_f32_cmin)
    reg(ImplDescriptor("gemm_i16", conv, CHANNEL_MAJOR, I16,
                       "int16 weights, 64-bit accum"), conv_gemm_i16)
    reg(ImplDescriptor("gemm_i8", conv, CHANNEL_MAJOR, I8,
                       "int8 weights, 32-bit accum"), conv_gemm_i8)
    fc = frozenset({FULLY_CONNECTED})
    reg(ImplDescriptor("fc_f32", fc, CHANNEL_MAJOR, F32), fc_f32)
    reg(ImplDescriptor("fc_i16", fc, CHANNEL_MAJOR, I16), fc_gemv_i16)
    reg(ImplDescriptor("fc_i8", fc, CHANNEL_MAJOR, I8), fc_gemv_i8)
    reg(ImplDescriptor("avgpool_f32", frozenset({AVG_POOL}), CHANNEL_MAJOR),
        avgpool_f32)
    reg(ImplDescriptor("relu_f32", frozenset({RELU}), LAYOUT_ANY), relu_f32)
    reg(ImplDescriptor("batchnorm_f32", frozenset({BATCH_NORM}), LAYOUT_ANY),
        batchnorm_f32)
    reg(ImplDescriptor("scale_f32", frozenset({SCALE}), LAYOUT_ANY), scale_f32)
    reg(ImplDescriptor("softmax_f32", frozenset({SOFTMAX}), CHANNEL_MAJOR),
        softmax_f32)
    reg(ImplDescriptor("flatten", frozenset({FLATTEN}), CHANNEL_MAJOR),
        flatten_f32)
    reg(ImplDescriptor("layout_convert", frozenset({LAYOUT_CONVERT}),
                       LAYOUT_ANY), layout_convert_kernel)
    return r


_DEFAULT: KernelRegistry | None = None


def default_registry() -> KernelRegistry:
    global _DEFAULT
    if _DEFAULT is None:
        _DEFAULT = build_default_registry()
    return _DEFAULT
