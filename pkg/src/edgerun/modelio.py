"""Model serialization: a JSON manifest describing graph structure and a
little-endian binary blob holding the weight tensors.

Blob layout: magic ``LPNW``, u16 version, u32 tensor count, then per tensor
u16 name length + UTF-8 name, u8 dtype code, u8 rank, u32 extents, raw
little-endian data. Everything is byte-exact on round-trip.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from .graph import (
    CHANNEL_MAJOR,
    DTYPE_BYTES,
    F32,
    Graph,
    GraphError,
    KINDS,
    LayerNode,
    NP_DTYPES,
    TensorDesc,
    WeightTensor,
    infer_shapes,
    validate,
)

MAGIC = b"LPNW"
BLOB_VERSION = 1
MANIFEST_VERSION = 1
MANIFEST_FORMAT = "edgerun-model"

DTYPE_CODES = {"f32": 0, "i16": 1, "i8": 2}
CODE_DTYPES = {v: k for k, v in DTYPE_CODES.items()}

MANIFEST_NAME = "manifest.json"
BLOB_NAME = "weights.lpw"


class ModelFormatError(ValueError):
    """Raised for malformed manifests or weight blobs."""


# --- weight blob ------------------------------------------------------------


def save_weights(path: str | Path, tensors: Iterable[WeightTensor]) -> None:
    tensors = list(tensors)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", BLOB_VERSION, len(tensors)))
        for wt in tensors:
            name = wt.name.encode("utf-8")
            fh.write(struct.pack("<H", len(name)))
            fh.write(name)
            fh.write(struct.pack("<BB", DTYPE_CODES[wt.dtype], len(wt.shape)))
            for extent in wt.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(np.ascontiguousarray(wt.data, dtype=NP_DTYPES[wt.dtype]).tobytes())


def load_weights(path: str | Path) -> dict[str, WeightTensor]:
    raw = Path(path).read_bytes()
    off = 0

    def take(n: int) -> bytes:
        nonlocal off
        if off + n > len(raw):
            raise ModelFormatError(f"{path}: truncated blob at offset {off}")
        chunk = raw[off:off + n]
        off += n
        return chunk

    if take(4) != MAGIC:
        raise ModelFormatError(f"{path}: bad magic, not a weight blob")
    version, count = struct.unpack("<HI", take(6))
    if version != BLOB_VERSION:
        raise ModelFormatError(f"{path}: unsupported blob version {version}")
    out: dict[str, WeightTensor] = {}
    for _ in range(count):
        (name_len,) = struct.unpack("<H", take(2))
        name = take(name_len).decode("utf-8")
        code, rank = struct.unpack("<BB", take(2))
        if code not in CODE_DTYPES:
            raise ModelFormatError(f"{path}: tensor {name!r} has unknown dtype "
                                   f"code {code}")
        shape = tuple(struct.unpack("<I", take(4))[0] for _ in range(rank))
        dtype = CODE_DTYPES[code]
        n_elem = 1
        for extent in shape:
            n_elem *= extent
        data = np.frombuffer(take(n_elem * DTYPE_BYTES[dtype]),
                             dtype=NP_DTYPES[dtype]).reshape(shape).copy()
        if name in out:
            raise ModelFormatError(f"{path}: duplicate tensor {name!r}")
        out[name] = WeightTensor(name, shape, dtype, data)
    if off != len(raw):
        raise ModelFormatError(f"{path}: {len(raw) - off} trailing bytes")
    return out


# --- tensor containers (features etc.) --------------------------------------


def save_tensor(path: str | Path, array: np.ndarray, name: str = "tensor") -> None:
    arr = np.asarray(array, dtype=np.float32)
    save_weights(path, [WeightTensor(name, arr.shape, F32, arr)])


def load_tensor(path: str | Path) -> np.ndarray:
    tensors = load_weights(path)
    if len(tensors) != 1:
        raise ModelFormatError(f"{path}: expected a single tensor, "
                               f"found {len(tensors)}")
    return next(iter(tensors.values())).data


# --- manifest ---------------------------------------------------------------


def graph_to_manifest(graph: Graph) -> dict:
    doc: dict = {
        "format": MANIFEST_FORMAT,
        "version": MANIFEST_VERSION,
        "name": graph.name,
        "labels": list(graph.labels),
        "input": {
            "shape": list(graph.input_desc.shape),
            "dtype": graph.input_desc.dtype,
            "layout": graph.input_desc.layout,
        },
        "nodes": [
            {
                "id": n.id,
                "kind": n.kind,
                "inputs": list(n.inputs),
                "weights": list(n.weights),
                "params": dict(n.params),
                "fused_activation": n.fused_activation,
            }
            for n in graph.nodes
        ],
    }
    if graph.quant is not None:
        doc["quant"] = graph.quant.to_dict()
    return doc


def graph_from_manifest(doc: dict, weights: dict[str, WeightTensor]) -> Graph:
    try:
        if doc.get("format") != MANIFEST_FORMAT:
            raise ModelFormatError(f"not a model manifest "
                                   f"(format={doc.get('format')!r})")
        if doc.get("version") != MANIFEST_VERSION:
            raise ModelFormatError(f"unsupported manifest version "
                                   f"{doc.get('version')!r}")
        inp = doc["input"]
        desc = TensorDesc(tuple(inp["shape"]), inp.get("dtype", F32),
                          inp.get("layout", CHANNEL_MAJOR))
        nodes = []
        for nd in doc["nodes"]:
            kind = nd["kind"]
            if kind not in KINDS:
                raise ModelFormatError(f"node {nd.get('id')}: unknown kind {kind!r}")
            nodes.append(LayerNode(
                id=int(nd["id"]),
                kind=kind,
                inputs=[int(i) for i in nd.get("inputs", [])],
                weights=list(nd.get("weights", [])),
                params=dict(nd.get("params", {})),
                fused_activation=bool(nd.get("fused_activation", False)),
            ))
    except (KeyError, TypeError) as exc:
        raise ModelFormatError(f"malformed manifest: {exc!r}") from exc

    graph = Graph(nodes=nodes, weights=weights, input_desc=desc,
                  name=doc.get("name", "net"), labels=list(doc.get("labels", [])))
    if "quant" in doc:
        from .quantizer import QuantParams

        graph.quant = QuantParams.from_dict(doc["quant"])
    return graph


# --- whole models -----------------------------------------------------------


def save_model(graph: Graph, manifest_path: str | Path,
               blob_path: str | Path) -> None:
    """Serialize a model as manifest + weight blob. An invalid graph is
    refused so a broken model can never reach disk."""
    diags = validate(graph)
    if diags:
        raise ModelFormatError(f"refusing to save invalid graph: {diags[0]}")
    doc = graph_to_manifest(graph)
    Path(manifest_path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    save_weights(blob_path, graph.weights.values())


def load_model(manifest_path: str | Path, blob_path: str | Path) -> Graph:
    """Load, validate and shape-infer a model. Raises ModelFormatError with
    the first diagnostic if the graph is invalid."""
    try:
        doc = json.loads(Path(manifest_path).read_text())
    except json.JSONDecodeError as exc:
        raise ModelFormatError(f"{manifest_path}: invalid JSON: {exc}") from exc
    weights = load_weights(blob_path)
    graph = graph_from_manifest(doc, weights)
    referenced = {w for n in graph.nodes for w in n.weights}
    missing = sorted(referenced - set(weights))
    if missing:
        raise ModelFormatError(f"{blob_path}: missing weight tensors {missing}")
    diags = validate(graph)
    if diags:
        raise ModelFormatError(f"invalid model: {diags[0]} "
                               f"({len(diags)} diagnostics)")
    return infer_shapes(graph)


def save_model_dir(graph: Graph, model_dir: str | Path) -> Path:
    """Write manifest.json + weights.lpw into a directory; returns the dir."""
    d = Path(model_dir)
    d.mkdir(parents=True, exist_ok=True)
    save_model(graph, d / MANIFEST_NAME, d / BLOB_NAME)
    return d


def load_model_dir(model_dir: str | Path) -> Graph:
    d = Path(model_dir)
    return load_model(d / MANIFEST_NAME, d / BLOB_NAME)
