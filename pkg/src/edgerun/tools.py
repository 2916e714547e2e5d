"""Tool implementations shared by the workflow runner and the CLI.

Every tool has the signature (inputs, outputs, config, seed) where inputs and
outputs map artifact ids to paths. Tools read files, call the library and
write files; all real logic lives in the other modules.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from . import audio, bench, executor, modelio, netbuilder, quantizer
from .graph import count_flops, count_params, model_size_bytes
from .kernels import default_registry
from .passes import CompileOptions, compile_graph
from .search import SearchConfig, search as qsearch

ASSIGNMENT_NAME = "assignment.json"
FEATURES_NAME = "features.lpt"


class ToolError(ValueError):
    pass


def load_assignment(path: str | Path) -> dict[int, str]:
    doc = json.loads(Path(path).read_text())
    if isinstance(doc, dict) and "assignment" in doc:
        doc = doc["assignment"]
    return {int(k): str(v) for k, v in doc.items()}


def save_assignment(assignment: dict[int, str], path: str | Path) -> None:
    bench.emit_report({"assignment": {str(k): v
                                      for k, v in sorted(assignment.items())}},
                      path)


def _single_input(inputs: dict[str, Path]) -> Path:
    if len(inputs) != 1:
        raise ToolError(f"expected exactly one input artifact, "
                        f"got {sorted(inputs)}")
    return next(iter(inputs.values()))


def _single_output(outputs: dict[str, Path]) -> Path:
    if len(outputs) != 1:
        raise ToolError(f"expected exactly one output artifact, "
                        f"got {sorted(outputs)}")
    return next(iter(outputs.values()))


def _classify_input(path: Path) -> str:
    """model dir / assignment file / features, recognized by content."""
    if (path / modelio.MANIFEST_NAME).exists():
        return "model"
    if (path / ASSIGNMENT_NAME).exists() or path.name == ASSIGNMENT_NAME:
        return "assignment"
    return "features"


def _sorted_inputs(inputs: dict[str, Path]) -> dict[str, Path]:
    by_kind: dict[str, Path] = {}
    for path in inputs.values():
        kind = _classify_input(path)
        if kind in by_kind:
            raise ToolError(f"two {kind} inputs given")
        by_kind[kind] = path
    return by_kind


def _load_features_file(path: Path) -> np.ndarray:
    return modelio.load_tensor(path).astype(np.float32)


def _load_feature_set(path: Path, limit: int | None = None) -> list[np.ndarray]:
    """A features artifact is either one .lpt file or a directory of them."""
    if path.is_file():
        return [_load_features_file(path)]
    files = sorted(path.glob("*.lpt"))
    if not files:
        raise ToolError(f"{path}: no .lpt feature files")
    if limit:
        files = files[:limit]
    return [_load_features_file(f) for f in files]


def _resolve_assignment(graph, config, assignment_path: Path | None):
    if assignment_path is not None:
        p = assignment_path
        if p.is_dir():
            p = p / ASSIGNMENT_NAME
        return load_assignment(p)
    allowed = set(config["impls"]) if config.get("impls") else None
    return executor.default_assignment(graph, allowed=allowed)


# --- tools ------------------------------------------------------------------


def tool_ingest(inputs, outputs, config, seed):
    root = _single_input(inputs)
    out = _single_output(outputs)
    fractions = tuple(config.get("fractions", (0.8, 0.1, 0.1)))
    manifest = audio.import_dataset(root, fractions=fractions,
                                    seed=int(config.get("seed", seed)))
    manifest.save(out / "manifest.jsonl")


def tool_features(inputs, outputs, config, seed):
    src = _single_input(inputs)
    out = _single_output(outputs)
    cfg = audio.MfccConfig(**config.get("mfcc", {}))
    if src.is_file():
        modelio.save_tensor(out / FEATURES_NAME, audio.wav_to_features(src, cfg),
                            name="features")
        return
    wavs = sorted(src.rglob("*.wav"))
    limit = config.get("limit")
    if limit:
        wavs = wavs[:int(limit)]
    if not wavs:
        raise ToolError(f"{src}: no WAV files to featurize")
    for wav in wavs:
        modelio.save_tensor(out / (wav.stem + ".lpt"),
                            audio.wav_to_features(wav, cfg), name="features")


def tool_build_net(inputs, outputs, config, seed):
    out = _single_output(outputs)
    seed = int(config.get("seed", seed))
    if "preset" in config:
        graph = netbuilder.build_preset(config["preset"], seed=seed)
    elif "arch" in config:
        graph = netbuilder.build_network(
            netbuilder.arch_from_config(config["arch"]), seed=seed)
    else:
        raise ToolError("build-net needs a 'preset' or 'arch' config entry")
    modelio.save_model_dir(graph, out)


def flops_summary(graph) -> dict:
    report = count_flops(graph)
    return {
        "per_node": {str(k): v for k, v in sorted(report.per_node.items())},
        "total_flops": report.total,
        "total_mflops": report.total_mflops,
        "params": count_params(graph),
        "size_bytes": model_size_bytes(graph),
    }


def tool_flops(inputs, outputs, config, seed):
    graph = modelio.load_model_dir(_single_input(inputs))
    bench.emit_report(flops_summary(graph), _single_output(outputs) / "flops.json")


def compile_options(config) -> CompileOptions:
    return CompileOptions(fold=bool(config.get("fold", True)),
                          fuse=bool(config.get("fuse", True)),
                          plan=bool(config.get("plan", True)))


def tool_compile(inputs, outputs, config, seed):
    graph = modelio.load_model_dir(_single_input(inputs))
    out = _single_output(outputs)
    plan = compile_graph(graph, compile_options(config))
    modelio.save_model_dir(plan.graph, out)
    bench.emit_report(plan.memory.to_dict(), out / "plan.json")
    bench.emit_report([r.to_dict() for r in plan.reports], out / "passes.json")


def tool_quantize(inputs, outputs, config, seed):
    kinds = _sorted_inputs(inputs)
    if "model" not in kinds or "features" not in kinds:
        raise ToolError("quantize needs a model and a calibration features "
                        "artifact")
    out = _single_output(outputs)
    graph = modelio.load_model_dir(kinds["model"])
    calib = _load_feature_set(kinds["features"],
                              limit=config.get("calib_limit"))
    scheme = config.get("scheme", quantizer.INT16_SYM)
    params = quantizer.calibrate(graph, calib, scheme)
    gq = quantizer.quantize(graph, params)
    modelio.save_model_dir(gq, out)
    bench.emit_report({
        "scheme": scheme,
        "size_bytes_f32": model_size_bytes(graph),
        "size_bytes_quantized": model_size_bytes(gq),
        "payload_bytes_f32": quantizer.quantized_payload_bytes(graph),
        "payload_bytes_quantized": quantizer.quantized_payload_bytes(gq),
    }, out / "quant_report.json")


def tool_run(inputs, outputs, config, seed):
    kinds = _sorted_inputs(inputs)
    if "model" not in kinds or "features" not in kinds:
        raise ToolError("run needs a model and a features artifact")
    out = _single_output(outputs)
    graph = modelio.load_model_dir(kinds["model"])
    plan = compile_graph(graph, compile_options(config))
    assignment = _resolve_assignment(plan.graph, config,
                                     kinds.get("assignment"))
    feats = _load_feature_set(kinds["features"])[0]
    label, probs = executor.classify(plan, assignment, feats)
    bench.emit_report({
        "label": label,
        "probs": {(graph.labels[i] if i < len(graph.labels) else str(i)):
                  float(p) for i, p in enumerate(probs)},
    }, out / "prediction.json")


def tool_bench(inputs, outputs, config, seed):
    kinds = _sorted_inputs(inputs)
    if "model" not in kinds:
        raise ToolError("bench needs a model artifact")
    out = _single_output(outputs)
    graph = modelio.load_model_dir(kinds["model"])
    plan = compile_graph(graph, compile_options(config))
    assignment = _resolve_assignment(plan.graph, config,
                                     kinds.get("assignment"))
    if "features" in kinds:
        x = _load_feature_set(kinds["features"])[0]
    else:
        x = np.random.default_rng(seed).standard_normal(
            graph.input_desc.shape).astype(np.float32)
    report = bench.benchmark(plan, assignment, x,
                             runs=int(config.get("runs", 10)),
                             warmups=int(config.get("warmups", 1)))
    bench.emit_report(report, out / "bench.json")


def tool_search(inputs, outputs, config, seed):
    kinds = _sorted_inputs(inputs)
    if "model" not in kinds:
        raise ToolError("search needs a model artifact")
    out = _single_output(outputs)
    graph = modelio.load_model_dir(kinds["model"])
    plan = compile_graph(graph, compile_options(config))
    if "features" in kinds:
        x = _load_feature_set(kinds["features"])[0]
    else:
        x = np.random.default_rng(seed).standard_normal(
            graph.input_desc.shape).astype(np.float32)
    cfg = SearchConfig(
        total_episodes=int(config.get("episodes", 1500)),
        exploration_episodes=int(config.get("exploration", 500)),
        alpha=float(config.get("alpha", 0.1)),
        gamma=float(config.get("gamma", 0.9)),
        epsilon_final=float(config.get("epsilon_final", 0.05)),
        seed=int(config.get("seed", seed)),
        allowed=frozenset(config["impls"]) if config.get("impls") else None)
    measure = bench.make_measure(plan, x, runs=int(config.get("runs", 3)))
    assignment, log = qsearch(plan.graph, default_registry(), measure, cfg)
    save_assignment(assignment, out / ASSIGNMENT_NAME)
    bench.emit_report([r.to_dict() for r in log], out / "episodes.json")
    bench.write_episode_csv(log, out / "episodes.csv")


def tool_pareto(inputs, outputs, config, seed):
    src = _single_input(inputs)
    if src.is_dir():
        src = src / "candidates.json"
    out = _single_output(outputs)
    doc = json.loads(Path(src).read_text())
    if isinstance(doc, dict):
        doc = doc["candidates"]
    cands = [netbuilder.Candidate(accuracy=float(c["accuracy"]),
                                  mflops=float(c["mflops"]),
                                  name=str(c.get("name", "")))
             for c in doc]
    front = netbuilder.pareto_frontier(cands)
    bench.emit_report({"frontier": [
        {"name": c.name, "accuracy": c.accuracy, "mflops": c.mflops}
        for c in front]}, out / "frontier.json")


# name -> (fn, version); bump a version to invalidate cached outputs
TOOL_REGISTRY = {
    "ingest": (tool_ingest, "1"),
    "features": (tool_features, "1"),
    "build-net": (tool_build_net, "1"),
    "flops": (tool_flops, "1"),
    "compile": (tool_compile, "1"),
    "quantize": (tool_quantize, "1"),
    "run": (tool_run, "1"),
    "bench": (tool_bench, "1"),
    "search": (tool_search, "1"),
    "pareto": (tool_pareto, "1"),
}
