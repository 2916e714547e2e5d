"""Command line entry point. Thin click wrappers over the library; every
subcommand can mirror its result to --report as JSON."""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click
import numpy as np

from . import audio, bench, executor, modelio, netbuilder, quantizer, tools
from .graph import validate
from .passes import compile_graph
from .search import SearchConfig, search as qsearch
from .workflow import ArtifactStore, WorkflowSpec, run_workflow


class Ctx:
    def __init__(self, seed: int, report: Path | None, store: Path | None):
        self.seed = seed
        self.report = report
        self.store = store

    def emit(self, payload) -> None:
        if self.report is not None:
            bench.emit_report(payload, self.report)


@click.group()
@click.option("--seed", type=int, default=0, show_default=True,
              help="Seed for anything randomized.")
@click.option("--report", type=click.Path(path_type=Path), default=None,
              help="Also write the command's result as JSON here.")
@click.option("--store", type=click.Path(path_type=Path), default=None,
              help="Artifact store directory (workflow runs).")
@click.pass_context
def main(ctx, seed, report, store):
    """Compact DNN inference engine and graph compiler for keyword spotting."""
    ctx.obj = Ctx(seed, report, store)


def _echo_json(payload) -> None:
    click.echo(json.dumps(bench.to_jsonable(payload), indent=2, sort_keys=True))


def _load_model(model_dir: Path):
    try:
        return modelio.load_model_dir(model_dir)
    except (modelio.ModelFormatError, FileNotFoundError) as exc:
        raise click.ClickException(str(exc))


def _input_tensor(graph, features: Path | None, wav: Path | None, seed: int):
    if features is not None:
        return modelio.load_tensor(features).astype(np.float32)
    if wav is not None:
        return audio.wav_to_features(wav)
    return np.random.default_rng(seed).standard_normal(
        graph.input_desc.shape).astype(np.float32)


_compile_flags = [
    click.option("--fold/--no-fold", default=True, show_default=True,
                 help="Fold BatchNorm/Scale into conv and FC weights."),
    click.option("--fuse/--no-fuse", default=True, show_default=True,
                 help="Fuse trailing ReLU into the producing layer."),
    click.option("--plan/--no-plan", default=True, show_default=True,
                 help="Liveness-based buffer reuse (off: one buffer each)."),
]


def compile_flags(fn):
    for flag in reversed(_compile_flags):
        fn = flag(fn)
    return fn


def _opts(fold, fuse, plan):
    from .passes import CompileOptions

    return CompileOptions(fold=fold, fuse=fuse, plan=plan)


@main.command()
@click.argument("audio_root", type=click.Path(exists=True, file_okay=False,
                                              path_type=Path))
@click.option("-o", "--output", type=click.Path(path_type=Path),
              default=Path("dataset.jsonl"), show_default=True)
@click.option("--fractions", default="0.8,0.1,0.1", show_default=True,
              help="train,val,test split fractions.")
@click.pass_obj
def ingest(obj, audio_root, output, fractions):
    """Scan AUDIO_ROOT/<label>/*.wav into a partitioned dataset manifest."""
    try:
        fracs = tuple(float(f) for f in fractions.split(","))
        manifest = audio.import_dataset(audio_root, fracs, seed=obj.seed)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    manifest.save(output)
    counts = {p: len(manifest.by_partition(p)) for p in audio.PARTITIONS}
    payload = {"classes": manifest.classes, "counts": counts,
               "total": len(manifest.entries), "manifest": str(output)}
    _echo_json(payload)
    obj.emit(payload)


@main.command()
@click.argument("wav", type=click.Path(exists=True, dir_okay=False,
                                       path_type=Path))
@click.option("-o", "--output", type=click.Path(path_type=Path),
              default=Path("features.lpt"), show_default=True)
@click.pass_obj
def features(obj, wav, output):
    """Extract MFCC features from a WAV file into a tensor container."""
    try:
        feats = audio.wav_to_features(wav)
    except audio.WavFormatError as exc:
        raise click.ClickException(str(exc))
    modelio.save_tensor(output, feats, name="features")
    payload = {"shape": list(feats.shape), "output": str(output),
               "min": float(feats.min()), "max": float(feats.max())}
    _echo_json(payload)
    obj.emit(payload)


@main.command("build-net")
@click.option("--preset", type=click.Choice(sorted(netbuilder.PRESETS)),
              default=None, help="Named architecture preset.")
@click.option("--config", "config_path",
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="YAML/JSON architecture description.")
@click.option("-o", "--output", type=click.Path(path_type=Path), required=True,
              help="Model directory to create.")
@click.pass_obj
def build_net(obj, preset, config_path, output):
    """Materialize a network with seeded random weights."""
    if (preset is None) == (config_path is None):
        raise click.ClickException("pass exactly one of --preset / --config")
    if preset:
        graph = netbuilder.build_preset(preset, seed=obj.seed)
    else:
        import yaml

        doc = yaml.safe_load(config_path.read_text())
        try:
            graph = netbuilder.build_network(netbuilder.arch_from_config(doc),
                                             seed=obj.seed)
        except (KeyError, ValueError) as exc:
            raise click.ClickException(f"bad architecture config: {exc}")
    modelio.save_model_dir(graph, output)
    payload = {"model": str(output), "name": graph.name,
               "nodes": len(graph.nodes), **tools.flops_summary(graph)}
    _echo_json(payload)
    obj.emit(payload)


@main.command()
@click.argument("model_dir", type=click.Path(exists=True, file_okay=False,
                                             path_type=Path))
@click.pass_obj
def flops(obj, model_dir):
    """FLOP, parameter and size accounting for a model."""
    graph = _load_model(model_dir)
    payload = tools.flops_summary(graph)
    _echo_json(payload)
    obj.emit(payload)


@main.command("compile")
@click.argument("model_dir", type=click.Path(exists=True, file_okay=False,
                                             path_type=Path))
@click.option("-o", "--output", type=click.Path(path_type=Path), required=True)
@compile_flags
@click.pass_obj
def compile_cmd(obj, model_dir, output, fold, fuse, plan):
    """Run optimization passes; write the transformed model + plan reports."""
    graph = _load_model(model_dir)
    ep = compile_graph(graph, _opts(fold, fuse, plan))
    modelio.save_model_dir(ep.graph, output)
    bench.emit_report(ep.memory.to_dict(), output / "plan.json")
    bench.emit_report([r.to_dict() for r in ep.reports], output / "passes.json")
    payload = {"model": str(output),
               "nodes_before": len(graph.nodes),
               "nodes_after": len(ep.graph.nodes),
               "peak_bytes": ep.memory.peak_bytes,
               "passes": [r.to_dict() for r in ep.reports]}
    _echo_json(payload)
    obj.emit(payload)


@main.command()
@click.argument("model_dir", type=click.Path(exists=True, file_okay=False,
                                             path_type=Path))
@click.option("--calib", type=click.Path(exists=True, path_type=Path),
              required=True,
              help="Calibration features: one .lpt file or a directory.")
@click.option("--scheme", type=click.Choice(quantizer.SCHEMES),
              default=quantizer.INT16_SYM, show_default=True)
@click.option("-o", "--output", type=click.Path(path_type=Path), required=True)
@click.option("--sensitivity", is_flag=True,
              help="Also emit a per-layer sensitivity ranking.")
@click.pass_obj
def quantize(obj, model_dir, calib, scheme, output, sensitivity):
    """Post-training quantization with activation calibration."""
    graph = _load_model(model_dir)
    calib_set = tools._load_feature_set(calib)
    params = quantizer.calibrate(graph, calib_set, scheme)
    gq = quantizer.quantize(graph, params)
    modelio.save_model_dir(gq, output)
    from .graph import model_size_bytes

    payload = {
        "model": str(output), "scheme": scheme,
        "size_bytes_f32": model_size_bytes(graph),
        "size_bytes_quantized": model_size_bytes(gq),
        "payload_bytes_f32": quantizer.quantized_payload_bytes(graph),
        "payload_bytes_quantized": quantizer.quantized_payload_bytes(gq),
    }
    if sensitivity:
        expected = []
        for x in calib_set:
            probs = executor.reference_execute(graph, x).ravel()
            expected.append(int(np.argmax(probs)))
        report = quantizer.sensitivity_report(graph, calib_set, expected,
                                              scheme, params)
        payload["sensitivity"] = [e.to_dict() for e in report]
    _echo_json(payload)
    obj.emit(payload)


@main.command()
@click.argument("model_dir", type=click.Path(exists=True, file_okay=False,
                                             path_type=Path))
@click.option("--wav", type=click.Path(exists=True, dir_okay=False,
                                       path_type=Path), default=None)
@click.option("--features", "features_path",
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None)
@click.option("--assignment", "assignment_path",
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Per-layer impl assignment JSON.")
@click.option("--impl", "impls", multiple=True,
              help="Prefer these impl ids where applicable (repeatable).")
@compile_flags
@click.pass_obj
def run(obj, model_dir, wav, features_path, assignment_path, impls,
        fold, fuse, plan):
    """Run one inference and print the predicted label."""
    if (wav is None) == (features_path is None):
        raise click.ClickException("pass exactly one of --wav / --features")
    graph = _load_model(model_dir)
    ep = compile_graph(graph, _opts(fold, fuse, plan))
    if assignment_path:
        assignment = tools.load_assignment(assignment_path)
    else:
        assignment = executor.default_assignment(
            ep.graph, allowed=set(impls) if impls else None)
    x = _input_tensor(graph, features_path, wav, obj.seed)
    try:
        label, probs = executor.classify(ep, assignment, x)
    except Exception as exc:
        raise click.ClickException(f"inference failed: {exc}")
    payload = {"label": label,
               "probs": {(graph.labels[i] if i < len(graph.labels) else str(i)):
                         float(p) for i, p in enumerate(probs)}}
    _echo_json(payload)
    obj.emit(payload)


@main.command("bench")
@click.argument("model_dir", type=click.Path(exists=True, file_okay=False,
                                             path_type=Path))
@click.option("--features", "features_path",
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None, help="Input tensor; random if omitted.")
@click.option("--assignment", "assignment_path",
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None)
@click.option("--impl", "impls", multiple=True,
              help="Prefer these impl ids where applicable (repeatable).")
@click.option("--runs", type=int, default=10, show_default=True)
@click.option("--warmups", type=int, default=1, show_default=True)
@compile_flags
@click.pass_obj
def bench_cmd(obj, model_dir, features_path, assignment_path, impls, runs,
              warmups, fold, fuse, plan):
    """Measure end-to-end and per-layer latency."""
    graph = _load_model(model_dir)
    ep = compile_graph(graph, _opts(fold, fuse, plan))
    if assignment_path:
        assignment = tools.load_assignment(assignment_path)
    else:
        assignment = executor.default_assignment(
            ep.graph, allowed=set(impls) if impls else None)
    x = _input_tensor(graph, features_path, None, obj.seed)
    report = bench.benchmark(ep, assignment, x, runs=runs, warmups=warmups)
    _echo_json(report)
    obj.emit(report)


@main.command()
@click.argument("model_dir", type=click.Path(exists=True, file_okay=False,
                                             path_type=Path))
@click.option("--episodes", type=int, default=1500, show_default=True)
@click.option("--exploration", type=int, default=500, show_default=True)
@click.option("--alpha", type=float, default=0.1, show_default=True)
@click.option("--gamma", type=float, default=0.9, show_default=True)
@click.option("--epsilon-final", type=float, default=0.05, show_default=True)
@click.option("--runs", type=int, default=3, show_default=True,
              help="Timed runs per latency measurement.")
@click.option("--impl", "impls", multiple=True,
              help="Restrict the search to these impl ids (repeatable).")
@click.option("--features", "features_path",
              type=click.Path(exists=True, dir_okay=False, path_type=Path),
              default=None)
@click.option("-o", "--output", type=click.Path(path_type=Path),
              default=Path("assignment.json"), show_default=True)
@click.option("--log", "log_path", type=click.Path(path_type=Path),
              default=None, help="Episode log (.json or .csv by extension).")
@click.pass_obj
def search(obj, model_dir, episodes, exploration, alpha, gamma, epsilon_final,
           runs, impls, features_path, output, log_path):
    """Learn a fast per-layer implementation assignment."""
    graph = _load_model(model_dir)
    ep = compile_graph(graph)
    x = _input_tensor(graph, features_path, None, obj.seed)
    try:
        cfg = SearchConfig(total_episodes=episodes,
                           exploration_episodes=exploration, alpha=alpha,
                           gamma=gamma, epsilon_final=epsilon_final,
                           seed=obj.seed,
                           allowed=frozenset(impls) if impls else None)
    except ValueError as exc:
        raise click.ClickException(str(exc))
    measure = bench.make_measure(ep, x, runs=runs)
    from .kernels import default_registry

    assignment, log = qsearch(ep.graph, default_registry(), measure, cfg)
    tools.save_assignment(assignment, output)
    if log_path is not None:
        if log_path.suffix == ".csv":
            bench.write_episode_csv(log, log_path)
        else:
            bench.emit_report([r.to_dict() for r in log], log_path)
    best = min(r.latency for r in log)
    payload = {"assignment": {str(k): v for k, v in sorted(assignment.items())},
               "episodes": len(log), "best_latency": best,
               "output": str(output)}
    _echo_json(payload)
    obj.emit(payload)


@main.command()
@click.argument("candidates", type=click.Path(exists=True, dir_okay=False,
                                              path_type=Path))
@click.option("-o", "--output", type=click.Path(path_type=Path), default=None)
@click.pass_obj
def pareto(obj, candidates, output):
    """Filter accuracy/MFLOPs candidates to the Pareto frontier."""
    doc = json.loads(candidates.read_text())
    if isinstance(doc, dict):
        doc = doc.get("candidates", [])
    cands = [netbuilder.Candidate(accuracy=float(c["accuracy"]),
                                  mflops=float(c["mflops"]),
                                  name=str(c.get("name", "")))
             for c in doc]
    front = netbuilder.pareto_frontier(cands)
    payload = {"frontier": [{"name": c.name, "accuracy": c.accuracy,
                             "mflops": c.mflops} for c in front]}
    _echo_json(payload)
    if output is not None:
        bench.emit_report(payload, output)
    obj.emit(payload)


@main.group()
def workflow():
    """Declarative multi-step pipelines."""


@workflow.command("run")
@click.argument("spec_path", type=click.Path(exists=True, dir_okay=False,
                                             path_type=Path))
@click.pass_obj
def workflow_run(obj, spec_path):
    """Execute a workflow YAML against the artifact store (--store)."""
    from .workflow import WorkflowError

    if obj.store is None:
        raise click.ClickException("workflow run needs --store DIR")
    try:
        spec = WorkflowSpec.from_yaml(spec_path)
        summary = run_workflow(spec, ArtifactStore(obj.store), seed=obj.seed)
    except WorkflowError as exc:
        raise click.ClickException(str(exc))
    payload = summary.to_dict()
    _echo_json(payload)
    obj.emit(payload)
    if summary.failed or summary.blocked:
        sys.exit(1)


if __name__ == "__main__":
    main()
