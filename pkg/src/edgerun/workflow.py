"""Declarative multi-step workflow runner with content-addressed caching.

A workflow names external artifacts (input files) and a list of steps, each
invoking a registered tool. Every step gets a key hashed from the tool name,
tool version, canonicalized config and the content hashes of its inputs; a
step whose outputs already carry that key is skipped. A failed step blocks
its dependents but independent branches keep running.
"""

from __future__ import annotations

import hashlib
import json
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import yaml

META_NAME = ".meta.json"


class WorkflowError(ValueError):
    pass


@dataclass
class StepSpec:
    name: str
    tool: str
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    config: dict = field(default_factory=dict)


@dataclass
class WorkflowSpec:
    name: str
    external: dict[str, Path] = field(default_factory=dict)
    steps: list[StepSpec] = field(default_factory=list)

    @classmethod
    def from_yaml(cls, path: str | Path) -> "WorkflowSpec":
        path = Path(path)
        doc = yaml.safe_load(path.read_text())
        if not isinstance(doc, dict) or "steps" not in doc:
            raise WorkflowError(f"{path}: not a workflow spec")
        base = path.parent
        external = {}
        for key, rel in (doc.get("external") or {}).items():
            p = Path(rel)
            external[key] = p if p.is_absolute() else base / p
        steps = []
        for sd in doc["steps"]:
            try:
                steps.append(StepSpec(
                    name=sd["name"], tool=sd["tool"],
                    inputs=list(sd.get("inputs", [])),
                    outputs=list(sd.get("outputs", [])),
                    config=dict(sd.get("config", {}))))
            except (KeyError, TypeError) as exc:
                raise WorkflowError(f"{path}: malformed step "
                                    f"{sd!r}: {exc!r}") from exc
        return cls(name=doc.get("name", path.stem), external=external,
                   steps=steps)


# --- hashing ----------------------------------------------------------------


def hash_tree(path: str | Path) -> str:
    """sha256 over a file, or over a directory's sorted relative paths and
    file contents."""
    path = Path(path)
    h = hashlib.sha256()
    if path.is_file():
        h.update(b"file\0")
        h.update(path.read_bytes())
    elif path.is_dir():
        h.update(b"dir\0")
        for f in sorted(p for p in path.rglob("*") if p.is_file()):
            if f.name == META_NAME:
                continue
            h.update(str(f.relative_to(path)).encode())
            h.update(b"\0")
            h.update(f.read_bytes())
            h.update(b"\0")
    else:
        raise WorkflowError(f"{path}: no such file or directory")
    return h.hexdigest()


def step_key(tool: str, version: str, config: dict,
             input_hashes: dict[str, str]) -> str:
    payload = json.dumps(
        {"tool": tool, "version": version, "config": config,
         "inputs": dict(sorted(input_hashes.items()))},
        sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()


# --- artifact store ---------------------------------------------------------


class ArtifactStore:
    """Directory-per-artifact store; each artifact carries a sidecar meta
    record with the step key that produced it and its own content hash."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def dir(self, artifact_id: str) -> Path:
        return self.root / artifact_id

    def exists(self, artifact_id: str) -> bool:
        return self.dir(artifact_id).exists()

    def read_meta(self, artifact_id: str) -> dict | None:
        meta = self.dir(artifact_id) / META_NAME
        if not meta.exists():
            return None
        try:
            return json.loads(meta.read_text())
        except json.JSONDecodeError:
            return None

    def write_meta(self, artifact_id: str, step: StepSpec, key: str) -> None:
        meta = {
            "artifact": artifact_id,
            "step": step.name,
            "tool": step.tool,
            "step_key": key,
            "content_hash": hash_tree(self.dir(artifact_id)),
        }
        (self.dir(artifact_id) / META_NAME).write_text(
            json.dumps(meta, indent=2, sort_keys=True) + "\n")

    def content_hash(self, artifact_id: str) -> str:
        meta = self.read_meta(artifact_id)
        if meta and "content_hash" in meta:
            return meta["content_hash"]
        return hash_tree(self.dir(artifact_id))

    def clear(self, artifact_id: str) -> Path:
        d = self.dir(artifact_id)
        if d.exists():
            shutil.rmtree(d)
        d.mkdir(parents=True)
        return d


# --- runner -----------------------------------------------------------------


@dataclass
class WorkflowSummary:
    executed: list[str] = field(default_factory=list)
    skipped: list[str] = field(default_factory=list)
    failed: list[tuple[str, str]] = field(default_factory=list)
    blocked: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"executed": self.executed, "skipped": self.skipped,
                "failed": [{"step": s, "error": e} for s, e in self.failed],
                "blocked": self.blocked}


def validate_workflow(spec: WorkflowSpec, tools: dict) -> None:
    """Static checks: known tools, unique step names, no artifact produced
    twice, and every input available from an earlier step or the externals
    (which also rules out dependency cycles)."""
    seen_steps: set[str] = set()
    available: set[str] = set(spec.external)
    for step in spec.steps:
        if step.name in seen_steps:
            raise WorkflowError(f"duplicate step name {step.name!r}")
        seen_steps.add(step.name)
        if step.tool not in tools:
            raise WorkflowError(f"step {step.name!r}: unknown tool "
                                f"{step.tool!r}")
        for inp in step.inputs:
            if inp not in available:
                raise WorkflowError(
                    f"step {step.name!r}: input {inp!r} is not external and "
                    "not produced by an earlier step (cycle or missing "
                    "producer)")
        for out in step.outputs:
            if out in available:
                raise WorkflowError(f"step {step.name!r}: artifact {out!r} "
                                    "already produced")
            available.add(out)


def run_workflow(spec: WorkflowSpec, store: ArtifactStore,
                 tools: dict | None = None, seed: int = 0) -> WorkflowSummary:
    """Execute the workflow against the store. Returns which steps executed,
    were skipped (cache hit), failed, or were blocked by upstream failures."""
    if tools is None:
        from .tools import TOOL_REGISTRY

        tools = TOOL_REGISTRY
    validate_workflow(spec, tools)
    summary = WorkflowSummary()
    producer_of: dict[str, str] = {}
    bad_steps: set[str] = set()

    for step in spec.steps:
        blocked_by = [producer_of[i] for i in step.inputs
                      if producer_of.get(i) in bad_steps]
        if blocked_by:
            summary.blocked.append(step.name)
            bad_steps.add(step.name)
            for out in step.outputs:
                producer_of[out] = step.name
            continue

        input_paths: dict[str, Path] = {}
        input_hashes: dict[str, str] = {}
        missing_external = None
        for inp in step.inputs:
            if inp in spec.external:
                p = spec.external[inp]
                if not p.exists():
                    missing_external = p
                    break
                input_paths[inp] = p
                input_hashes[inp] = hash_tree(p)
            else:
                input_paths[inp] = store.dir(inp)
                input_hashes[inp] = store.content_hash(inp)
        for out in step.outputs:
            producer_of[out] = step.name
        if missing_external is not None:
            summary.failed.append(
                (step.name, f"external artifact missing: {missing_external}"))
            bad_steps.add(step.name)
            continue

        fn, version = tools[step.tool]
        key = step_key(step.tool, version, step.config, input_hashes)
        up_to_date = all(
            store.exists(out)
            and (store.read_meta(out) or {}).get("step_key") == key
            for out in step.outputs)
        if up_to_date and step.outputs:
            summary.skipped.append(step.name)
            continue

        output_paths = {out: store.clear(out) for out in step.outputs}
        try:
            fn(input_paths, output_paths, dict(step.config), seed)
        except Exception as exc:  # noqa: BLE001 - any tool failure blocks deps
            summary.failed.append(
                (step.name, f"{type(exc).__name__}: {exc}"))
            bad_steps.add(step.name)
            for out in step.outputs:
                d = store.dir(out)
                if d.exists():
                    shutil.rmtree(d)
            continue
        for out in step.outputs:
            store.write_meta(out, step, key)
        summary.executed.append(step.name)
    return summary
