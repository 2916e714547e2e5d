"""Latency measurement harness and report serialization.

Protocol: one discarded warm-up run, then N timed runs on the monotonic
clock, reporting mean/min/max/stddev for the whole network and per layer.
"""

from __future__ import annotations

import csv
import json
import logging
import platform
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .kernels import KernelRegistry
from .passes import ExecutablePlan, PassReport
from .search import EpisodeRecord

log = logging.getLogger(__name__)

NOISE_THRESHOLD = 0.2  # stddev above this fraction of the mean is flagged

# Timed on the wall clock of whatever machine runs this; numbers are only
# comparable within one host and one interpreter.
PLATFORM_NOTE = (f"{platform.platform()} / {platform.machine()} / "
                 f"python {sys.version.split()[0]} / single thread")


@dataclass
class Stats:
    mean: float
    min: float
    max: float
    stddev: float

    @classmethod
    def of(cls, values: list[float]) -> "Stats":
        arr = np.asarray(values, dtype=np.float64)
        return cls(mean=float(arr.mean()), min=float(arr.min()),
                   max=float(arr.max()), stddev=float(arr.std()))

    def to_dict(self) -> dict:
        return {"mean": self.mean, "min": self.min, "max": self.max,
                "stddev": self.stddev}


@dataclass
class BenchReport:
    total: Stats
    layers: dict[int, Stats]
    runs: int
    warmups: int
    assignment: dict[int, str]
    platform: str = PLATFORM_NOTE
    noisy: bool = False

    def to_dict(self) -> dict:
        return {
            "total": self.total.to_dict(),
            "layers": {str(k): v.to_dict()
                       for k, v in sorted(self.layers.items())},
            "runs": self.runs,
            "warmups": self.warmups,
            "assignment": {str(k): v
                           for k, v in sorted(self.assignment.items())},
            "platform": self.platform,
            "noisy": self.noisy,
        }


ExecuteFn = Callable[[np.ndarray], tuple[np.ndarray, dict[int, float]]]


def _default_execute_fn(plan: ExecutablePlan, assignment: dict[int, str],
                        registry: KernelRegistry | None) -> ExecuteFn:
    from .executor import execute, prepare

    prepared = prepare(plan, assignment, registry)

    def run(x: np.ndarray):
        timings: dict[int, float] = {}
        out = execute(prepared, assignment, x, registry, timings=timings)
        return out, timings

    return run


def benchmark(plan: ExecutablePlan, assignment: dict[int, str], x: np.ndarray,
              runs: int = 10, warmups: int = 1,
              registry: KernelRegistry | None = None,
              execute_fn: ExecuteFn | None = None) -> BenchReport:
    """Time ``runs`` executions after ``warmups`` discarded ones. A custom
    ``execute_fn(x) -> (output, per_layer_seconds)`` may replace the real
    executor (tests use this to count invocations)."""
    if runs < 1:
        raise ValueError("runs must be at least 1")
    if warmups < 0:
        raise ValueError("warmups must be non-negative")
    fn = execute_fn or _default_execute_fn(plan, assignment, registry)
    for _ in range(warmups):
        fn(x)
    totals: list[float] = []
    per_layer: dict[int, list[float]] = {}
    for _ in range(runs):
        t0 = time.perf_counter()
        _, layer_times = fn(x)
        totals.append(time.perf_counter() - t0)
        for nid, dt in layer_times.items():
            per_layer.setdefault(nid, []).append(dt)
    total = Stats.of(totals)
    noisy = total.mean > 0 and total.stddev > NOISE_THRESHOLD * total.mean
    if noisy:
        log.warning("timing noise: stddev %.3g s is over %d%% of mean %.3g s",
                    total.stddev, int(NOISE_THRESHOLD * 100), total.mean)
    return BenchReport(total=total,
                       layers={nid: Stats.of(v)
                               for nid, v in per_layer.items()},
                       runs=runs, warmups=warmups,
                       assignment=dict(assignment), noisy=noisy)


def make_measure(plan: ExecutablePlan, x: np.ndarray,
                 registry: KernelRegistry | None = None,
                 runs: int = 3, warmups: int = 1):
    """Assignment -> mean latency closure for the implementation search.
    Re-prepares per assignment so layout conversion cost is included."""

    def measure(assignment: dict[int, str]) -> float:
        report = benchmark(plan, assignment, x, runs=runs, warmups=warmups,
                           registry=registry)
        return report.total.mean

    return measure


# --- report emission --------------------------------------------------------


def to_jsonable(obj):
    if isinstance(obj, BenchReport):
        return obj.to_dict()
    if isinstance(obj, (Stats, PassReport, EpisodeRecord)):
        return obj.to_dict()
    if hasattr(obj, "to_dict"):
        return obj.to_dict()
    if isinstance(obj, dict):
        return {str(k): to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    return obj


def emit_report(obj, path: str | Path) -> None:
    """Serialize a report object (bench report, pass reports, episode log or
    plain dict) as stable-key JSON."""
    Path(path).write_text(
        json.dumps(to_jsonable(obj), indent=2, sort_keys=True) + "\n")


def write_episode_csv(records: list[EpisodeRecord], path: str | Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["episode", "latency", "epsilon"])
        for r in records:
            writer.writerow([r.episode, f"{r.latency:.9f}", f"{r.epsilon:.6f}"])
