"""Per-layer implementation selection via tabular Q-learning.

State is (layer position, incoming physical layout); actions are the impl ids
applicable to that layer. An episode picks an impl for every layer
epsilon-greedily, measures end-to-end latency of the whole assignment
(including any layout conversions the choices force) and propagates the
negated latency backwards through the visited state/action pairs. A
brute-force enumerator over the same space serves as the small-graph oracle.
"""

from __future__ import annotations

import itertools
import random
from dataclasses import dataclass, field
from typing import Callable

from .graph import CHANNEL_MAJOR, Graph, INPUT, LAYOUT_ANY
from .kernels import KernelRegistry, implementations_for

Assignment = dict[int, str]
MeasureFn = Callable[[Assignment], float]

State = tuple[int, str]


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class SearchConfig:
    total_episodes: int = 1500
    exploration_episodes: int = 500
    alpha: float = 0.1
    gamma: float = 0.9
    epsilon_final: float = 0.05
    seed: int = 0
    allowed: frozenset[str] | None = None  # optional impl id filter

    def __post_init__(self):
        if self.total_episodes < 1:
            raise SearchError("total_episodes must be positive")
        if not 0 <= self.exploration_episodes <= self.total_episodes:
            raise SearchError("exploration_episodes must lie in "
                              "[0, total_episodes]")
        if not 0 < self.alpha <= 1:
            raise SearchError("alpha must lie in (0, 1]")
        if not 0 <= self.gamma <= 1:
            raise SearchError("gamma must lie in [0, 1]")
        if not 0 <= self.epsilon_final <= 1:
            raise SearchError("epsilon_final must lie in [0, 1]")


@dataclass
class EpisodeRecord:
    episode: int
    latency: float
    epsilon: float

    def to_dict(self) -> dict:
        return {"episode": self.episode, "latency": self.latency,
                "epsilon": self.epsilon}


class QTable:
    """Dense-free state/action value table with a deterministic argmax
    (ties resolve to the action listed first)."""

    def __init__(self):
        self.q: dict[tuple[State, str], float] = {}

    def value(self, state: State, action: str) -> float:
        return self.q.get((state, action), 0.0)

    def best_value(self, state: State, actions: list[str]) -> float:
        if not actions:
            return 0.0
        return max(self.value(state, a) for a in actions)

    def best_action(self, state: State, actions: list[str]) -> str:
        best = actions[0]
        for a in actions[1:]:
            if self.value(state, a) > self.value(state, best):
                best = a
        return best

    def update(self, state: State, action: str, target: float,
               alpha: float) -> None:
        old = self.value(state, action)
        self.q[(state, action)] = old + alpha * (target - old)


def _searchable_layers(graph: Graph, registry: KernelRegistry,
                       allowed: frozenset[str] | None) -> tuple[list, dict]:
    """Nodes with a real choice of implementation, plus the fixed single-impl
    assignment for everything else."""
    from .executor import filter_candidates

    layers = []
    fixed: Assignment = {}
    for node in graph.nodes:
        if node.kind == INPUT:
            continue
        candidates = filter_candidates(
            implementations_for(registry, node, graph),
            set(allowed) if allowed else None)
        if not candidates:
            raise SearchError(f"node {node.id} ({node.kind}): no applicable "
                              "implementation")
        if len(candidates) > 1:
            layers.append((node, candidates))
        else:
            fixed[node.id] = candidates[0]
    return layers, fixed


def _next_layout(registry: KernelRegistry, impl_id: str, incoming: str) -> str:
    layout = registry.descriptor(impl_id).layout
    return incoming if layout == LAYOUT_ANY else layout


def epsilon_schedule(episode: int, config: SearchConfig) -> float:
    """1.0 through the exploration phase, then linear decay to epsilon_final
    by the last episode."""
    if episode < config.exploration_episodes:
        return 1.0
    decay_span = max(config.total_episodes - config.exploration_episodes, 1)
    frac = (episode - config.exploration_episodes + 1) / decay_span
    return 1.0 - (1.0 - config.epsilon_final) * min(frac, 1.0)


def search(graph: Graph, registry: KernelRegistry, measure: MeasureFn,
           config: SearchConfig | None = None,
           qtable: QTable | None = None) -> tuple[Assignment, list[EpisodeRecord]]:
    """Q-learning over per-layer impl choices. Returns the lowest-latency
    assignment ever measured and the per-episode log. Pass a QTable to warm
    start or to keep the learned values."""
    config = config or SearchConfig()
    q = qtable if qtable is not None else QTable()
    rng = random.Random(config.seed)
    layers, fixed = _searchable_layers(graph, registry, config.allowed)

    best_assignment: Assignment | None = None
    best_latency = float("inf")
    log: list[EpisodeRecord] = []

    for ep in range(config.total_episodes):
        eps = epsilon_schedule(ep, config)
        layout = graph.input_desc.layout
        steps: list[tuple[State, str, State, list[str]]] = []
        assignment = dict(fixed)
        for idx, (node, candidates) in enumerate(layers):
            state = (idx, layout)
            if rng.random() < eps:
                action = rng.choice(candidates)
            else:
                action = q.best_action(state, candidates)
            layout = _next_layout(registry, action, layout)
            next_state = (idx + 1, layout)
            steps.append((state, action, next_state, candidates))
            assignment[node.id] = action
        latency = measure(assignment)
        reward = -latency
        for idx in range(len(steps) - 1, -1, -1):
            state, action, next_state, _ = steps[idx]
            if idx + 1 < len(steps):
                future = q.best_value(next_state, steps[idx + 1][3])
            else:
                future = 0.0
            q.update(state, action, reward + config.gamma * future,
                     config.alpha)
        if latency < best_latency:
            best_latency = latency
            best_assignment = dict(assignment)
        log.append(EpisodeRecord(ep, latency, eps))

    assert best_assignment is not None
    return best_assignment, log


def greedy_rollout(qtable: QTable, graph: Graph, registry: KernelRegistry,
                   allowed: frozenset[str] | None = None) -> Assignment:
    """Deterministic epsilon=0 traversal of the learned table."""
    layers, fixed = _searchable_layers(graph, registry, allowed)
    assignment = dict(fixed)
    layout = graph.input_desc.layout
    for idx, (node, candidates) in enumerate(layers):
        action = qtable.best_action((idx, layout), candidates)
        assignment[node.id] = action
        layout = _next_layout(registry, action, layout)
    return assignment


def brute_force(graph: Graph, registry: KernelRegistry, measure: MeasureFn,
                limit: int = 10_000,
                allowed: frozenset[str] | None = None) -> Assignment:
    """Exhaustive enumeration of the same assignment space. Refuses spaces
    larger than ``limit`` combinations."""
    layers, fixed = _searchable_layers(graph, registry, allowed)
    space = 1
    for _, candidates in layers:
        space *= len(candidates)
    if space > limit:
        raise SearchError(f"assignment space has {space} combinations, "
                          f"over the limit of {limit}")
    best: Assignment | None = None
    best_latency = float("inf")
    for combo in itertools.product(*(c for _, c in layers)):
        assignment = dict(fixed)
        for (node, _), impl_id in zip(layers, combo):
            assignment[node.id] = impl_id
        latency = measure(assignment)
        if latency < best_latency:
            best_latency = latency
            best = assignment
    assert best is not None
    return best
