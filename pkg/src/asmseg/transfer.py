"""Nearest-neighbor transfer dependencies over the tile grid.

Node (i, j, k): j runs along the first column, i across columns of a plane,
k across planes. Every node inherits encoder weights from exactly one
predecessor, so the dependency graph is a tree rooted at (0, 0, 0).
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

from .errors import ParameterError

Node = tuple[int, int, int]


def predecessor(idx: Node, K: int) -> Node | None:
    """Transfer source for a node: root has none; first column chains along j;
    plane-0 columns chain along i; later planes chain along k."""
    i, j, k = idx
    if not all(0 <= c < K for c in (i, j, k)):
        raise ParameterError(f"node {idx} out of range for K={K}")
    if k > 0:
        return (i, j, k - 1)
    if i > 0:
        return (i - 1, j, 0)
    if j > 0:
        return (0, j - 1, 0)
    return None


def topological_order(K: int) -> list[Node]:
    """Canonical training order: plane by plane, column by column, j innermost."""
    if K < 1:
        raise ParameterError(f"K must be >= 1, got {K}")
    return [(i, j, k) for k in range(K) for i in range(K) for j in range(K)]


@dataclass(frozen=True)
class TransferDag:
    K: int
    nodes: tuple[Node, ...]
    predecessors: dict[Node, Node | None]

    @property
    def edges(self) -> int:
        return sum(1 for p in self.predecessors.values() if p is not None)

    def children(self, node: Node) -> list[Node]:
        return [n for n, p in self.predecessors.items() if p == node]


def build_dag(K: int) -> TransferDag:
    nodes = tuple(topological_order(K))
    preds = {n: predecessor(n, K) for n in nodes}
    return TransferDag(K, nodes, preds)


def critical_path_length(K: int) -> int:
    """Number of nodes on the longest root-to-leaf dependency chain."""
    depth: dict[Node, int] = {}
    best = 0
    for n in topological_order(K):
        p = predecessor(n, K)
        depth[n] = 1 if p is None else depth[p] + 1
        best = max(best, depth[n])
    return best


@dataclass(frozen=True)
class SchedulePlan:
    K: int
    workers: int
    start: dict[Node, float]
    finish: dict[Node, float]
    worker: dict[Node, int]
    makespan: float


def _resolve_durations(dag: TransferDag, durations) -> dict[Node, float]:
    if isinstance(durations, (int, float)):
        durations = {n: float(durations) for n in dag.nodes}
    out = {}
    for n in dag.nodes:
        if n not in durations:
            raise ParameterError(f"missing duration for node {n}")
        d = float(durations[n])
        if not d > 0:
            raise ParameterError(f"duration for node {n} must be positive, got {d}")
        out[n] = d
    return out


def simulate_schedule(K: int, durations, workers) -> SchedulePlan:
    """Greedy list scheduling: at each event, assign ready nodes to idle
    workers in canonical order. Deterministic; durations may be a scalar or a
    per-node mapping; workers may be math.inf.
    """
    dag = build_dag(K)
    if workers != math.inf and int(workers) < 1:
        raise ParameterError(f"workers must be >= 1, got {workers}")
    n_workers = len(dag.nodes) if workers == math.inf else min(int(workers), len(dag.nodes))
    dur = _resolve_durations(dag, durations)
    rank = {n: r for r, n in enumerate(dag.nodes)}
    children: dict[Node, list[Node]] = {n: [] for n in dag.nodes}
    for n, p in dag.predecessors.items():
        if p is not None:
            children[p].append(n)

    ready = [(rank[n], n) for n, p in dag.predecessors.items() if p is None]
    heapq.heapify(ready)
    idle = list(range(n_workers))
    heapq.heapify(idle)
    events: list[tuple[float, int, Node, int]] = []
    start: dict[Node, float] = {}
    finish: dict[Node, float] = {}
    assigned: dict[Node, int] = {}
    now = 0.0
    while ready or events:
        while ready and idle:
            _, node = heapq.heappop(ready)
            wid = heapq.heappop(idle)
            start[node] = now
            finish[node] = now + dur[node]
            assigned[node] = wid
            heapq.heappush(events, (finish[node], rank[node], node, wid))
        if not events:
            break
        now = events[0][0]
        # drain all completions at this instant before assigning again
        while events and events[0][0] == now:
            _, _, node, wid = heapq.heappop(events)
            heapq.heappush(idle, wid)
            for ch in children[node]:
                heapq.heappush(ready, (rank[ch], ch))
    makespan = max(finish.values()) if finish else 0.0
    return SchedulePlan(K, n_workers, start, finish, assigned, makespan)
