"""Trajectory evaluation metrics: TC, SPD, nDTW, SDTW, paired t-test.

Distances are graph hop counts with edges treated as undirected, matching
the success radius of one neighboring node (d_th = 1.0).
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

from .env import EnvironmentGraph, Trajectory
from .errors import MetricError

SUCCESS_RADIUS_HOPS = 1.0


def spd(graph: EnvironmentGraph, stop_node: str, goal_node: str) -> int:
    """Shortest-path hop count between two nodes (undirected BFS)."""
    if stop_node == goal_node:
        return 0
    seen = {stop_node}
    queue = deque([(stop_node, 0)])
    while queue:
        node, dist = queue.popleft()
        for nxt in sorted(graph.undirected_neighbors(node)):
            if nxt == goal_node:
                return dist + 1
            if nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, dist + 1))
    raise MetricError(f"no path between {stop_node!r} and {goal_node!r}")


def tc(graph: EnvironmentGraph, trajectory: Trajectory, goal: str) -> int:
    """1 when the episode stopped within one hop of the goal, else 0."""
    return 1 if spd(graph, trajectory.final_node, goal) <= SUCCESS_RADIUS_HOPS else 0


class _HopDistance:
    """Memoized all-targets BFS so DTW does not rerun searches per cell."""

    def __init__(self, graph: EnvironmentGraph):
        self.graph = graph
        self._from: dict[str, dict[str, int]] = {}

    def __call__(self, a: str, b: str) -> int:
        table = self._from.get(a)
        if table is None:
            table = self._bfs(a)
            self._from[a] = table
        if b not in table:
            raise MetricError(f"no path between {a!r} and {b!r}")
        return table[b]

    def _bfs(self, source: str) -> dict[str, int]:
        dist = {source: 0}
        queue = deque([source])
        while queue:
            node = queue.popleft()
            for nxt in sorted(self.graph.undirected_neighbors(node)):
                if nxt not in dist:
                    dist[nxt] = dist[node] + 1
                    queue.append(nxt)
        return dist


def dtw(graph: EnvironmentGraph, agent_path: Sequence[str], gold_path: Sequence[str]) -> float:
    """Boundary-aligned dynamic time warping cost under hop distance."""
    if not agent_path or not gold_path:
        raise MetricError("dtw over an empty path")
    hop = _HopDistance(graph)
    n, m = len(agent_path), len(gold_path)
    inf = math.inf
    acc = [[inf] * (m + 1) for _ in range(n + 1)]
    acc[0][0] = 0.0
    for i in range(1, n + 1):
        for j in range(1, m + 1):
            cost = hop(agent_path[i - 1], gold_path[j - 1])
            acc[i][j] = cost + min(acc[i - 1][j], acc[i][j - 1], acc[i - 1][j - 1])
    return acc[n][m]


def ndtw(
    graph: EnvironmentGraph,
    agent_path: Sequence[str],
    gold_path: Sequence[str],
    d_th: float = SUCCESS_RADIUS_HOPS,
) -> float:
    """exp(-DTW / (|gold| * d_th)), in (0, 1]; 1 iff the warp cost is zero."""
    return math.exp(-dtw(graph, agent_path, gold_path) / (len(gold_path) * d_th))


def sdtw(
    graph: EnvironmentGraph,
    trajectory: Trajectory,
    gold_path: Sequence[str],
    goal: str,
    d_th: float = SUCCESS_RADIUS_HOPS,
) -> float:
    """Success-gated nDTW: tc * ndtw."""
    return tc(graph, trajectory, goal) * ndtw(graph, trajectory.node_path(), gold_path, d_th)


@dataclass
class InstanceMetrics:
    instance_id: str
    tc: int
    spd: int
    ndtw: float
    sdtw: float

    def to_json(self) -> dict:
        return {
            "instance_id": self.instance_id,
            "tc": self.tc,
            "spd": self.spd,
            "ndtw": self.ndtw,
            "sdtw": self.sdtw,
        }


@dataclass
class MetricsReport:
    """Per-instance metrics plus their unweighted means."""

    instances: list[InstanceMetrics] = field(default_factory=list)

    @property
    def n(self) -> int:
        return len(self.instances)

    def mean(self, name: str) -> float:
        if not self.instances:
            raise MetricError("empty metrics report")
        return sum(getattr(r, name) for r in self.instances) / self.n

    def to_json(self) -> dict:
        return {
            "n": self.n,
            "means": {
                "tc": self.mean("tc"),
                "spd": self.mean("spd"),
                "ndtw": self.mean("ndtw"),
                "sdtw": self.mean("sdtw"),
            },
            "instances": [r.to_json() for r in self.instances],
        }


def score_trajectory(
    graph: EnvironmentGraph,
    trajectory: Trajectory,
    gold_path: Sequence[str],
    instance_id: str = "",
) -> InstanceMetrics:
    goal = gold_path[-1]
    nd = ndtw(graph, trajectory.node_path(), gold_path)
    success = tc(graph, trajectory, goal)
    return InstanceMetrics(
        instance_id=instance_id,
        tc=success,
        spd=spd(graph, trajectory.final_node, goal),
        ndtw=nd,
        sdtw=success * nd,
    )


# --- paired significance test --------------------------------------------


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the regularized incomplete beta function."""
    max_iter = 200
    eps = 3e-14
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, max_iter + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < eps:
            return h
    raise MetricError("incomplete beta continued fraction did not converge")


def _reg_inc_beta(a: float, b: float, x: float) -> float:
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log(1.0 - x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_sf_two_sided(t_stat: float, df: int) -> float:
    """Two-sided p-value for a Student-t statistic with ``df`` degrees of freedom."""
    if df < 1:
        raise MetricError("degrees of freedom must be >= 1")
    x = df / (df + t_stat * t_stat)
    return _reg_inc_beta(df / 2.0, 0.5, x)


def paired_ttest(a: Sequence[float], b: Sequence[float]) -> tuple[float, float]:
    """Two-sided paired t-test; returns (t statistic, p-value).

    Raises MetricError on unequal lengths, n < 2, or zero-variance
    differences (identical lists), for which the statistic is undefined.
    """
    if len(a) != len(b):
        raise MetricError(f"paired t-test needs equal lengths, got {len(a)} and {len(b)}")
    n = len(a)
    if n < 2:
        raise MetricError("paired t-test needs at least two pairs")
    diffs = [x - y for x, y in zip(a, b)]
    mean = sum(diffs) / n
    ss = sum((d - mean) ** 2 for d in diffs)
    if ss == 0.0:
        if mean == 0.0:
            raise MetricError("zero variance in paired differences; t statistic undefined")
        # constant nonzero difference: t diverges, p underflows to ~0
        return (math.inf if mean > 0 else -math.inf), 1e-300
    sd = math.sqrt(ss / (n - 1))
    t_stat = mean / (sd / math.sqrt(n))
    p = student_t_sf_two_sided(t_stat, n - 1)
    return t_stat, max(p, 1e-300)
