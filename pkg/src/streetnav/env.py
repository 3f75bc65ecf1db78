"""Street-graph navigation environment.

The world is a directed graph: nodes carry planar coordinates, outgoing
edges carry compass angles (degrees, clockwise from north, in [0, 360)).
An agent state is a (node, heading) pair where the heading always equals
the angle of one of the node's outgoing edges; every transition preserves
this invariant.  Moving forward follows the edge the agent faces and then
snaps the heading to the closest outgoing edge of the new node (the
environment's automatic rotation).
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Callable, Iterable, Optional, Sequence

from .errors import DataError, GraphError, PolicyProtocolError, StateError

DEFAULT_STEP_LIMIT = 80

ANGLE_EPS = 1e-6


class Action(IntEnum):
    """Discrete agent actions; integer codes are fixed for serialization."""

    FORWARD = 0
    LEFT = 1
    RIGHT = 2
    STOP = 3


def normalize_angle(angle: float) -> float:
    """Map any angle in degrees onto [0, 360)."""
    a = math.fmod(angle, 360.0)
    if a < 0.0:
        a += 360.0
    if a >= 360.0:  # fmod can round up to 360.0 for tiny negatives
        a = 0.0
    return a


def angular_distance(a: float, b: float) -> float:
    """Circular distance between two angles in degrees, in [0, 180]."""
    d = abs(normalize_angle(a) - normalize_angle(b))
    return min(d, 360.0 - d)


class EnvironmentGraph:
    """Directed street graph with per-edge compass angles.

    Immutable after construction; all queries are pure, so a single graph
    can back any number of concurrent episode rollouts.
    """

    def __init__(
        self,
        nodes: dict[str, tuple[float, float]],
        edges: dict[str, list[tuple[str, float]]],
        pano_keys: Optional[dict[str, str]] = None,
    ):
        self.nodes = dict(nodes)
        self.edges = {v: sorted(((u, normalize_angle(a)) for u, a in out), key=lambda e: e[1])
                      for v, out in edges.items()}
        self.pano_keys = dict(pano_keys) if pano_keys else {v: v for v in self.nodes}
        self._validate()
        self._undirected = self._build_undirected()

    def _validate(self) -> None:
        for v in self.nodes:
            out = self.edges.get(v)
            if not out:
                raise GraphError(f"node {v!r} has no outgoing edges")
            angles = [a for _, a in out]
            for i in range(1, len(angles)):
                if abs(angles[i] - angles[i - 1]) < ANGLE_EPS:
                    raise GraphError(f"node {v!r} has duplicate edge angle {angles[i]:.6f}")
            for u, _ in out:
                if u not in self.nodes:
                    raise GraphError(f"edge {v!r}->{u!r} targets an unknown node")
        for v in self.edges:
            if v not in self.nodes:
                raise GraphError(f"edges listed for unknown node {v!r}")

    def _build_undirected(self) -> dict[str, set[str]]:
        adj: dict[str, set[str]] = {v: set() for v in self.nodes}
        for v, out in self.edges.items():
            for u, _ in out:
                adj[v].add(u)
                adj[u].add(v)
        return adj

    def out_edges(self, v: str) -> list[tuple[str, float]]:
        """Outgoing (target, angle) pairs of ``v``, ascending by angle."""
        try:
            return self.edges[v]
        except KeyError:
            raise GraphError(f"unknown node {v!r}") from None

    def out_degree(self, v: str) -> int:
        return len(self.out_edges(v))

    def undirected_neighbors(self, v: str) -> set[str]:
        try:
            return self._undirected[v]
        except KeyError:
            raise GraphError(f"unknown node {v!r}") from None

    def closest_edge(self, v: str, target_angle: float) -> tuple[str, float]:
        """Outgoing edge of ``v`` with minimal circular distance to ``target_angle``.

        Equidistant ties (including the exact 180-degree case) resolve to the
        clockwise candidate so repeated episodes are reproducible.
        """
        target = normalize_angle(target_angle)

        def key(edge: tuple[str, float]) -> tuple[float, int]:
            angle = edge[1]
            counterclockwise = (angle - target) % 360.0 > 180.0
            return (angular_distance(angle, target), 1 if counterclockwise else 0)

        return min(self.out_edges(v), key=key)

    def edge_angle(self, v: str, u: str) -> float:
        """Angle of the edge v -> u."""
        for target, angle in self.out_edges(v):
            if target == u:
                return angle
        raise GraphError(f"no edge {v!r} -> {u!r}")

    def pano_key(self, v: str) -> str:
        try:
            return self.pano_keys[v]
        except KeyError:
            raise GraphError(f"unknown node {v!r}") from None

    # --- serialization ---------------------------------------------------

    def to_json(self) -> dict:
        return {
            "nodes": [{"id": v, "x": x, "y": y} for v, (x, y) in sorted(self.nodes.items())],
            "edges": [
                {"from": v, "to": u, "angle": a}
                for v in sorted(self.edges)
                for u, a in self.edges[v]
            ],
        }

    @classmethod
    def from_json(cls, payload: dict) -> "EnvironmentGraph":
        try:
            nodes = {n["id"]: (float(n["x"]), float(n["y"])) for n in payload["nodes"]}
            edges: dict[str, list[tuple[str, float]]] = {v: [] for v in nodes}
            for e in payload["edges"]:
                edges.setdefault(e["from"], []).append((e["to"], float(e["angle"])))
        except (KeyError, TypeError) as exc:
            raise DataError(f"malformed graph payload: {exc}") from exc
        return cls(nodes, edges)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_json(), fh, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "EnvironmentGraph":
        with open(path, "r", encoding="utf-8") as fh:
            return cls.from_json(json.load(fh))


@dataclass(frozen=True)
class AgentState:
    """Agent pose: current node plus heading angle (degrees, [0, 360))."""

    node: str
    heading: float


def heading_edge_index(graph: EnvironmentGraph, state: AgentState) -> int:
    """Index of the outgoing edge the agent is facing.

    Raises StateError when the heading does not match any edge angle; this
    is the state invariant every transition must preserve.
    """
    for i, (_, angle) in enumerate(graph.out_edges(state.node)):
        if angular_distance(angle, state.heading) < ANGLE_EPS:
            return i
    raise StateError(
        f"heading {state.heading:.4f} at node {state.node!r} is not an outgoing edge angle"
    )


def step(graph: EnvironmentGraph, state: AgentState, action: Action) -> AgentState:
    """Apply a non-stop action and return the successor state.

    forward follows the faced edge and auto-rotates the heading to the
    closest outgoing edge of the new node; left/right rotate the heading to
    the adjacent edge angle counterclockwise/clockwise (no-ops at
    out-degree-1 nodes).
    """
    if action == Action.STOP:
        raise PolicyProtocolError("stop is terminal and not a transition")
    idx = heading_edge_index(graph, state)
    out = graph.out_edges(state.node)
    if action == Action.FORWARD:
        target, _ = out[idx]
        _, new_heading = graph.closest_edge(target, state.heading)
        return AgentState(target, new_heading)
    k = len(out)
    if action == Action.LEFT:
        return AgentState(state.node, out[(idx - 1) % k][1])
    if action == Action.RIGHT:
        return AgentState(state.node, out[(idx + 1) % k][1])
    raise PolicyProtocolError(f"unknown action {action!r}")


def heading_delta(prev_heading: float, new_heading: float) -> float:
    """Signed heading change normalized to (-1, 1].

    Negative values are left rotations, positive right rotations; a
    180-degree turn maps to the closed endpoint +1.
    """
    raw = (normalize_angle(new_heading) - normalize_angle(prev_heading)) % 360.0
    if raw > 180.0:
        raw -= 360.0
    return raw / 180.0


def junction_category(graph: EnvironmentGraph, v: str) -> int:
    """Bucket the out-degree into {<=2, 3, 4, >4} -> {0, 1, 2, 3}."""
    d = graph.out_degree(v)
    if d <= 2:
        return 0
    if d == 3:
        return 1
    if d == 4:
        return 2
    return 3


def is_success(graph: EnvironmentGraph, stop_node: str, goal_node: str) -> bool:
    """True when the stop node is the goal or one of its undirected neighbors."""
    if stop_node not in graph.nodes or goal_node not in graph.nodes:
        raise GraphError("success test on unknown node")
    return stop_node == goal_node or goal_node in graph.undirected_neighbors(stop_node)


@dataclass(frozen=True)
class NavInstance:
    """A navigation task: gold route, start heading, instruction text."""

    id: str
    route: tuple[str, ...]
    start_heading: float
    instruction: str
    dataset_tag: str  # "touchdown" or "map2seq"

    @property
    def goal(self) -> str:
        return self.route[-1]

    def validate(self, graph: EnvironmentGraph) -> None:
        if len(self.route) < 2:
            raise DataError(f"instance {self.id}: route must have at least 2 nodes")
        for v, u in zip(self.route, self.route[1:]):
            try:
                graph.edge_angle(v, u)
            except GraphError as exc:
                raise DataError(f"instance {self.id}: {exc}") from exc

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "route": list(self.route),
            "start_heading": self.start_heading,
            "instruction": self.instruction,
            "dataset_tag": self.dataset_tag,
        }

    @classmethod
    def from_json(cls, payload: dict) -> "NavInstance":
        try:
            return cls(
                id=str(payload["id"]),
                route=tuple(payload["route"]),
                start_heading=float(payload["start_heading"]),
                instruction=str(payload["instruction"]),
                dataset_tag=str(payload["dataset_tag"]),
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"malformed instance payload: {exc}") from exc


def save_instances(instances: Iterable[NavInstance], path: str) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), sort_keys=True) + "\n")


def load_instances(path: str) -> list[NavInstance]:
    out = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(NavInstance.from_json(json.loads(line)))
    return out


@dataclass(frozen=True)
class StepContext:
    """Per-timestep observation handed to a policy alongside the state."""

    instance: NavInstance
    t: int  # 1-based timestep
    prev_action: Optional[Action]
    heading_delta: float
    junction_category: int


Policy = Callable[[AgentState, StepContext], Action]


@dataclass(frozen=True)
class TrajectoryStep:
    state: AgentState
    action: Action
    heading_delta: float
    junction_category: int


@dataclass(frozen=True)
class Trajectory:
    """Executed episode: per-step records plus the state after the last move."""

    steps: tuple[TrajectoryStep, ...]
    final_state: AgentState
    terminated: str  # "stopped" or "step_limit"

    @property
    def final_node(self) -> str:
        return self.final_state.node

    def node_path(self) -> list[str]:
        """Visited nodes with consecutive duplicates (rotations) collapsed."""
        path = [self.steps[0].state.node]
        for s in self.steps[1:]:
            if s.state.node != path[-1]:
                path.append(s.state.node)
        if self.final_state.node != path[-1]:
            path.append(self.final_state.node)
        return path

    def to_json_lines(self) -> list[dict]:
        rows = [
            {
                "node": s.state.node,
                "heading": s.state.heading,
                "action": int(s.action),
                "heading_delta": s.heading_delta,
                "junction_category": s.junction_category,
            }
            for s in self.steps
        ]
        return rows


def run_episode(
    graph: EnvironmentGraph,
    instance: NavInstance,
    policy: Policy,
    max_steps: int = DEFAULT_STEP_LIMIT,
) -> Trajectory:
    """Roll one episode until the policy stops or the step cap is hit.

    On step-limit termination the final node is whatever the agent reached
    after its last executed action; metrics treat it as the stop node.
    """
    if max_steps < 1:
        raise PolicyProtocolError("max_steps must be >= 1")
    state = AgentState(instance.route[0], normalize_angle(instance.start_heading))
    heading_edge_index(graph, state)  # validate the start pose
    steps: list[TrajectoryStep] = []
    prev_heading: Optional[float] = None
    prev_action: Optional[Action] = None
    for t in range(1, max_steps + 1):
        hd = 0.0 if prev_heading is None else heading_delta(prev_heading, state.heading)
        jc = junction_category(graph, state.node)
        ctx = StepContext(
            instance=instance,
            t=t,
            prev_action=prev_action,
            heading_delta=hd,
            junction_category=jc,
        )
        raw = policy(state, ctx)
        try:
            action = Action(raw)
        except ValueError:
            raise PolicyProtocolError(f"policy returned invalid action {raw!r}") from None
        steps.append(TrajectoryStep(state, action, hd, jc))
        if action == Action.STOP:
            return Trajectory(tuple(steps), state, "stopped")
        prev_heading = state.heading
        prev_action = action
        state = step(graph, state, action)
    return Trajectory(tuple(steps), state, "step_limit")


def derive_gold_actions(graph: EnvironmentGraph, instance: NavInstance) -> list[Action]:
    """Action sequence that replays the gold route exactly, ending with stop.

    At each route node the agent rotates along the shorter side toward the
    next route edge (clockwise on ties) and then moves forward; automatic
    rotation at arrival is accounted for by recomputing the facing index.
    """
    instance.validate(graph)
    actions: list[Action] = []
    state = AgentState(instance.route[0], normalize_angle(instance.start_heading))
    for nxt in instance.route[1:]:
        target_angle = graph.edge_angle(state.node, nxt)
        out = graph.out_edges(state.node)
        k = len(out)
        cur = heading_edge_index(graph, state)
        tgt = next(i for i, (u, a) in enumerate(out) if angular_distance(a, target_angle) < ANGLE_EPS)
        cw = (tgt - cur) % k
        ccw = (cur - tgt) % k
        if cw <= ccw:
            rotations = [Action.RIGHT] * cw
        else:
            rotations = [Action.LEFT] * ccw
        for rot in rotations:
            actions.append(rot)
            state = step(graph, state, rot)
        actions.append(Action.FORWARD)
        state = step(graph, state, Action.FORWARD)
    actions.append(Action.STOP)
    return actions


def gold_replay_policy(graph: EnvironmentGraph, instance: NavInstance) -> Policy:
    """Policy that emits the precomputed gold actions by timestep."""
    gold = derive_gold_actions(graph, instance)

    def policy(state: AgentState, ctx: StepContext) -> Action:
        return gold[ctx.t - 1]

    return policy
