"""Procedural synthetic cities: graphs, landmarks, features, routes, text.

Worlds are perturbed grids with bidirectional streets, optional diagonals
(for >4-way junctions), and randomly pruned edges (creating T-junctions
and dead ends, hence environment auto-rotations).  Landmarks from a shared
vocabulary are placed on nodes with a bearing along one of the node's
outgoing edges, and every feature variant encodes landmark presence in the
slices facing that bearing, so instructions grounded in landmarks are in
principle recoverable from the panorama features.

Instructions are template-generated.  Every route yields one direction
clause per interior junction (out-degree >= 3), a block-counted stop
clause, and - for touchdown-style instances - a leading orientation
clause.  ``follow_instruction`` is a scripted reader of that grammar; the
generator simulates it clause by clause and falls back to an explicit
ordinal form ("take the second street on your right") whenever the plain
wording would be ambiguous, which makes every generated instruction
exactly followable.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import dataclass, field
from typing import Iterable, Optional, Sequence

import numpy as np

from .bpe import DEFAULT_DIRECTION_WORDS, MaskLexicon, rank_by_frequency
from .env import (
    Action,
    AgentState,
    EnvironmentGraph,
    NavInstance,
    angular_distance,
    heading_delta,
    normalize_angle,
)
from .errors import DataError, WorldGenError
from .pano import (
    NUM_SLICES,
    PanoFeatureStore,
    SEMSEG_CLASSES,
    nearest_slice,
)

STRAIGHT_TOLERANCE_DEG = 30.0

NUM_WORDS = {
    1: "one", 2: "two", 3: "three", 4: "four", 5: "five", 6: "six",
    7: "seven", 8: "eight", 9: "nine", 10: "ten", 11: "eleven", 12: "twelve",
}
WORD_NUMS = {w: n for n, w in NUM_WORDS.items()}

ORDINAL_WORDS = {1: "first", 2: "second", 3: "third", 4: "fourth", 5: "fifth", 6: "sixth"}
WORD_ORDINALS = {w: n for n, w in ORDINAL_WORDS.items()}

_ADJECTIVES = (
    "golden", "silver", "old", "little", "grand", "royal", "lucky", "happy",
    "quiet", "sunny", "rusty", "ivory", "copper", "velvet", "marble", "cedar",
    "maple", "amber", "coral", "misty",
)
_NOUNS = (
    "lantern", "anchor", "garden", "harbor", "crown", "compass", "fountain",
    "bridge", "castle", "meadow", "falcon", "tiger", "rose", "star", "moon",
    "pearl", "acorn", "willow", "raven", "fox",
)
_KINDS = (
    "bakery", "cafe", "bank", "hotel", "pharmacy", "bookstore", "diner",
    "florist", "gallery", "barbershop", "laundromat", "butcher", "tailor",
    "toyshop", "grocery",
)
_COLORS = ("red", "blue", "green", "yellow", "purple", "orange", "brown", "pink", "teal", "gray")


@dataclass(frozen=True)
class Landmark:
    adj: str
    noun: str
    kind: str
    color: str

    @property
    def name(self) -> str:
        return f"{self.adj} {self.noun}"

    def phrases(self) -> tuple[str, ...]:
        """Every surface phrase the templates may use for this landmark."""
        return (
            f"the {self.adj} {self.noun} {self.kind}",
            f"the {self.color} {self.kind}",
            f"the {self.kind} with the {self.color} awning",
        )

    def phrase(self, style: str, rng: np.random.Generator) -> str:
        if style == "map2seq":
            return self.phrases()[0]
        # touchdown-style wording leans on visual attributes; the wordier
        # awning form appears occasionally
        return self.phrases()[2] if rng.random() < 0.25 else self.phrases()[1]

    def words(self) -> tuple[str, ...]:
        return (self.adj, self.noun, self.kind, self.color, "awning")


@dataclass(frozen=True)
class Placement:
    landmark_id: int
    bearing: float  # an outgoing-edge angle of the hosting node


@dataclass(frozen=True)
class WorldSpec:
    """Generation knobs; identical spec + seed give byte-identical worlds."""

    grid_width: int = 11
    grid_height: int = 11
    edge_jitter: float = 0.18
    keep_edge_prob: float = 0.85
    diagonal_prob: float = 0.04
    subdivision_probs: tuple[float, float, float] = (0.15, 0.40, 0.45)  # street segment nodes
    street_bend: float = 0.12
    landmark_count: int = 60
    landmark_probs: tuple[float, float, float] = (0.15, 0.55, 0.30)  # P(0), P(1), P(2) per node
    prefinal_dim: int = 64
    fourth_width: int = 160
    fourth_channels: int = 2
    feature_noise: float = 0.1
    signal_strength: float = 1.0
    seed: int = 0


class LandmarkTable:
    """Shared landmark vocabulary plus per-landmark feature signatures."""

    def __init__(self, landmarks: Sequence[Landmark], spec: WorldSpec):
        self.landmarks = list(landmarks)
        sig_rng = np.random.default_rng(spec.seed + 7919)
        n = len(self.landmarks)
        self.prefinal_sigs = _unit_rows(sig_rng.standard_normal((n, spec.prefinal_dim)))
        self.fourth_sigs = _unit_rows(sig_rng.standard_normal((n, 100)))
        raw = sig_rng.random((n, SEMSEG_CLASSES)) ** 4
        self.semseg_sigs = (raw / raw.sum(axis=1, keepdims=True)).astype(np.float32)

    def __len__(self) -> int:
        return len(self.landmarks)

    def __getitem__(self, i: int) -> Landmark:
        return self.landmarks[i]

    def all_words(self) -> list[str]:
        words: list[str] = []
        for lm in self.landmarks:
            for w in lm.words():
                if w not in words:
                    words.append(w)
        return words


def _unit_rows(arr: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(arr, axis=1, keepdims=True)
    return (arr / norms).astype(np.float32)


@dataclass
class World:
    graph: EnvironmentGraph
    stores: dict[str, PanoFeatureStore]
    landmarks: LandmarkTable
    placements: dict[str, list[Placement]]
    spec: WorldSpec

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        self.graph.save(os.path.join(out_dir, "graph.json"))
        for variant, store in self.stores.items():
            store.save(os.path.join(out_dir, f"features_{variant}.npz"))
        payload = {
            "spec": self.spec.__dict__ | {"landmark_probs": list(self.spec.landmark_probs)},
            "landmarks": [lm.__dict__ for lm in self.landmarks.landmarks],
            "placements": {
                v: [[p.landmark_id, p.bearing] for p in pls]
                for v, pls in sorted(self.placements.items())
            },
        }
        with open(os.path.join(out_dir, "landmarks.json"), "w", encoding="utf-8") as fh:
            json.dump(payload, fh, sort_keys=True)

    @classmethod
    def load(cls, out_dir: str) -> "World":
        graph = EnvironmentGraph.load(os.path.join(out_dir, "graph.json"))
        with open(os.path.join(out_dir, "landmarks.json"), "r", encoding="utf-8") as fh:
            payload = json.load(fh)
        spec_dict = dict(payload["spec"])
        spec_dict["landmark_probs"] = tuple(spec_dict["landmark_probs"])
        spec = WorldSpec(**spec_dict)
        table = LandmarkTable([Landmark(**d) for d in payload["landmarks"]], spec)
        placements = {
            v: [Placement(int(a), float(b)) for a, b in pls]
            for v, pls in payload["placements"].items()
        }
        stores = {}
        for variant in ("prefinal", "fourth", "semseg"):
            path = os.path.join(out_dir, f"features_{variant}.npz")
            if os.path.exists(path):
                stores[variant] = PanoFeatureStore.load(path)
        return cls(graph, stores, table, placements, spec)


# --- graph construction ----------------------------------------------------


def _node_id(gx: int, gy: int) -> str:
    return f"n{gx}-{gy}"


def gen_world(spec: WorldSpec) -> World:
    """Generate graph, landmark placements, and all three feature stores."""
    if spec.grid_width < 2 or spec.grid_height < 2:
        raise WorldGenError("grid must be at least 2x2")
    rng = np.random.default_rng(spec.seed)

    coords: dict[str, tuple[float, float]] = {}
    for gy in range(spec.grid_height):
        for gx in range(spec.grid_width):
            jx, jy = rng.uniform(-spec.edge_jitter, spec.edge_jitter, size=2)
            coords[_node_id(gx, gy)] = (gx + jx, gy + jy)

    grid_pairs: list[tuple[str, str]] = []
    diag_pairs: list[tuple[str, str]] = []
    for gy in range(spec.grid_height):
        for gx in range(spec.grid_width):
            v = _node_id(gx, gy)
            if gx + 1 < spec.grid_width:
                grid_pairs.append((v, _node_id(gx + 1, gy)))
            if gy + 1 < spec.grid_height:
                grid_pairs.append((v, _node_id(gx, gy + 1)))
            if gx + 1 < spec.grid_width and gy + 1 < spec.grid_height:
                diag_pairs.append((v, _node_id(gx + 1, gy + 1)))
                diag_pairs.append((_node_id(gx + 1, gy), _node_id(gx, gy + 1)))

    # Random spanning tree (shuffled Kruskal) keeps the street network
    # connected; remaining grid edges survive with keep_edge_prob.
    order = rng.permutation(len(grid_pairs))
    parent = {v: v for v in coords}

    def find(v: str) -> str:
        while parent[v] != v:
            parent[v] = parent[parent[v]]
            v = parent[v]
        return v

    kept: set[tuple[str, str]] = set()
    tree: set[tuple[str, str]] = set()
    skipped: list[tuple[str, str]] = []
    for i in order:
        a, b = grid_pairs[i]
        ra, rb = find(a), find(b)
        if ra != rb:
            parent[ra] = rb
            kept.add((a, b))
            tree.add((a, b))
        else:
            skipped.append((a, b))
    for a, b in skipped:
        if rng.random() < spec.keep_edge_prob:
            kept.add((a, b))
    for a, b in diag_pairs:
        if rng.random() < spec.diagonal_prob:
            kept.add((a, b))

    edges: dict[str, list[tuple[str, float]]] = {v: [] for v in coords}

    def angle(u: str, v: str) -> float:
        (xu, yu), (xv, yv) = coords[u], coords[v]
        return normalize_angle(math.degrees(math.atan2(xv - xu, yv - yu)))

    def add_street(a: str, b: str, required: bool) -> None:
        # Streets get 0-2 intermediate segment nodes (degree 2) with a slight
        # lateral bend; those bends are what trigger the environment's
        # automatic rotation on plain street segments.
        n_sub = int(rng.choice(3, p=list(spec.subdivision_probs)))
        (xa, ya), (xb, yb) = coords[a], coords[b]
        chain = [a]
        for j in range(n_sub):
            frac = (j + 1) / (n_sub + 1)
            lateral = rng.normal(0.0, spec.street_bend)
            # unit normal of the street direction
            dx, dy = xb - xa, yb - ya
            norm = math.hypot(dx, dy)
            nx, ny = -dy / norm, dx / norm
            node = f"s{a}.{b}.{j}"
            coords[node] = (xa + frac * dx + lateral * nx, ya + frac * dy + lateral * ny)
            chain.append(node)
        chain.append(b)
        ang_first = angle(chain[0], chain[1])
        ang_last = angle(chain[-1], chain[-2])
        clash = any(angular_distance(ang_first, e[1]) < 0.5 for e in edges[a]) or any(
            angular_distance(ang_last, e[1]) < 0.5 for e in edges[b]
        )
        if clash and not required:
            for node in chain[1:-1]:
                del coords[node]
            return
        for u, v in zip(chain, chain[1:]):
            edges.setdefault(u, [])
            edges.setdefault(v, [])
            edges[u].append((v, angle(u, v)))
            edges[v].append((u, angle(v, u)))

    for a, b in sorted(kept):
        add_street(a, b, required=(a, b) in tree)

    graph = EnvironmentGraph(coords, edges)

    landmarks = _gen_landmark_table(spec, rng)
    placements = _place_landmarks(graph, landmarks, spec, rng)
    stores = {
        "prefinal": _gen_prefinal_store(graph, landmarks, placements, spec, rng),
        "fourth": _gen_fourth_store(graph, landmarks, placements, spec, rng),
        "semseg": _gen_semseg_store(graph, landmarks, placements, spec, rng),
    }
    return World(graph, stores, landmarks, placements, spec)


def _gen_landmark_table(spec: WorldSpec, rng: np.random.Generator) -> LandmarkTable:
    pairs = [(a, n) for a in _ADJECTIVES for n in _NOUNS]
    if spec.landmark_count > len(pairs):
        raise WorldGenError(f"landmark_count {spec.landmark_count} exceeds name pool {len(pairs)}")
    chosen = rng.choice(len(pairs), size=spec.landmark_count, replace=False)
    landmarks = []
    for idx in chosen:
        adj, noun = pairs[int(idx)]
        kind = _KINDS[int(rng.integers(0, len(_KINDS)))]
        color = _COLORS[int(rng.integers(0, len(_COLORS)))]
        landmarks.append(Landmark(adj, noun, kind, color))
    return LandmarkTable(landmarks, spec)


def _place_landmarks(
    graph: EnvironmentGraph,
    table: LandmarkTable,
    spec: WorldSpec,
    rng: np.random.Generator,
) -> dict[str, list[Placement]]:
    placements: dict[str, list[Placement]] = {}
    p0, p1, p2 = spec.landmark_probs
    if abs(p0 + p1 + p2 - 1.0) > 1e-9:
        raise WorldGenError("landmark_probs must sum to 1")
    for v in sorted(graph.nodes):
        count = int(rng.choice(3, p=[p0, p1, p2]))
        out = graph.out_edges(v)
        if count == 0:
            placements[v] = []
            continue
        k = min(count, len(out))
        bearing_idx = rng.choice(len(out), size=k, replace=False)
        lm_ids = rng.choice(len(table), size=k, replace=False)
        placements[v] = [
            Placement(int(lm), out[int(bi)][1]) for lm, bi in zip(lm_ids, bearing_idx)
        ]
    return placements


def _gen_prefinal_store(graph, table, placements, spec, rng) -> PanoFeatureStore:
    feats = {}
    for v in sorted(graph.nodes):
        arr = rng.normal(0.0, spec.feature_noise, size=(NUM_SLICES, spec.prefinal_dim))
        for p in placements[v]:
            sig = table.prefinal_sigs[p.landmark_id][: spec.prefinal_dim]
            s = nearest_slice(p.bearing)
            arr[s] += spec.signal_strength * sig
            arr[(s - 1) % NUM_SLICES] += 0.4 * spec.signal_strength * sig
            arr[(s + 1) % NUM_SLICES] += 0.4 * spec.signal_strength * sig
        feats[graph.pano_key(v)] = arr.astype(np.float32)
    return PanoFeatureStore("prefinal", feats)


def _gen_fourth_store(graph, table, placements, spec, rng) -> PanoFeatureStore:
    width, channels = spec.fourth_width, spec.fourth_channels
    deg_per_col = 360.0 / width
    feats = {}
    for v in sorted(graph.nodes):
        arr = rng.normal(0.0, spec.feature_noise, size=(width, channels, 100))
        for p in placements[v]:
            sig = table.fourth_sigs[p.landmark_id]
            center = int(round(p.bearing / deg_per_col)) % width
            half = max(1, int(round(9.0 / deg_per_col)))
            cols = (center + np.arange(-half, half + 1)) % width
            arr[cols] += spec.signal_strength * sig[None, None, :]
        feats[graph.pano_key(v)] = arr.astype(np.float32)
    return PanoFeatureStore("fourth", feats)


_SEMSEG_AMBIENT = np.zeros(SEMSEG_CLASSES, dtype=np.float64)
_SEMSEG_AMBIENT[0] = 0.30  # road
_SEMSEG_AMBIENT[1] = 0.15  # sidewalk
_SEMSEG_AMBIENT[2] = 0.30  # building
_SEMSEG_AMBIENT[10] = 0.20  # sky
_SEMSEG_AMBIENT[8] = 0.05  # vegetation


def _gen_semseg_store(graph, table, placements, spec, rng) -> PanoFeatureStore:
    feats = {}
    for v in sorted(graph.nodes):
        arr = np.tile(_SEMSEG_AMBIENT, (NUM_SLICES, 1))
        arr += rng.uniform(0.0, spec.feature_noise * 0.2, size=arr.shape)
        for p in placements[v]:
            sig = table.semseg_sigs[p.landmark_id].astype(np.float64)
            s = nearest_slice(p.bearing)
            arr[s] += 0.8 * spec.signal_strength * sig
            arr[(s - 1) % NUM_SLICES] += 0.3 * spec.signal_strength * sig
            arr[(s + 1) % NUM_SLICES] += 0.3 * spec.signal_strength * sig
        arr = np.clip(arr, 0.0, None)
        arr /= arr.sum(axis=1, keepdims=True)
        arr32 = arr.astype(np.float32)
        arr32 /= arr32.sum(axis=1, keepdims=True)
        feats[graph.pano_key(v)] = arr32
    return PanoFeatureStore("semseg", feats)


# --- routes -----------------------------------------------------------------


def _bfs_shortest_path(graph: EnvironmentGraph, start: str, goal: str) -> Optional[list[str]]:
    from collections import deque

    prev = {start: start}
    queue = deque([start])
    while queue:
        node = queue.popleft()
        if node == goal:
            path = [node]
            while path[-1] != start:
                path.append(prev[path[-1]])
            return path[::-1]
        for nxt, _ in graph.out_edges(node):
            if nxt not in prev:
                prev[nxt] = node
                queue.append(nxt)
    return None


def _route_decisions(graph: EnvironmentGraph, route: Sequence[str]) -> list[int]:
    """Indices of interior route nodes with out-degree >= 3."""
    return [i for i in range(1, len(route) - 1) if graph.out_degree(route[i]) >= 3]


def route_tail_blocks(graph: EnvironmentGraph, route: Sequence[str]) -> int:
    """Forward moves after the last interior junction (whole route if none)."""
    decisions = _route_decisions(graph, route)
    last = decisions[-1] if decisions else 0
    return len(route) - 1 - last


def _count_intersections(graph: EnvironmentGraph, route: Sequence[str]) -> int:
    return sum(1 for v in route if graph.out_degree(v) >= 3)


def sample_routes(
    graph: EnvironmentGraph,
    style: str,
    n: int,
    seed: int,
    min_len: int = 15,
    max_len: int = 25,
    max_tail_blocks: int = 8,
) -> list[tuple[list[str], float]]:
    """Sample (route, start_heading) skeletons for one instruction style.

    map2seq-style routes are BFS-shortest paths with at least three
    junction nodes and an aligned start heading; touchdown-style routes
    are non-backtracking random walks with a random start heading.
    """
    if style not in ("map2seq", "touchdown"):
        raise WorldGenError(f"unknown dataset style {style!r}")
    rng = np.random.default_rng(seed)
    node_list = sorted(graph.nodes)
    routes: list[tuple[list[str], float]] = []
    attempts = 0
    max_attempts = 300 * n + 1000
    while len(routes) < n:
        attempts += 1
        if attempts > max_attempts:
            raise WorldGenError(
                f"could not sample {n} {style} routes in {max_attempts} attempts "
                f"({len(routes)} found); graph too small for the length constraints"
            )
        if style == "map2seq":
            start, goal = rng.choice(node_list, size=2, replace=False)
            path = _bfs_shortest_path(graph, str(start), str(goal))
            if path is None or not (min_len <= len(path) <= max_len):
                continue
            if _count_intersections(graph, path) < 3:
                continue
            if not 1 <= route_tail_blocks(graph, path) <= max_tail_blocks:
                continue
            heading = graph.edge_angle(path[0], path[1])
            routes.append((path, heading))
        else:
            start = str(rng.choice(node_list))
            length = int(rng.integers(min_len, max_len + 1))
            path = [start]
            prev = None
            while len(path) < length:
                options = [u for u, _ in graph.out_edges(path[-1]) if u != prev]
                if not options:
                    options = [u for u, _ in graph.out_edges(path[-1])]
                prev = path[-1]
                path.append(str(options[int(rng.integers(0, len(options)))]))
            if len(path) < min_len:
                continue
            if not 1 <= route_tail_blocks(graph, path) <= max_tail_blocks:
                continue
            out = graph.out_edges(path[0])
            heading = out[int(rng.integers(0, len(out)))][1]
            routes.append((path, heading))
    return routes


# --- instruction templates ---------------------------------------------------


def _resolve_landmark_phrase(world: World, node: str, phrase: str) -> Optional[float]:
    """Bearing of the unique landmark at ``node`` matching ``phrase``, else None."""
    matches = []
    for p in world.placements.get(node, []):
        if phrase in world.landmarks[p.landmark_id].phrases():
            matches.append(p.bearing)
    if len(matches) == 1:
        return matches[0]
    return None


def _candidate_edges(
    graph: EnvironmentGraph, node: str, prev: Optional[str]
) -> list[tuple[str, float]]:
    out = graph.out_edges(node)
    if prev is not None and len(out) > 1:
        filtered = [e for e in out if e[0] != prev]
        if filtered:
            return filtered
    return list(out)


def _category(delta_deg: float) -> str:
    if abs(delta_deg) <= STRAIGHT_TOLERANCE_DEG:
        return "straight"
    return "right" if delta_deg > 0 else "left"


def _resolve_category(
    graph: EnvironmentGraph, node: str, prev: Optional[str], arrival: float, cat: str
) -> Optional[str]:
    """The edge a reader would take for a left/right/straight clause."""
    best = None
    best_key = None
    for target, ang in _candidate_edges(graph, node, prev):
        delta = heading_delta(arrival, ang) * 180.0
        if _category(delta) != cat:
            continue
        key = (abs(delta), delta)
        if best_key is None or key < best_key:
            best, best_key = target, key
    return best


def _ordinal_clause(
    graph: EnvironmentGraph, node: str, prev: Optional[str], arrival: float, target: str
) -> str:
    cands = _candidate_edges(graph, node, prev)
    ang = graph.edge_angle(node, target)
    off = (ang - arrival) % 360.0
    # offsets must reuse the exact expression _resolve_ordinal sorts by,
    # or one-ulp modulo asymmetries shift the rank
    if off <= 180.0:
        side = "right"
        rank = 1 + sum(1 for _, a in cands if 0.0 < (a - arrival) % 360.0 < off)
    else:
        side = "left"
        ccw = (arrival - ang) % 360.0
        rank = 1 + sum(
            1 for _, a in cands if 0.0 < (arrival - a) % 360.0 < ccw
        )
    word = ORDINAL_WORDS.get(rank)
    if word is None:
        raise WorldGenError(f"junction at {node!r} has too many streets for an ordinal clause")
    return f"take the {word} street on your {side}"


def _resolve_ordinal(
    graph: EnvironmentGraph, node: str, prev: Optional[str], arrival: float, rank: int, side: str
) -> Optional[str]:
    cands = _candidate_edges(graph, node, prev)
    if side == "right":
        offs = [(target, (a - arrival) % 360.0) for target, a in cands]
    else:
        offs = [(target, (arrival - a) % 360.0) for target, a in cands]
    offs = sorted((pair for pair in offs if pair[1] > 0.0), key=lambda pair: pair[1])
    if rank < 1 or rank > len(offs):
        return None
    return offs[rank - 1][0]


def _place_phrase(world: World, node: str, style: str, rng: np.random.Generator) -> str:
    pls = world.placements.get(node, [])
    if pls:
        p = pls[int(rng.integers(0, len(pls)))]
        return world.landmarks[p.landmark_id].phrase(style, rng)
    return ["the intersection", "the corner", "the junction"][int(rng.integers(0, 3))]


def _direction_clause(
    world: World,
    prev: str,
    node: str,
    nxt: str,
    style: str,
    rng: np.random.Generator,
) -> str:
    graph = world.graph
    arrival = graph.edge_angle(prev, node)
    out_angle = graph.edge_angle(node, nxt)
    delta = heading_delta(arrival, out_angle) * 180.0
    cat = _category(delta)
    at = _place_phrase(world, node, style, rng)
    if _resolve_category(graph, node, prev, arrival, cat) == nxt:
        if cat == "straight":
            verb = ["go straight", "continue straight", "head straight"][int(rng.integers(0, 3))]
            link = ["at", "past"][int(rng.integers(0, 2))]
            return f"{verb} {link} {at}"
        verb = ["turn", "make a", "take a"][int(rng.integers(0, 3))]
        return f"{verb} {cat} at {at}"
    return _ordinal_clause(graph, node, prev, arrival, nxt)


def _orientation_clause(
    world: World, start: str, start_heading: float, gold_heading: float, style: str,
    rng: np.random.Generator,
) -> str:
    graph = world.graph
    pls = list(world.placements.get(start, []))
    rng.shuffle(pls)
    for p in pls:
        if angular_distance(p.bearing, gold_heading) > 1e-6:
            continue
        phrase = world.landmarks[p.landmark_id].phrase(style, rng)
        if _resolve_landmark_phrase(world, start, phrase) is not None:
            verb = ["head toward", "face"][int(rng.integers(0, 2))]
            return f"{verb} {phrase}"
    out = graph.out_edges(start)
    k = len(out)
    cur = next(i for i, (_, a) in enumerate(out) if angular_distance(a, start_heading) < 1e-6)
    tgt = next(i for i, (_, a) in enumerate(out) if angular_distance(a, gold_heading) < 1e-6)
    cw = (tgt - cur) % k
    ccw = (cur - tgt) % k
    if cw == 0:
        return "head straight ahead"
    if cw <= ccw:
        side, count = "right", cw
    else:
        side, count = "left", ccw
    if count == 1:
        return f"turn {side}"
    return f"turn {side} {NUM_WORDS[count]} times"


def _stop_clause(world: World, route: Sequence[str], style: str, rng: np.random.Generator) -> str:
    k = route_tail_blocks(world.graph, route)
    if k not in NUM_WORDS:
        raise WorldGenError(f"stop distance {k} blocks is out of template range")
    unit = "block" if k == 1 else "blocks"
    verb = ["walk", "go"][int(rng.integers(0, 2))]
    clause = f"{verb} {NUM_WORDS[k]} {unit} and stop"
    goal_pls = world.placements.get(route[-1], [])
    if goal_pls and rng.random() < 0.8:
        p = goal_pls[int(rng.integers(0, len(goal_pls)))]
        clause += f" at {world.landmarks[p.landmark_id].phrase(style, rng)}"
    return clause


def gen_instruction(
    world: World,
    route: Sequence[str],
    start_heading: float,
    style: str,
    rng: np.random.Generator,
) -> str:
    """Template-realize one instruction; guaranteed followable by the parser."""
    graph = world.graph
    clauses: list[str] = []
    if style == "touchdown":
        gold_heading = graph.edge_angle(route[0], route[1])
        clauses.append(
            _orientation_clause(world, route[0], start_heading, gold_heading, style, rng)
        )
    for i in _route_decisions(graph, route):
        clauses.append(_direction_clause(world, route[i - 1], route[i], route[i + 1], style, rng))
    clauses.append(_stop_clause(world, route, style, rng))
    text = clauses[0]
    for clause in clauses[1:]:
        joiner = " and then " if rng.random() < 0.3 else " then "
        text += joiner + clause
    return text


def gen_instances(
    world: World,
    style: str,
    n: int,
    seed: int,
    min_len: int = 15,
    max_len: int = 25,
) -> list[NavInstance]:
    """Routes plus template instructions, each verified followable."""
    rng = np.random.default_rng(seed + 104729)
    skeletons = sample_routes(world.graph, style, n, seed, min_len=min_len, max_len=max_len)
    instances = []
    for i, (route, heading) in enumerate(skeletons):
        text = gen_instruction(world, route, heading, style, rng)
        inst = NavInstance(
            id=f"{style}_{seed}_{i:05d}",
            route=tuple(route),
            start_heading=heading,
            instruction=text,
            dataset_tag=style,
        )
        followed = follow_instruction(world, inst)
        if followed != list(route):
            raise WorldGenError(
                f"generated instruction is not followable for {inst.id}: {text!r}"
            )
        instances.append(inst)
    return instances


# --- the scripted template reader -------------------------------------------

_CLAUSE_SPLIT_RE = re.compile(r"\s+(?:and\s+)?then\s+")
_STOP_RE = re.compile(r"^(?:walk|go) (\w+) blocks? and stop(?: at .*)?$")
_ORDINAL_RE = re.compile(r"^take the (\w+) street on your (left|right)$")
_TURN_RE = re.compile(r"^(?:turn|make a|take a) (left|right) at .*$")
_STRAIGHT_RE = re.compile(r"^(?:go|continue|head) straight (?:at|past) .*$")
_ORIENT_LM_RE = re.compile(r"^(?:head toward|face) (the .+)$")
_ORIENT_TURN_RE = re.compile(r"^turn (left|right)(?: (\w+) times)?$")


def follow_instruction(world: World, instance: NavInstance, max_moves: int = 200) -> list[str]:
    """Execute the template grammar in the environment; returns the node path.

    This is the closure check that the learning task is solvable: the
    parser sees only the instruction text and the start state, never the
    gold route.
    """
    graph = world.graph
    clauses = _CLAUSE_SPLIT_RE.split(instance.instruction.strip())
    if not clauses:
        raise DataError(f"{instance.id}: empty instruction")
    stop_m = _STOP_RE.match(clauses[-1])
    if not stop_m:
        raise DataError(f"{instance.id}: missing stop clause: {clauses[-1]!r}")
    blocks = WORD_NUMS.get(stop_m.group(1))
    if blocks is None:
        raise DataError(f"{instance.id}: bad block count {stop_m.group(1)!r}")
    body = clauses[:-1]

    start = instance.route[0]
    heading = normalize_angle(instance.start_heading)
    if instance.dataset_tag == "touchdown":
        if not body:
            raise DataError(f"{instance.id}: touchdown instruction lacks an orientation clause")
        heading = _resolve_orientation(world, start, heading, body[0], instance.id)
        body = body[1:]

    path = [start]
    pos, prev = start, None
    consumed = 0
    remaining = None if body else blocks
    for _ in range(max_moves):
        arrival = heading
        nxt = next(u for u, a in graph.out_edges(pos) if angular_distance(a, heading) < 1e-6)
        prev, pos = pos, nxt
        path.append(pos)
        _, heading = graph.closest_edge(pos, arrival)  # environment auto-rotation
        if remaining is not None:
            remaining -= 1
            if remaining == 0:
                return path
            continue
        if graph.out_degree(pos) >= 3:
            if consumed >= len(body):
                raise DataError(f"{instance.id}: ran out of direction clauses at {pos!r}")
            target_node = _resolve_direction(world, pos, prev, arrival, body[consumed], instance.id)
            consumed += 1
            heading = graph.edge_angle(pos, target_node)
            if consumed == len(body):
                remaining = blocks
    raise DataError(f"{instance.id}: instruction did not terminate within {max_moves} moves")


def _resolve_orientation(
    world: World, start: str, start_heading: float, clause: str, instance_id: str
) -> float:
    graph = world.graph
    m = _ORIENT_LM_RE.match(clause)
    if m:
        bearing = _resolve_landmark_phrase(world, start, m.group(1))
        if bearing is None:
            raise DataError(f"{instance_id}: cannot resolve orientation landmark {m.group(1)!r}")
        return graph.closest_edge(start, bearing)[1]
    if clause == "head straight ahead":
        return start_heading
    m = _ORIENT_TURN_RE.match(clause)
    if m:
        side = m.group(1)
        count = WORD_NUMS.get(m.group(2), 1) if m.group(2) else 1
        out = graph.out_edges(start)
        k = len(out)
        cur = next(
            i for i, (_, a) in enumerate(out) if angular_distance(a, start_heading) < 1e-6
        )
        idx = (cur + count) % k if side == "right" else (cur - count) % k
        return out[idx][1]
    raise DataError(f"{instance_id}: unrecognized orientation clause {clause!r}")


def _resolve_direction(
    world: World, node: str, prev: Optional[str], arrival: float, clause: str, instance_id: str
) -> str:
    graph = world.graph
    m = _ORDINAL_RE.match(clause)
    if m:
        rank = WORD_ORDINALS.get(m.group(1))
        if rank is None:
            raise DataError(f"{instance_id}: bad ordinal {m.group(1)!r}")
        target = _resolve_ordinal(graph, node, prev, arrival, rank, m.group(2))
        if target is None:
            raise DataError(f"{instance_id}: ordinal clause unresolvable at {node!r}")
        return target
    m = _TURN_RE.match(clause)
    if m:
        target = _resolve_category(graph, node, prev, arrival, m.group(1))
        if target is None:
            raise DataError(f"{instance_id}: no {m.group(1)} street at {node!r}")
        return target
    if _STRAIGHT_RE.match(clause):
        target = _resolve_category(graph, node, prev, arrival, "straight")
        if target is None:
            raise DataError(f"{instance_id}: no straight continuation at {node!r}")
        return target
    raise DataError(f"{instance_id}: unrecognized direction clause {clause!r}")


# --- splits ------------------------------------------------------------------


@dataclass(frozen=True)
class SplitSpec:
    """Geographic boundary polyline plus dev/test sizes and a sampling seed."""

    boundary: tuple[tuple[float, float], ...]  # (x, y) vertices ordered by y
    dev_count: int
    test_count: int
    seed: int = 0


def vertical_boundary(graph: EnvironmentGraph, fraction: float = 0.75) -> tuple[tuple[float, float], ...]:
    """A straight north-south cut at the given west-east fraction."""
    xs = [x for x, _ in graph.nodes.values()]
    ys = [y for _, y in graph.nodes.values()]
    bx = min(xs) + fraction * (max(xs) - min(xs))
    return ((bx, min(ys) - 1.0), (bx, max(ys) + 1.0))


def _boundary_x_at(boundary: Sequence[tuple[float, float]], y: float) -> float:
    pts = sorted(boundary, key=lambda p: p[1])
    if y <= pts[0][1]:
        return pts[0][0]
    for (x0, y0), (x1, y1) in zip(pts, pts[1:]):
        if y <= y1:
            if y1 == y0:
                return x1
            t = (y - y0) / (y1 - y0)
            return x0 + t * (x1 - x0)
    return pts[-1][0]


def node_region(graph: EnvironmentGraph, boundary: Sequence[tuple[float, float]], v: str) -> str:
    x, y = graph.nodes[v]
    return "seen" if x < _boundary_x_at(boundary, y) else "unseen"


def make_splits(
    instances: Sequence[NavInstance],
    graph: EnvironmentGraph,
    spec: SplitSpec,
) -> dict[str, dict[str, list[NavInstance]]]:
    """Seen (random) and unseen (geographic) train/dev/test assignments.

    Unseen scenario: training routes lie entirely west of the boundary,
    dev/test are sampled from routes entirely east of it, and routes that
    cross the boundary are discarded.
    """
    rng = np.random.default_rng(spec.seed)
    regions = {v: node_region(graph, spec.boundary, v) for v in graph.nodes}
    if len(set(regions.values())) < 2:
        raise WorldGenError("boundary does not partition the nodes into two regions")

    seen_pool: list[NavInstance] = []
    unseen_pool: list[NavInstance] = []
    for inst in instances:
        route_regions = {regions[v] for v in inst.route}
        if route_regions == {"seen"}:
            seen_pool.append(inst)
        elif route_regions == {"unseen"}:
            unseen_pool.append(inst)
        # crossing routes are dropped

    need = spec.dev_count + spec.test_count
    if len(unseen_pool) < need:
        raise WorldGenError(
            f"only {len(unseen_pool)} fully-unseen routes for dev+test={need}; "
            "generate more instances or move the boundary"
        )
    if not seen_pool:
        raise WorldGenError("no fully-seen routes remain for training")

    order = rng.permutation(len(unseen_pool))
    dev = [unseen_pool[i] for i in order[: spec.dev_count]]
    test = [unseen_pool[i] for i in order[spec.dev_count : need]]
    unseen_scenario = {"train": list(seen_pool), "dev": dev, "test": test}

    order_all = rng.permutation(len(instances))
    shuffled = [instances[i] for i in order_all]
    seen_scenario = {
        "dev": shuffled[: spec.dev_count],
        "test": shuffled[spec.dev_count : need],
        "train": shuffled[need:],
    }
    return {"seen": seen_scenario, "unseen": unseen_scenario}


def merge_splits(
    a: dict[str, dict[str, list[NavInstance]]],
    b: dict[str, dict[str, list[NavInstance]]],
) -> dict[str, dict[str, list[NavInstance]]]:
    """Union two datasets' splits (their boundaries must be aligned)."""
    out: dict[str, dict[str, list[NavInstance]]] = {}
    for scenario in a:
        out[scenario] = {split: list(a[scenario][split]) + list(b[scenario][split])
                         for split in a[scenario]}
    return out


# --- masking lexicons --------------------------------------------------------


def build_lexicons(world: World, corpus: Iterable[str]) -> tuple[MaskLexicon, MaskLexicon]:
    """Direction and object lexicons ranked by corpus frequency."""
    lines = list(corpus)
    direction = rank_by_frequency(DEFAULT_DIRECTION_WORDS, lines)
    objects = rank_by_frequency(world.landmarks.all_words(), lines)
    overlap = set(direction) & set(objects)
    if overlap:
        raise WorldGenError(f"direction and object lexicons overlap: {sorted(overlap)}")
    return MaskLexicon("direction", direction), MaskLexicon("object", objects)
