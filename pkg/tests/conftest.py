import numpy as np
import pytest

from streetnav.env import EnvironmentGraph
from streetnav.worldgen import WorldSpec, World, gen_world, gen_instances


@pytest.fixture(scope="session")
def fork_graph() -> EnvironmentGraph:
    """A has one edge to B at 90; B forks at 80/270; C closes the loop."""
    nodes = {"A": (0.0, 0.0), "B": (1.0, 0.0), "C": (2.0, 0.2)}
    edges = {
        "A": [("B", 90.0)],
        "B": [("C", 80.0), ("A", 270.0)],
        "C": [("B", 260.0)],
    }
    return EnvironmentGraph(nodes, edges)


@pytest.fixture(scope="session")
def tie_graph() -> EnvironmentGraph:
    nodes = {"X": (0.0, 0.0), "P": (0.0, 1.0), "Q": (0.0, -1.0)}
    edges = {
        "X": [("P", 0.0), ("Q", 180.0)],
        "P": [("X", 180.0)],
        "Q": [("X", 0.0)],
    }
    return EnvironmentGraph(nodes, edges)


def make_grid_world(width: int, height: int, seed: int = 0) -> World:
    """Exact grid: no jitter, no pruning, no diagonals, no subdivision."""
    return gen_world(
        WorldSpec(
            grid_width=width,
            grid_height=height,
            edge_jitter=0.0,
            keep_edge_prob=1.0,
            diagonal_prob=0.0,
            subdivision_probs=(1.0, 0.0, 0.0),
            street_bend=0.0,
            seed=seed,
        )
    )


@pytest.fixture(scope="session")
def grid3_world() -> World:
    return make_grid_world(3, 3)


@pytest.fixture(scope="session")
def grid12_graph() -> EnvironmentGraph:
    """12-node exact grid used as the DTW oracle fixture."""
    return make_grid_world(4, 3).graph


@pytest.fixture(scope="session")
def line_graph() -> EnvironmentGraph:
    nodes = {f"p{i}": (float(i), 0.0) for i in range(5)}
    edges = {}
    for i in range(5):
        out = []
        if i + 1 < 5:
            out.append((f"p{i+1}", 90.0))
        if i - 1 >= 0:
            out.append((f"p{i-1}", 270.0))
        edges[f"p{i}"] = out
    return EnvironmentGraph(nodes, edges)


@pytest.fixture(scope="session")
def small_world() -> World:
    """Jittered 7x7 world shared by integration-style tests."""
    return gen_world(WorldSpec(grid_width=7, grid_height=7, seed=11))


@pytest.fixture(scope="session")
def small_instances(small_world):
    m2s = gen_instances(small_world, "map2seq", 30, seed=4, min_len=8, max_len=14)
    td = gen_instances(small_world, "touchdown", 30, seed=5, min_len=8, max_len=14)
    return m2s + td
