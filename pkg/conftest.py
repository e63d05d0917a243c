import pytest

from src.coordination import SafetyParams
from src.network import NetworkGraph, Side, build_grid_network
from src.simulation import Scenario, random_trips
from src.trajectory import MotionLimits
from src.world import TrafficModel, TripRequest

MANEUVERS = ("right", "straight", "left")


def entry_node(graph: NetworkGraph, row: int, col: int, side: Side, cols: int = 1) -> int:
    return graph.intersections[row * cols + col].entry_nodes[side]


def gate_node(graph: NetworkGraph, row: int, col: int, side: Side, cols: int = 1) -> int:
    """Boundary gate feeding the given side of intersection (row, col)."""
    target = entry_node(graph, row, col, side, cols)
    for edge in graph.edges.values():
        if edge.kind == "stub" and edge.head == target:
            return edge.tail
    raise LookupError(f"no gate on side {side.name} of ({row}, {col})")


def internal_path(graph: NetworkGraph, side: Side, maneuver: str, intersection: int = 0):
    return graph.intersections[intersection].paths[side * 3 + MANEUVERS.index(maneuver)]


@pytest.fixture(scope="session")
def grid1() -> NetworkGraph:
    return build_grid_network(1, 1)


@pytest.fixture(scope="session")
def grid2() -> NetworkGraph:
    return build_grid_network(2, 2)


@pytest.fixture
def limits() -> MotionLimits:
    return MotionLimits()


@pytest.fixture
def safety() -> SafetyParams:
    return SafetyParams()


@pytest.fixture
def model2(grid2) -> TrafficModel:
    return TrafficModel(grid2)


@pytest.fixture
def busy_scenario(grid2) -> Scenario:
    """Eight trips on a 2x2 grid starting within ten seconds of each other."""
    return Scenario(graph=grid2, trips=tuple(random_trips(grid2, 8, seed=3, window=(0.0, 10.0))))


@pytest.fixture
def single_trip(grid1) -> TripRequest:
    return TripRequest(0, gate_node(grid1, 0, 0, Side.SOUTH), gate_node(grid1, 0, 0, Side.NORTH), 0.0)
