"""Candidate routes, travel-time prediction and person-by-person optimal re-routing.

Each CAV in the network has up to three candidate routes from its next node:
the free-flow shortest path, the historical-mean shortest path and the
congestion-weighted shortest path. An assignment picks one candidate per CAV,
and the predictor scores it by forward-simulating intersection coordination
for every CAV to its destination.
"""

import itertools
import logging
import math
from collections.abc import Mapping
from dataclasses import dataclass, field

import numpy as np

from src.network import EdgeId, NetworkGraph, NodeId, Route, shortest_time_path
from src.trajectory import MotionLimits
from src.world import StepKind, TrafficStats, TripRequest, WorldState

logger = logging.getLogger(__name__)

MAX_ROUTES_PER_CAV = 3
IMPROVEMENT_GUARD = 1e-9
DELAY_THRESHOLD = 1e-6


class BudgetExceededError(RuntimeError):
    """Raised when exhaustive assignment search would exceed its evaluation budget."""


@dataclass(frozen=True)
class RouteSet:
    cav_id: int
    routes: tuple[Route, ...]

    def __post_init__(self) -> None:
        if not self.routes:
            raise ValueError(f"CAV {self.cav_id} has no candidate routes")


@dataclass(frozen=True)
class AssignmentMatrix:
    """One route choice per CAV; equivalent to a binary N×M matrix with unit row sums."""

    routes_per_cav: int
    choices: tuple[tuple[int, int], ...] = ()

    def __post_init__(self) -> None:
        if not 1 <= self.routes_per_cav <= MAX_ROUTES_PER_CAV:
            raise ValueError(f"routes_per_cav must be in [1, {MAX_ROUTES_PER_CAV}], got {self.routes_per_cav}")
        ids = [cav_id for cav_id, _ in self.choices]
        if ids != sorted(set(ids)):
            raise ValueError("assignment CAV ids must be unique and sorted")
        for cav_id, m in self.choices:
            if not 0 <= m < self.routes_per_cav:
                raise ValueError(f"CAV {cav_id}: route index {m} outside [0, {self.routes_per_cav})")

    @classmethod
    def from_mapping(cls, mapping: Mapping[int, int], routes_per_cav: int) -> "AssignmentMatrix":
        return cls(routes_per_cav, tuple(sorted(mapping.items())))

    @property
    def cav_ids(self) -> tuple[int, ...]:
        return tuple(cav_id for cav_id, _ in self.choices)

    def __len__(self) -> int:
        return len(self.choices)

    def choice(self, cav_id: int) -> int:
        for cid, m in self.choices:
            if cid == cav_id:
                return m
        raise KeyError(f"CAV {cav_id} is not in the assignment")

    def with_choice(self, cav_id: int, m: int) -> "AssignmentMatrix":
        """Copy with CAV ``cav_id`` on route ``m``, adding the CAV if absent."""
        mapping = dict(self.choices)
        mapping[cav_id] = m
        return AssignmentMatrix.from_mapping(mapping, self.routes_per_cav)

    def to_array(self) -> np.ndarray:
        matrix = np.zeros((len(self.choices), self.routes_per_cav), dtype=int)
        for row, (_, m) in enumerate(self.choices):
            matrix[row, m] = 1
        return matrix


@dataclass(frozen=True)
class TravelTimePrediction:
    total: float
    travel_times: Mapping[int, float] = field(default_factory=dict)
    delays: Mapping[int, float] = field(default_factory=dict)

    @property
    def feasible(self) -> bool:
        return math.isfinite(self.total)


@dataclass(frozen=True)
class RoutingResult:
    assignment: AssignmentMatrix | None
    prediction: TravelTimePrediction | None
    evaluations: int
    changes: int = 0
    appended_total: float = math.inf
    history: tuple[float, ...] = ()
    rejected: str | None = None

    @property
    def accepted(self) -> bool:
        return self.rejected is None

    @property
    def total(self) -> float:
        return self.prediction.total if self.prediction is not None else math.inf


# ── Candidate routes ─────────────────────────────────────────────────────────

def free_flow_costs(graph: NetworkGraph, limits: MotionLimits) -> dict[EdgeId, float]:
    return {eid: edge.length / limits.v_max for eid, edge in graph.edges.items()}


def historical_costs(graph: NetworkGraph, stats: TrafficStats, limits: MotionLimits) -> dict[EdgeId, float]:
    """Mean observed traversal time per edge, free-flow where nothing was observed."""
    costs = free_flow_costs(graph, limits)
    for eid in costs:
        mean = stats.mean(eid)
        if mean is not None and mean > 0:
            costs[eid] = mean
    return costs


def congestion_costs(
    graph: NetworkGraph, occupancy: Mapping[EdgeId, int], limits: MotionLimits, kappa: float
) -> dict[EdgeId, float]:
    return {
        eid: cost * (1.0 + kappa * occupancy.get(eid, 0))
        for eid, cost in free_flow_costs(graph, limits).items()
    }


def candidate_cost_maps(
    graph: NetworkGraph,
    stats: TrafficStats,
    occupancy: Mapping[EdgeId, int],
    limits: MotionLimits,
    kappa: float,
    routes_per_cav: int = MAX_ROUTES_PER_CAV,
) -> list[dict[EdgeId, float]]:
    generators = (
        lambda: free_flow_costs(graph, limits),
        lambda: historical_costs(graph, stats, limits),
        lambda: congestion_costs(graph, occupancy, limits, kappa),
    )
    return [make() for make in generators[:routes_per_cav]]


def generate_candidate_routes(
    graph: NetworkGraph,
    cav_id: int,
    position: NodeId,
    destination: NodeId,
    stats: TrafficStats,
    occupancy: Mapping[EdgeId, int],
    limits: MotionLimits,
    *,
    kappa: float = 0.5,
    routes_per_cav: int = MAX_ROUTES_PER_CAV,
) -> RouteSet:
    """Up to three candidate routes from ``position``; duplicates are kept.

    Raises NoRouteError when the destination is unreachable.
    """
    maps = candidate_cost_maps(graph, stats, occupancy, limits, kappa, routes_per_cav)
    return _route_set(graph, cav_id, position, destination, maps)


def _route_set(
    graph: NetworkGraph,
    cav_id: int,
    position: NodeId,
    destination: NodeId,
    maps: list[dict[EdgeId, float]],
) -> RouteSet:
    if position == destination:
        return RouteSet(cav_id, tuple(() for _ in maps))
    return RouteSet(cav_id, tuple(shortest_time_path(graph, position, destination, costs) for costs in maps))


def build_route_sets(world: WorldState, *, routes_per_cav: int, kappa: float) -> dict[int, RouteSet]:
    """Candidate routes for every CAV in ``world`` from its next node, sharing one set of cost maps."""
    model = world.model
    maps = candidate_cost_maps(
        model.graph, world.traffic_stats, world.occupancy(), model.limits, kappa, routes_per_cav
    )
    return {
        cav_id: _route_set(model.graph, cav_id, cav.next_node, cav.trip.destination, maps)
        for cav_id, cav in sorted(world.cavs.items())
    }


def baseline_route(world: WorldState, trip: TripRequest, *, kappa: float) -> Route:
    """Congestion-weighted shortest path at departure, never revised."""
    model = world.model
    costs = congestion_costs(model.graph, world.occupancy(), model.limits, kappa)
    return shortest_time_path(model.graph, trip.origin, trip.destination, costs)


# ── Prediction ───────────────────────────────────────────────────────────────

class TravelTimePredictor:
    """Scores assignments by forward simulation from one snapshot.

    Results are cached per assignment; the cache is dropped whenever a
    different snapshot is passed in. ``evaluations`` counts simulations
    actually run.
    """

    def __init__(self) -> None:
        self.evaluations = 0
        self._snapshot: WorldState | None = None
        self._cache: dict[tuple, TravelTimePrediction] = {}

    def predict(
        self,
        snapshot: WorldState,
        route_sets: Mapping[int, RouteSet],
        assignment: AssignmentMatrix,
    ) -> TravelTimePrediction:
        if snapshot is not self._snapshot:
            self._snapshot = snapshot
            self._cache = {}
        if set(assignment.cav_ids) != set(snapshot.cavs):
            raise ValueError("assignment must cover exactly the CAVs in the snapshot")

        key = tuple((cav_id, route_sets[cav_id].routes[m]) for cav_id, m in assignment.choices)
        cached = self._cache.get(key)
        if cached is not None:
            return cached

        self.evaluations += 1
        world = snapshot.clone()
        for cav_id, m in assignment.choices:
            world.assign(cav_id, route_sets[cav_id].routes[m], m)

        travel_times: dict[int, float] = {}
        delays: dict[int, float] = {cav_id: 0.0 for cav_id in assignment.cav_ids}
        total = 0.0
        while world.peek() is not None:
            step = world.advance()
            if step.kind is StepKind.BLOCKED:
                total = math.inf
                break
            if step.kind is StepKind.COMPLETED:
                travel_times[step.cav_id] = step.travel_time
                total += step.travel_time
            else:
                delays[step.cav_id] += step.delay

        prediction = TravelTimePrediction(total, travel_times, delays)
        self._cache[key] = prediction
        return prediction


def predict_total_travel_time(
    predictor: TravelTimePredictor,
    snapshot: WorldState,
    route_sets: Mapping[int, RouteSet],
    assignment: AssignmentMatrix,
    cav_id: int,
    m: int,
) -> TravelTimePrediction:
    """Predicted total with CAV ``cav_id`` moved to route ``m`` and everyone else unchanged."""
    return predictor.predict(snapshot, route_sets, assignment.with_choice(cav_id, m))


def _best_index(predictions: list[TravelTimePrediction]) -> int:
    return min(range(len(predictions)), key=lambda m: (predictions[m].total, m))


# ── Assignment search ────────────────────────────────────────────────────────

def reroute(
    predictor: TravelTimePredictor,
    snapshot: WorldState,
    route_sets: Mapping[int, RouteSet],
    assignment: AssignmentMatrix,
    incumbent: TravelTimePrediction | None = None,
    *,
    delayed_only: bool = False,
    last_changed: int | None = None,
) -> RoutingResult:
    """Cycle through CAVs giving each its best route given the others.

    A change is adopted only when it lowers the predicted total. The loop ends
    once every other CAV has been visited since the last change without one,
    which makes the result person-by-person optimal when ``delayed_only`` is off.
    With ``delayed_only`` a CAV whose predicted coordination delay is zero
    keeps its route without being evaluated.
    """
    start = predictor.evaluations
    if incumbent is None:
        incumbent = predictor.predict(snapshot, route_sets, assignment)
    order = list(assignment.cav_ids)
    history = [incumbent.total]
    changes = 0

    if last_changed in order:
        position = order.index(last_changed)
        required = len(order) - 1
    else:
        position = -1
        required = len(order)

    unchanged = 0
    while order and unchanged < required:
        position = (position + 1) % len(order)
        cav_id = order[position]
        if delayed_only and incumbent.delays.get(cav_id, 0.0) <= DELAY_THRESHOLD:
            unchanged += 1
            continue
        current = assignment.choice(cav_id)
        trials = [
            incumbent if m == current
            else predict_total_travel_time(predictor, snapshot, route_sets, assignment, cav_id, m)
            for m in range(assignment.routes_per_cav)
        ]
        best = _best_index(trials)
        if trials[best].total < incumbent.total - IMPROVEMENT_GUARD:
            logger.debug(
                "CAV %d: route %d -> %d, predicted total %.3f -> %.3f",
                cav_id, current, best, incumbent.total, trials[best].total,
            )
            assignment = assignment.with_choice(cav_id, best)
            incumbent = trials[best]
            history.append(incumbent.total)
            changes += 1
            unchanged = 0
        else:
            unchanged += 1

    return RoutingResult(
        assignment=assignment,
        prediction=incumbent,
        evaluations=predictor.evaluations - start,
        changes=changes,
        history=tuple(history),
    )


def route_new_cav(
    predictor: TravelTimePredictor,
    snapshot: WorldState,
    trip: TripRequest,
    route_sets: Mapping[int, RouteSet],
    assignment: AssignmentMatrix,
    *,
    delayed_only: bool = True,
) -> RoutingResult:
    """Route an arriving CAV, then re-route the rest starting after it.

    ``snapshot`` already contains the new CAV; ``assignment`` covers the
    CAVs that were there before it. A trip whose every candidate is predicted
    infeasible is rejected.
    """
    start = predictor.evaluations
    candidates = [
        predictor.predict(snapshot, route_sets, assignment.with_choice(trip.cav_id, m))
        for m in range(assignment.routes_per_cav)
    ]
    best = _best_index(candidates)
    if not candidates[best].feasible:
        logger.info("Trip %d rejected: no candidate route has a feasible prediction", trip.cav_id)
        return RoutingResult(
            assignment=None,
            prediction=None,
            evaluations=predictor.evaluations - start,
            rejected="all candidate routes infeasible",
        )

    result = reroute(
        predictor,
        snapshot,
        route_sets,
        assignment.with_choice(trip.cav_id, best),
        candidates[best],
        delayed_only=delayed_only,
        last_changed=trip.cav_id,
    )
    return RoutingResult(
        assignment=result.assignment,
        prediction=result.prediction,
        evaluations=predictor.evaluations - start,
        changes=result.changes,
        appended_total=candidates[best].total,
        history=result.history,
    )


def solve_system_optimal(
    predictor: TravelTimePredictor,
    snapshot: WorldState,
    route_sets: Mapping[int, RouteSet],
    routes_per_cav: int,
    *,
    budget: int = MAX_ROUTES_PER_CAV**9,
) -> RoutingResult:
    """Exhaustive search over all Mᴺ assignments; ties go to the lexicographically first."""
    cav_ids = sorted(snapshot.cavs)
    count = routes_per_cav ** len(cav_ids)
    if count > budget:
        raise BudgetExceededError(
            f"{routes_per_cav}^{len(cav_ids)} = {count} assignments exceed the budget of {budget}"
        )
    best: tuple[AssignmentMatrix, TravelTimePrediction] | None = None
    for combo in itertools.product(range(routes_per_cav), repeat=len(cav_ids)):
        assignment = AssignmentMatrix.from_mapping(dict(zip(cav_ids, combo)), routes_per_cav)
        prediction = predictor.predict(snapshot, route_sets, assignment)
        if best is None or prediction.total < best[1].total:
            best = (assignment, prediction)

    assignment, prediction = best
    if not prediction.feasible:
        return RoutingResult(None, None, count, rejected="every assignment is infeasible")
    return RoutingResult(assignment, prediction, count, appended_total=prediction.total, history=(prediction.total,))
