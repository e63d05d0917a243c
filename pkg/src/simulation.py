"""Event-driven simulation of a trip stream under one routing policy.

Events are processed in (time, priority, CAV id) order: completions first,
then node arrivals, then trip starts. Each trip start is a routing event:
under the proposed policy the arriving CAV is routed and the others
re-routed, under the baseline it takes the congestion-weighted shortest path,
and under the oracle every assignment is enumerated.
"""

import logging
import math
from collections import deque
from collections.abc import Collection, Sequence
from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from src.config import ScenarioConfig, TripConfig
from src.coordination import SafetyParams, SearchParams, audit_commits
from src.network import GridGeometry, NetworkGraph, NoRouteError, build_grid_network, load_network
from src.routing import (
    AssignmentMatrix,
    RoutingResult,
    TravelTimePredictor,
    baseline_route,
    build_route_sets,
    route_new_cav,
    solve_system_optimal,
)
from src.trajectory import MotionLimits
from src.world import EventKind, StepKind, TrafficModel, TrafficStats, TripRequest, WorldState

logger = logging.getLogger(__name__)

Mode = Literal["proposed", "baseline", "oracle"]


class ScenarioMismatchError(ValueError):
    """Raised when two runs being compared did not simulate the same traffic."""


@dataclass(frozen=True)
class TravelRecord:
    cav_id: int
    t_start: float
    t_finish: float

    @property
    def travel_time(self) -> float:
        return self.t_finish - self.t_start


@dataclass(frozen=True)
class RoutingEvent:
    event_index: int
    n_cavs: int
    evaluations: int
    m_pow_n: int
    time: float = 0.0
    changes: int = 0
    predicted_total: float = math.nan


@dataclass
class Metrics:
    fingerprint: str = ""
    mode: str = "proposed"
    routes_per_cav: int = 3
    trips_submitted: int = 0
    travel: dict[int, TravelRecord] = field(default_factory=dict)
    routing_events: list[RoutingEvent] = field(default_factory=list)
    rejected: list[int] = field(default_factory=list)
    stalls: int = 0
    audit_issues: list[str] = field(default_factory=list)

    @property
    def total_travel_time(self) -> float:
        return sum(record.travel_time for record in self.travel.values())

    @property
    def evaluations(self) -> int:
        return sum(event.evaluations for event in self.routing_events)

    @property
    def reroute_changes(self) -> int:
        return sum(event.changes for event in self.routing_events)

    def cumulative_totals(self, cav_ids: Collection[int] | None = None) -> list[tuple[int, float]]:
        """Running total travel time over completed CAVs ordered by departure."""
        records = self.travel.values() if cav_ids is None else [self.travel[i] for i in cav_ids]
        ordered = sorted(records, key=lambda r: (r.t_start, r.cav_id))
        running = np.cumsum([record.travel_time for record in ordered])
        return [(n + 1, float(total)) for n, total in enumerate(running)]


@dataclass(frozen=True)
class Scenario:
    graph: NetworkGraph
    trips: tuple[TripRequest, ...]
    limits: MotionLimits = MotionLimits()
    safety: SafetyParams = SafetyParams()
    search: SearchParams = SearchParams()
    mode: Mode = "proposed"
    routes_per_cav: int = 3
    kappa: float = 0.5
    delayed_only: bool = True
    oracle_budget: int = 3**9
    departure_speed_ratio: float = 0.8
    stall_delay: float = 0.5
    fingerprint: str = ""

    @property
    def departure_speed(self) -> float:
        return self.departure_speed_ratio * self.limits.v_max

    @classmethod
    def from_config(cls, config: ScenarioConfig) -> "Scenario":
        if config.network_file is not None:
            graph = load_network(config.network_file)
        else:
            grid = config.grid
            graph = build_grid_network(grid.rows, grid.cols, GridGeometry(**grid.geometry.model_dump()))

        source = config.trip_source
        if isinstance(source, list):
            trips = explicit_trips(graph, source)
        else:
            seed = source.seed if source.seed is not None else config.seed
            trips = random_trips(graph, source.count, seed, source.window)

        return cls(
            graph=graph,
            trips=tuple(trips),
            limits=MotionLimits(**config.limits.model_dump()),
            safety=SafetyParams(**config.safety.model_dump()),
            search=SearchParams(**config.search.model_dump()),
            mode=config.mode,
            routes_per_cav=config.routing.routes_per_cav,
            kappa=config.routing.kappa,
            delayed_only=config.routing.delayed_only,
            oracle_budget=config.routing.oracle_budget,
            departure_speed_ratio=config.departure_speed_ratio,
            stall_delay=config.stall_delay,
            fingerprint=config.fingerprint(),
        )


def explicit_trips(graph: NetworkGraph, trips: Sequence[TripConfig]) -> list[TripRequest]:
    """Trips in file order, numbered from zero."""
    requests = []
    for cav_id, trip in enumerate(trips):
        for node in (trip.origin, trip.destination):
            if node not in graph.nodes:
                raise ValueError(f"trip {cav_id}: unknown node {node}")
        requests.append(TripRequest(cav_id, trip.origin, trip.destination, trip.start_time))
    return requests


def random_trips(
    graph: NetworkGraph,
    count: int,
    seed: int,
    window: tuple[float, float] = (0.0, 120.0),
) -> list[TripRequest]:
    """Reproducible random trips between reachable node pairs, ids in start-time order."""
    if count < 0:
        raise ValueError(f"trip count must be non-negative, got {count}")
    rng = np.random.default_rng(seed)
    nodes = np.array(sorted(graph.nodes))
    pairs: list[tuple[int, int]] = []
    attempts = 0
    while len(pairs) < count:
        attempts += 1
        if attempts > 1000 * max(count, 1):
            raise RuntimeError("could not draw reachable origin/destination pairs")
        origin, destination = (int(n) for n in rng.choice(nodes, size=2, replace=False))
        if graph.has_route(origin, destination):
            pairs.append((origin, destination))
    starts = np.sort(rng.uniform(window[0], window[1], size=count))
    return [
        TripRequest(cav_id, origin, destination, float(start))
        for cav_id, ((origin, destination), start) in enumerate(zip(pairs, starts))
    ]


class Simulation:
    def __init__(self, scenario: Scenario) -> None:
        self.scenario = scenario
        model = TrafficModel(scenario.graph, scenario.limits, scenario.safety, scenario.search)
        self.world = WorldState(model, traffic_stats=TrafficStats(), record=True)
        self.predictor = TravelTimePredictor()
        self.metrics = Metrics(
            fingerprint=scenario.fingerprint,
            mode=scenario.mode,
            routes_per_cav=scenario.routes_per_cav,
            trips_submitted=len(scenario.trips),
        )
        self._pending = deque(sorted(scenario.trips, key=lambda t: (t.start_time, t.cav_id)))
        self._trips = {trip.cav_id: trip for trip in scenario.trips}

    def run(self) -> Metrics:
        logger.info(
            "Simulating %d trips on %d intersections (mode=%s, M=%d)",
            len(self.scenario.trips), len(self.scenario.graph.intersections),
            self.scenario.mode, self.scenario.routes_per_cav,
        )
        while self.step():
            pass
        logger.info(
            "Done: %d completed, %d rejected, total travel time %.3f s, %d predictions, %d stalls",
            len(self.metrics.travel), len(self.metrics.rejected),
            self.metrics.total_travel_time, self.metrics.evaluations, self.metrics.stalls,
        )
        return self.metrics

    def step(self) -> bool:
        """Process the next event. Returns False once nothing is left."""
        arrival = self.world.peek()
        trip = self._pending[0] if self._pending else None
        if arrival is None and trip is None:
            return False
        if trip is not None and (
            arrival is None
            or (trip.start_time, EventKind.TRIP_START, trip.cav_id) < (arrival.time, arrival.kind, arrival.cav_id)
        ):
            self._pending.popleft()
            self.start_trip(trip)
        else:
            self._advance()
        return True

    def _advance(self) -> None:
        result = self.world.advance()
        if result.kind is StepKind.COMPLETED:
            start = self._trips[result.cav_id].start_time
            self.metrics.travel[result.cav_id] = TravelRecord(result.cav_id, start, result.time)
        elif result.kind is StepKind.BLOCKED:
            self.metrics.stalls += 1
            logger.warning(
                "CAV %d blocked at t=%.3f; retrying in %.2f s",
                result.cav_id, result.time, self.scenario.stall_delay,
            )
            self.world.postpone(result.cav_id, self.scenario.stall_delay)

    def _reject(self, trip: TripRequest, reason: str) -> None:
        logger.warning("Trip %d (%d -> %d) rejected: %s", trip.cav_id, trip.origin, trip.destination, reason)
        self.metrics.rejected.append(trip.cav_id)

    def start_trip(self, trip: TripRequest) -> RoutingResult | None:
        """Route a departing CAV and add it to the network, or reject the trip."""
        scenario = self.scenario
        self.world.advance_clock(trip.start_time)
        event_index = len(self.metrics.routing_events)

        if scenario.mode == "baseline":
            try:
                route = baseline_route(self.world, trip, kappa=scenario.kappa)
            except NoRouteError as e:
                self._reject(trip, str(e))
                return None
            self.world.spawn(trip, scenario.departure_speed)
            self.world.assign(trip.cav_id, route, min(2, scenario.routes_per_cav - 1))
            self.metrics.routing_events.append(RoutingEvent(
                event_index, len(self.world), 0, scenario.routes_per_cav ** len(self.world), trip.start_time,
            ))
            return None

        trial_world = self.world.clone()
        trial_world.spawn(trip, scenario.departure_speed)
        trial = trial_world.snapshot()
        try:
            route_sets = build_route_sets(trial, routes_per_cav=scenario.routes_per_cav, kappa=scenario.kappa)
        except NoRouteError as e:
            self._reject(trip, str(e))
            return None

        if scenario.mode == "oracle":
            result = solve_system_optimal(
                self.predictor, trial, route_sets, scenario.routes_per_cav, budget=scenario.oracle_budget,
            )
        else:
            existing = AssignmentMatrix.from_mapping(
                {cav_id: cav.route_index for cav_id, cav in self.world.cavs.items()},
                scenario.routes_per_cav,
            )
            result = route_new_cav(
                self.predictor, trial, trip, route_sets, existing, delayed_only=scenario.delayed_only,
            )

        n_cavs = len(trial)
        self.metrics.routing_events.append(RoutingEvent(
            event_index,
            n_cavs,
            result.evaluations,
            scenario.routes_per_cav ** n_cavs,
            trip.start_time,
            result.changes,
            result.total,
        ))
        if not result.accepted:
            self._reject(trip, result.rejected)
            return result

        self.world.spawn(trip, scenario.departure_speed)
        for cav_id, m in result.assignment.choices:
            self.world.assign(cav_id, route_sets[cav_id].routes[m], m)
        logger.info(
            "Trip %d routed at t=%.3f: N=%d, %d predictions, %d changes, predicted total %.3f",
            trip.cav_id, trip.start_time, n_cavs, result.evaluations, result.changes, result.total,
        )
        return result

    def audit(self, dt: float = 0.1) -> list[str]:
        """Dense-sampling safety re-check of every commit made so far."""
        issues = audit_commits(self.world.archive, self.scenario.safety, dt)
        self.metrics.audit_issues = issues
        for issue in issues:
            logger.error("Safety audit: %s", issue)
        return issues


def run(scenario: Scenario) -> Metrics:
    return Simulation(scenario).run()


# ── Comparison ───────────────────────────────────────────────────────────────

@dataclass(frozen=True)
class ComparisonRow:
    n: int
    total_a: float | None
    total_b: float | None

    @property
    def difference(self) -> float | None:
        if self.total_a is None or self.total_b is None:
            return None
        return self.total_a - self.total_b


@dataclass(frozen=True)
class ComparisonReport:
    """Two runs of one scenario, totalled over the trips both of them completed."""

    mode_a: str
    mode_b: str
    rows: tuple[ComparisonRow, ...]
    final_a: float
    final_b: float
    common_trips: int = 0
    rejected_a: tuple[int, ...] = ()
    rejected_b: tuple[int, ...] = ()
    events_a: tuple[RoutingEvent, ...] = ()
    events_b: tuple[RoutingEvent, ...] = ()

    @property
    def evaluations_a(self) -> int:
        return sum(event.evaluations for event in self.events_a)

    @property
    def evaluations_b(self) -> int:
        return sum(event.evaluations for event in self.events_b)

    @property
    def improvement_percent(self) -> float:
        """Relative reduction of run A's total against run B's."""
        if self.final_b == 0:
            return 0.0
        return (self.final_b - self.final_a) / self.final_b * 100.0

    def summary(self) -> str:
        lines = [f"trips completed by both runs: {self.common_trips}"]
        for label, mode, final, rejected, events in (
            ("A", self.mode_a, self.final_a, self.rejected_a, self.events_a),
            ("B", self.mode_b, self.final_b, self.rejected_b, self.events_b),
        ):
            evaluations = sum(event.evaluations for event in events)
            reference = sum(event.m_pow_n for event in events)
            lines.append(
                f"run {label} ({mode}): total travel time {final:.3f} s, {len(rejected)} rejected, "
                f"{evaluations} predictions vs {reference} for full enumeration"
            )
        lines.append(f"improvement of A over B: {self.improvement_percent:.2f}%")
        return "\n".join(lines)


def compare_runs(run_a: Metrics, run_b: Metrics) -> ComparisonReport:
    """Compare cumulative totals of two runs over the trips completed in both."""
    if run_a.fingerprint != run_b.fingerprint:
        raise ScenarioMismatchError(
            f"runs simulated different scenarios ({run_a.fingerprint[:12]} vs {run_b.fingerprint[:12]})"
        )
    common = run_a.travel.keys() & run_b.travel.keys()
    dropped = len(run_a.travel) + len(run_b.travel) - 2 * len(common)
    if dropped:
        logger.warning("Comparing over %d common trips; %d completed in only one run", len(common), dropped)
    totals_a = dict(run_a.cumulative_totals(common))
    totals_b = dict(run_b.cumulative_totals(common))
    rows = tuple(ComparisonRow(n, totals_a[n], totals_b[n]) for n in range(1, len(common) + 1))
    return ComparisonReport(
        mode_a=run_a.mode,
        mode_b=run_b.mode,
        rows=rows,
        final_a=rows[-1].total_a if rows else 0.0,
        final_b=rows[-1].total_b if rows else 0.0,
        common_trips=len(common),
        rejected_a=tuple(run_a.rejected),
        rejected_b=tuple(run_b.rejected),
        events_a=tuple(run_a.routing_events),
        events_b=tuple(run_b.routing_events),
    )
