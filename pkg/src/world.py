"""Traffic state shared by live execution and forward prediction.

The live simulation and every travel-time prediction advance a ``WorldState``
through the same ``advance`` step, so a prediction made from a snapshot
reproduces what execution does when no further trips arrive.
"""

import heapq
from dataclasses import dataclass, replace
from enum import Enum, IntEnum

from src.coordination import (
    CoordinationOutcome,
    EntryState,
    IntersectionLedger,
    LedgerEntry,
    SafetyParams,
    SearchParams,
    min_exit_time,
)
from src.network import EdgeId, IntersectionId, NetworkGraph, NodeId, Route
from src.trajectory import CubicTrajectory, MotionLimits


class EventKind(IntEnum):
    """Tie-break priority for events at the same instant."""

    COMPLETION = 0
    ARRIVAL = 1
    TRIP_START = 2


@dataclass(frozen=True, order=True)
class Event:
    time: float
    kind: EventKind
    cav_id: int


@dataclass(frozen=True)
class TripRequest:
    cav_id: int
    origin: NodeId
    destination: NodeId
    start_time: float

    def __post_init__(self) -> None:
        if self.origin == self.destination:
            raise ValueError(f"trip {self.cav_id}: origin and destination are the same node ({self.origin})")
        if self.start_time < 0:
            raise ValueError(f"trip {self.cav_id}: negative start time {self.start_time}")

    @property
    def event(self) -> Event:
        return Event(self.start_time, EventKind.TRIP_START, self.cav_id)


@dataclass(frozen=True)
class TrafficModel:
    graph: NetworkGraph
    limits: MotionLimits = MotionLimits()
    safety: SafetyParams = SafetyParams()
    search: SearchParams = SearchParams()


class TrafficStats:
    """Observed edge traversal times from live execution."""

    def __init__(self) -> None:
        self._totals: dict[EdgeId, float] = {}
        self._counts: dict[EdgeId, int] = {}

    def observe(self, edge_id: EdgeId, duration: float) -> None:
        self._totals[edge_id] = self._totals.get(edge_id, 0.0) + duration
        self._counts[edge_id] = self._counts.get(edge_id, 0) + 1

    def mean(self, edge_id: EdgeId) -> float | None:
        count = self._counts.get(edge_id)
        return self._totals[edge_id] / count if count else None

    def copy(self) -> "TrafficStats":
        clone = TrafficStats()
        clone._totals = dict(self._totals)
        clone._counts = dict(self._counts)
        return clone


@dataclass
class CavState:
    trip: TripRequest
    next_node: NodeId
    arrival_time: float
    arrival_speed: float
    route: Route = ()
    route_index: int = 0
    current_edge: EdgeId | None = None
    edge_entered_at: float = 0.0
    intersection: IntersectionId | None = None
    trajectory: CubicTrajectory | None = None

    @property
    def cav_id(self) -> int:
        return self.trip.cav_id

    @property
    def event(self) -> Event:
        kind = EventKind.COMPLETION if self.next_node == self.trip.destination else EventKind.ARRIVAL
        return Event(self.arrival_time, kind, self.cav_id)


class StepKind(Enum):
    ADVANCED = "advanced"
    COMPLETED = "completed"
    BLOCKED = "blocked"


@dataclass(frozen=True)
class StepResult:
    kind: StepKind
    cav_id: int
    time: float
    travel_time: float | None = None
    delay: float = 0.0
    outcome: CoordinationOutcome | None = None


class FrozenWorldError(RuntimeError):
    """Raised when a snapshot is mutated."""


class WorldState:
    """CAV states, intersection ledgers and the pending-event heap.

    ``record`` marks the live world: it feeds traffic statistics and keeps the
    archive of every ledger commit for auditing. Clones used for prediction
    share the statistics read-only and record nothing.
    """

    def __init__(
        self,
        model: TrafficModel,
        *,
        traffic_stats: TrafficStats | None = None,
        record: bool = False,
        verify: bool | None = None,
    ) -> None:
        self.model = model
        self.clock = 0.0
        self.cavs: dict[int, CavState] = {}
        self.ledgers = {iid: IntersectionLedger(iid, verify=verify) for iid in model.graph.intersections}
        self.traffic_stats = traffic_stats if traffic_stats is not None else TrafficStats()
        self.record = record
        self.frozen = False
        self.archive: list[LedgerEntry] = []
        self._events: list[Event] = []

    def __len__(self) -> int:
        return len(self.cavs)

    def _ensure_mutable(self) -> None:
        if self.frozen:
            raise FrozenWorldError("world snapshot is read-only; clone it first")

    def clone(self) -> "WorldState":
        other = WorldState.__new__(WorldState)
        other.model = self.model
        other.clock = self.clock
        other.cavs = {cav_id: replace(cav) for cav_id, cav in self.cavs.items()}
        other.ledgers = {iid: ledger.copy() for iid, ledger in self.ledgers.items()}
        other.traffic_stats = self.traffic_stats
        other.record = False
        other.frozen = False
        other.archive = []
        other._events = list(self._events)
        return other

    def snapshot(self) -> "WorldState":
        frozen = self.clone()
        frozen.traffic_stats = self.traffic_stats.copy()
        frozen.frozen = True
        return frozen

    def signature(self) -> tuple:
        """Comparable summary of the dynamic state."""
        return (
            self.clock,
            tuple((cav_id, replace(cav)) for cav_id, cav in sorted(self.cavs.items())),
            tuple((iid, tuple(e.cav_id for e in ledger.entries)) for iid, ledger in sorted(self.ledgers.items())),
            tuple(sorted(self._events)),
        )

    # ── Mutation ─────────────────────────────────────────────────────────────

    def advance_clock(self, t: float) -> None:
        self._ensure_mutable()
        self.clock = max(self.clock, t)

    def spawn(self, trip: TripRequest, speed: float) -> CavState:
        """Place a new CAV at its origin; its first arrival event fires at the trip start."""
        self._ensure_mutable()
        if trip.cav_id in self.cavs:
            raise ValueError(f"CAV {trip.cav_id} is already in the network")
        cav = CavState(trip=trip, next_node=trip.origin, arrival_time=trip.start_time, arrival_speed=speed)
        self.cavs[trip.cav_id] = cav
        heapq.heappush(self._events, cav.event)
        return cav

    def assign(self, cav_id: int, route: Route, index: int) -> None:
        """Replace the remaining route of a CAV; it takes effect at its next node."""
        self._ensure_mutable()
        cav = self.cavs[cav_id]
        if route and self.model.graph.edges[route[0]].tail != cav.next_node:
            raise ValueError(f"route for CAV {cav_id} does not start at its next node {cav.next_node}")
        cav.route = tuple(route)
        cav.route_index = index

    def postpone(self, cav_id: int, delay: float) -> None:
        """Re-queue a blocked CAV's arrival ``delay`` seconds later."""
        self._ensure_mutable()
        cav = self.cavs[cav_id]
        cav.arrival_time += delay
        heapq.heappush(self._events, cav.event)

    def peek(self) -> Event | None:
        return self._events[0] if self._events else None

    def occupancy(self) -> dict[EdgeId, int]:
        counts: dict[EdgeId, int] = {}
        for cav in self.cavs.values():
            if cav.current_edge is not None:
                counts[cav.current_edge] = counts.get(cav.current_edge, 0) + 1
        return counts

    def advance(self) -> StepResult:
        """Process the earliest pending event: finish the trip or plan the next edge.

        A CAV whose intersection has no safe exit time is returned as BLOCKED
        with its event consumed and nothing else changed.
        """
        self._ensure_mutable()
        event = heapq.heappop(self._events)
        cav = self.cavs[event.cav_id]
        now = event.time
        self.clock = max(self.clock, now)
        graph = self.model.graph

        if cav.next_node == cav.trip.destination:
            self._leave_edge(cav, now)
            del self.cavs[cav.cav_id]
            return StepResult(StepKind.COMPLETED, cav.cav_id, now, travel_time=now - cav.trip.start_time)

        if not cav.route:
            raise RuntimeError(f"CAV {cav.cav_id} has no route from node {cav.next_node}")
        edge = graph.edges[cav.route[0]]
        path = graph.path(edge.id)

        outcome = None
        delay = 0.0
        if path is None:
            self._leave_edge(cav, now)
            exit_time = now + edge.length / cav.arrival_speed
            exit_speed = cav.arrival_speed
        else:
            ledger = self.ledgers[path.intersection_id]
            outcome = min_exit_time(
                EntryState(cav.cav_id, now, cav.arrival_speed),
                path,
                ledger,
                self.model.safety,
                self.model.limits,
                self.model.search,
            )
            if not outcome.feasible:
                return StepResult(StepKind.BLOCKED, cav.cav_id, now, outcome=outcome)
            self._leave_edge(cav, now)
            committed = ledger.commit(cav.cav_id, path, outcome, self.model.safety)
            if self.record:
                self.archive.append(committed)
            exit_time = outcome.exit_time
            exit_speed = outcome.trajectory.exit_speed
            delay = outcome.delay
            cav.intersection = path.intersection_id
            cav.trajectory = outcome.trajectory

        cav.current_edge = edge.id
        cav.edge_entered_at = now
        cav.route = cav.route[1:]
        cav.next_node = edge.head
        cav.arrival_time = exit_time
        cav.arrival_speed = exit_speed
        heapq.heappush(self._events, cav.event)
        return StepResult(StepKind.ADVANCED, cav.cav_id, now, delay=delay, outcome=outcome)

    def _leave_edge(self, cav: CavState, now: float) -> None:
        if cav.current_edge is not None and self.record:
            self.traffic_stats.observe(cav.current_edge, now - cav.edge_entered_at)
        if cav.intersection is not None:
            self.ledgers[cav.intersection].release(cav.cav_id)
            cav.intersection = None
            cav.trajectory = None
        cav.current_edge = None
