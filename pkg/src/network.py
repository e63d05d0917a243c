"""Road network: grid builder, intersection geometry, conflict points and shortest-time paths.

A grid intersection is a square box with single-lane directional roads and
right-hand traffic. Every internal path starts at an entry node placed
``control_length`` upstream of the box (the coordinator's control zone) and ends
on the box boundary at an exit node. Conflict points are found geometrically by
intersecting the internal-path polylines: interior crossings plus the merge
point where paths share an exit node.
"""

import itertools
import logging
import math
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from enum import IntEnum
from functools import cached_property
from pathlib import Path
from typing import Literal

import networkx as nx
import numpy as np
from pydantic import BaseModel, ConfigDict
from shapely.geometry import LineString, Point

logger = logging.getLogger(__name__)

NodeId = int
EdgeId = int
IntersectionId = int
ConflictPointId = int
Route = tuple[EdgeId, ...]

POSITION_TOLERANCE = 1e-6
_COST_TOLERANCE = 1e-9


class NoRouteError(RuntimeError):
    """Raised when no path connects an origin to a destination."""


class Side(IntEnum):
    NORTH = 0
    EAST = 1
    SOUTH = 2
    WEST = 3

    @property
    def normal(self) -> tuple[float, float]:
        """Outward unit normal of this side of the box."""
        return _NORMALS[self]

    @property
    def opposite(self) -> "Side":
        return Side((self + 2) % 4)


_NORMALS: dict[Side, tuple[float, float]] = {
    Side.NORTH: (0.0, 1.0),
    Side.EAST: (1.0, 0.0),
    Side.SOUTH: (0.0, -1.0),
    Side.WEST: (-1.0, 0.0),
}
_SIDE_BY_NORMAL = {normal: side for side, normal in _NORMALS.items()}


@dataclass(frozen=True)
class Node:
    id: NodeId
    x: float
    y: float


@dataclass(frozen=True)
class Edge:
    id: EdgeId
    tail: NodeId
    head: NodeId
    length: float
    kind: Literal["internal", "link", "stub"] = "link"
    intersection: IntersectionId | None = None


@dataclass(frozen=True)
class PathDescriptor:
    """One maneuver through an intersection, from an entry node to an exit node.

    ``conflicts`` holds (conflict point id, arc length) pairs sorted by arc length.
    Crossings lie strictly inside the path; a merge with paths leaving by the
    same exit node sits at ``length``.
    ``approach_length`` is the straight prefix shared with every other path
    leaving the same entry node.
    """

    edge_id: EdgeId
    intersection_id: IntersectionId
    entry: NodeId
    exit: NodeId
    polyline: tuple[tuple[float, float], ...]
    length: float
    approach_length: float
    conflicts: tuple[tuple[ConflictPointId, float], ...] = ()

    @cached_property
    def line(self) -> LineString:
        return LineString(self.polyline)

    def conflict_position(self, conflict_id: ConflictPointId) -> float:
        for cid, arc in self.conflicts:
            if cid == conflict_id:
                return arc
        raise KeyError(f"conflict point {conflict_id} is not on path {self.edge_id}")

    def point_at(self, arc_length: float) -> tuple[float, float]:
        point = self.line.interpolate(arc_length)
        return (point.x, point.y)


@dataclass(frozen=True)
class ConflictPoint:
    id: ConflictPointId
    x: float
    y: float
    memberships: tuple[tuple[EdgeId, float], ...]


@dataclass(frozen=True)
class IntersectionGeometry:
    id: IntersectionId
    center: tuple[float, float]
    entry_nodes: tuple[NodeId, ...]
    exit_nodes: tuple[NodeId, ...]
    paths: tuple[PathDescriptor, ...]
    conflict_points: tuple[ConflictPoint, ...]

    def path_between(self, entry: NodeId, exit: NodeId) -> PathDescriptor:
        for path in self.paths:
            if path.entry == entry and path.exit == exit:
                return path
        raise KeyError(f"intersection {self.id} has no path from node {entry} to node {exit}")


@dataclass(frozen=True)
class GridGeometry:
    block_length: float = 200.0
    box_size: float = 20.0
    control_length: float = 80.0
    stub_length: float = 50.0
    lane_offset: float | None = None
    arc_points: int = 24

    def __post_init__(self) -> None:
        for name in ("block_length", "box_size", "control_length", "stub_length"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        if self.lane_offset is not None and not 0 < self.lane_offset < self.box_size / 2:
            raise ValueError(
                f"lane_offset must lie in (0, box_size/2), got {self.lane_offset}"
            )
        if self.arc_points < 3:
            raise ValueError(f"arc_points must be at least 3, got {self.arc_points}")
        if self.link_length <= 0:
            raise ValueError(
                "block_length must exceed box_size + control_length "
                f"({self.block_length} <= {self.box_size} + {self.control_length})"
            )

    @property
    def offset(self) -> float:
        return self.lane_offset if self.lane_offset is not None else self.box_size / 4

    @property
    def link_length(self) -> float:
        return self.block_length - self.box_size - self.control_length


class NetworkGraph:
    """Directed road graph with per-intersection geometry. Immutable after construction."""

    def __init__(
        self,
        nodes: Iterable[Node],
        edges: Iterable[Edge],
        intersections: Iterable[IntersectionGeometry] = (),
    ) -> None:
        self.nodes: dict[NodeId, Node] = {}
        for node in nodes:
            if node.id in self.nodes:
                raise ValueError(f"duplicate node id {node.id}")
            self.nodes[node.id] = node

        self.edges: dict[EdgeId, Edge] = {}
        pairs: set[tuple[NodeId, NodeId]] = set()
        for edge in edges:
            if edge.id in self.edges:
                raise ValueError(f"duplicate edge id {edge.id}")
            if edge.tail not in self.nodes or edge.head not in self.nodes:
                raise ValueError(f"edge {edge.id} references an unknown node")
            if not edge.length > 0:
                raise ValueError(f"edge {edge.id} has non-positive length {edge.length}")
            if (edge.tail, edge.head) in pairs:
                raise ValueError(f"parallel edge {edge.id} between {edge.tail} and {edge.head}")
            pairs.add((edge.tail, edge.head))
            self.edges[edge.id] = edge

        self.intersections: dict[IntersectionId, IntersectionGeometry] = {}
        for geometry in intersections:
            if geometry.id in self.intersections:
                raise ValueError(f"duplicate intersection id {geometry.id}")
            for node_id in (*geometry.entry_nodes, *geometry.exit_nodes):
                if node_id not in self.nodes:
                    raise ValueError(f"intersection {geometry.id} references unknown node {node_id}")
            for path in geometry.paths:
                edge = self.edges.get(path.edge_id)
                if edge is None or (edge.tail, edge.head) != (path.entry, path.exit):
                    raise ValueError(
                        f"intersection {geometry.id}: path {path.edge_id} has no matching edge"
                    )
            self.intersections[geometry.id] = geometry

        self._reachable: dict[NodeId, frozenset[NodeId]] = {}

    @cached_property
    def digraph(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(self.nodes)
        for edge in self.edges.values():
            graph.add_edge(edge.tail, edge.head, edge_id=edge.id, length=edge.length)
        return graph

    @cached_property
    def paths_by_edge(self) -> dict[EdgeId, PathDescriptor]:
        return {
            path.edge_id: path
            for geometry in self.intersections.values()
            for path in geometry.paths
        }

    @cached_property
    def _out_edges(self) -> dict[NodeId, tuple[EdgeId, ...]]:
        out: dict[NodeId, list[EdgeId]] = {node_id: [] for node_id in self.nodes}
        for edge in self.edges.values():
            out[edge.tail].append(edge.id)
        return {node_id: tuple(sorted(ids)) for node_id, ids in out.items()}

    def path(self, edge_id: EdgeId) -> PathDescriptor | None:
        """Internal path carried by ``edge_id``, or None for link and stub edges."""
        return self.paths_by_edge.get(edge_id)

    def out_edges(self, node_id: NodeId) -> tuple[EdgeId, ...]:
        return self._out_edges[node_id]

    def has_route(self, origin: NodeId, destination: NodeId) -> bool:
        if origin not in self._reachable:
            self._reachable[origin] = frozenset(nx.descendants(self.digraph, origin))
        return destination in self._reachable[origin]

    def counts(self) -> dict[str, int]:
        return {
            "intersections": len(self.intersections),
            "nodes": len(self.nodes),
            "edges": len(self.edges),
            "internal_paths": len(self.paths_by_edge),
            "conflict_points": sum(len(g.conflict_points) for g in self.intersections.values()),
        }


# ── Grid construction ────────────────────────────────────────────────────────

def _right_of(heading: tuple[float, float]) -> tuple[float, float]:
    return (heading[1], -heading[0])


def _add(p: tuple[float, float], v: tuple[float, float], scale: float = 1.0) -> tuple[float, float]:
    return (p[0] + scale * v[0], p[1] + scale * v[1])


def _boundary_point(center: tuple[float, float], side: Side, half: float, offset: float, inbound: bool) -> tuple[float, float]:
    """Lane centerline point where the lane crosses ``side`` of the box."""
    normal = side.normal
    heading = (-normal[0], -normal[1]) if inbound else normal
    return _add(_add(center, normal, half), _right_of(heading), offset)


def _maneuver(
    center: tuple[float, float],
    entry_side: Side,
    maneuver: str,
    geometry: GridGeometry,
) -> tuple[Side, list[tuple[float, float]]]:
    """Exit side and polyline (entry node first) of one maneuver."""
    half = geometry.box_size / 2
    offset = geometry.offset
    heading = (-entry_side.normal[0], -entry_side.normal[1])
    right = _right_of(heading)
    box_entry = _boundary_point(center, entry_side, half, offset, inbound=True)
    entry_node = _add(box_entry, entry_side.normal, geometry.control_length)

    if maneuver == "straight":
        exit_side = _SIDE_BY_NORMAL[heading]
        box_exit = _boundary_point(center, exit_side, half, offset, inbound=False)
        return exit_side, [entry_node, box_entry, box_exit]

    if maneuver == "right":
        exit_side = _SIDE_BY_NORMAL[right]
        radius = half - offset
        pivot = _add(box_entry, right, radius)
        sweep = -math.pi / 2
    else:
        exit_side = _SIDE_BY_NORMAL[(-right[0], -right[1])]
        radius = half + offset
        pivot = _add(box_entry, right, -radius)
        sweep = math.pi / 2

    box_exit = _boundary_point(center, exit_side, half, offset, inbound=False)
    start = math.atan2(box_entry[1] - pivot[1], box_entry[0] - pivot[0])
    angles = np.linspace(start, start + sweep, geometry.arc_points)
    arc = [(pivot[0] + radius * math.cos(a), pivot[1] + radius * math.sin(a)) for a in angles]
    arc[0] = box_entry
    arc[-1] = box_exit
    return exit_side, [entry_node, *arc]


def _crossing_points(geometry) -> list[Point]:
    parts = getattr(geometry, "geoms", [geometry])
    return [part for part in parts if part.geom_type == "Point"]


def _find_conflicts(
    paths: list[PathDescriptor], first_id: ConflictPointId
) -> tuple[list[ConflictPoint], dict[EdgeId, list[tuple[ConflictPointId, float]]]]:
    found: list[tuple[float, float, dict[EdgeId, float]]] = []
    for a, b in itertools.combinations(paths, 2):
        for point in _crossing_points(a.line.intersection(b.line)):
            arc_a = a.line.project(point)
            arc_b = b.line.project(point)
            merging = a.exit == b.exit and (
                arc_a >= a.length - POSITION_TOLERANCE and arc_b >= b.length - POSITION_TOLERANCE
            )
            if merging:
                arc_a, arc_b = a.length, b.length
            elif not (
                POSITION_TOLERANCE < arc_a < a.length - POSITION_TOLERANCE
                and POSITION_TOLERANCE < arc_b < b.length - POSITION_TOLERANCE
            ):
                # Shared approach lanes are handled as rear-end pairs.
                continue
            for x, y, members in found:
                if math.hypot(x - point.x, y - point.y) <= POSITION_TOLERANCE:
                    members.setdefault(a.edge_id, arc_a)
                    members.setdefault(b.edge_id, arc_b)
                    break
            else:
                found.append((point.x, point.y, {a.edge_id: arc_a, b.edge_id: arc_b}))

    points: list[ConflictPoint] = []
    per_path: dict[EdgeId, list[tuple[ConflictPointId, float]]] = {p.edge_id: [] for p in paths}
    for offset, (x, y, members) in enumerate(found):
        cid = first_id + offset
        memberships = tuple(sorted(members.items()))
        points.append(ConflictPoint(cid, x, y, memberships))
        for edge_id, arc in memberships:
            per_path[edge_id].append((cid, arc))
    return points, per_path


def build_grid_network(rows: int, cols: int, geometry: GridGeometry | None = None) -> NetworkGraph:
    """Build a rows×cols grid of signal-free intersections.

    Node ids: per intersection (row-major) four entry nodes then four exit nodes,
    both ordered by ``Side``; gate nodes for the boundary follow. Edge ids:
    internal paths, then links between neighbours, then boundary stubs.
    """
    if rows < 1 or cols < 1:
        raise ValueError(f"grid dimensions must be positive, got {rows}x{cols}")
    geometry = geometry or GridGeometry()
    half = geometry.box_size / 2
    block = geometry.block_length

    node_ids = itertools.count()
    edge_ids = itertools.count()
    nodes: list[Node] = []
    edges: list[Edge] = []
    entry: dict[tuple[int, int, Side], NodeId] = {}
    exit_: dict[tuple[int, int, Side], NodeId] = {}

    def center_of(r: int, c: int) -> tuple[float, float]:
        return (c * block, r * block)

    for r, c in itertools.product(range(rows), range(cols)):
        center = center_of(r, c)
        for side in Side:
            box_entry = _boundary_point(center, side, half, geometry.offset, inbound=True)
            x, y = _add(box_entry, side.normal, geometry.control_length)
            node = Node(next(node_ids), x, y)
            nodes.append(node)
            entry[(r, c, side)] = node.id
        for side in Side:
            x, y = _boundary_point(center, side, half, geometry.offset, inbound=False)
            node = Node(next(node_ids), x, y)
            nodes.append(node)
            exit_[(r, c, side)] = node.id

    intersections: list[IntersectionGeometry] = []
    next_conflict = 0
    for r, c in itertools.product(range(rows), range(cols)):
        iid = r * cols + c
        center = center_of(r, c)
        raw: list[PathDescriptor] = []
        for side in Side:
            for maneuver in ("right", "straight", "left"):
                exit_side, polyline = _maneuver(center, side, maneuver, geometry)
                eid = next(edge_ids)
                length = LineString(polyline).length
                raw.append(PathDescriptor(
                    edge_id=eid,
                    intersection_id=iid,
                    entry=entry[(r, c, side)],
                    exit=exit_[(r, c, exit_side)],
                    polyline=tuple(polyline),
                    length=length,
                    approach_length=geometry.control_length,
                ))
                edges.append(Edge(eid, entry[(r, c, side)], exit_[(r, c, exit_side)], length, "internal", iid))

        points, per_path = _find_conflicts(raw, next_conflict)
        next_conflict += len(points)
        paths = tuple(
            PathDescriptor(
                edge_id=p.edge_id,
                intersection_id=p.intersection_id,
                entry=p.entry,
                exit=p.exit,
                polyline=p.polyline,
                length=p.length,
                approach_length=p.approach_length,
                conflicts=tuple(sorted(per_path[p.edge_id], key=lambda item: item[1])),
            )
            for p in raw
        )
        intersections.append(IntersectionGeometry(
            id=iid,
            center=center,
            entry_nodes=tuple(entry[(r, c, side)] for side in Side),
            exit_nodes=tuple(exit_[(r, c, side)] for side in Side),
            paths=paths,
            conflict_points=tuple(points),
        ))

    node_by_id = {node.id: node for node in nodes}

    def distance(a: NodeId, b: NodeId) -> float:
        return math.hypot(node_by_id[a].x - node_by_id[b].x, node_by_id[a].y - node_by_id[b].y)

    for r, c in itertools.product(range(rows), range(cols)):
        for side, (dr, dc) in ((Side.NORTH, (1, 0)), (Side.EAST, (0, 1))):
            nr, nc = r + dr, c + dc
            if nr >= rows or nc >= cols:
                continue
            for (ar, ac, a_side), (br, bc, b_side) in (
                ((r, c, side), (nr, nc, side.opposite)),
                ((nr, nc, side.opposite), (r, c, side)),
            ):
                tail, head = exit_[(ar, ac, a_side)], entry[(br, bc, b_side)]
                edges.append(Edge(next(edge_ids), tail, head, distance(tail, head), "link"))

    for r, c in itertools.product(range(rows), range(cols)):
        boundary = {
            Side.NORTH: r == rows - 1,
            Side.EAST: c == cols - 1,
            Side.SOUTH: r == 0,
            Side.WEST: c == 0,
        }
        for side in Side:
            if not boundary[side]:
                continue
            reach = half + geometry.control_length + geometry.stub_length
            x, y = _add(center_of(r, c), side.normal, reach)
            gate = Node(next(node_ids), x, y)
            nodes.append(gate)
            node_by_id[gate.id] = gate
            inbound, outbound = entry[(r, c, side)], exit_[(r, c, side)]
            edges.append(Edge(next(edge_ids), gate.id, inbound, distance(gate.id, inbound), "stub"))
            edges.append(Edge(next(edge_ids), outbound, gate.id, distance(outbound, gate.id), "stub"))

    graph = NetworkGraph(nodes, edges, intersections)
    logger.debug("Built %dx%d grid: %s", rows, cols, graph.counts())
    return graph


# ── Shortest-time paths ──────────────────────────────────────────────────────

def shortest_time_path(
    graph: NetworkGraph,
    origin: NodeId,
    destination: NodeId,
    edge_cost: Mapping[EdgeId, float],
) -> Route:
    """Minimum-cost edge sequence from origin to destination.

    Among equal-cost paths the lexicographically smallest edge-id sequence wins:
    distances to the destination come from a reverse Dijkstra, then the walk
    from the origin always takes the smallest edge id that stays on a shortest path.
    """
    if origin not in graph.nodes or destination not in graph.nodes:
        raise ValueError(f"unknown node in route request {origin} -> {destination}")
    if origin == destination:
        raise ValueError(f"origin and destination are the same node ({origin})")
    bad = [eid for eid in graph.edges if not edge_cost[eid] > 0]
    if bad:
        raise ValueError(f"edge costs must be positive (edges {bad[:5]})")

    remaining = nx.single_source_dijkstra_path_length(
        graph.digraph.reverse(copy=False),
        destination,
        weight=lambda u, v, data: edge_cost[data["edge_id"]],
    )
    if origin not in remaining:
        raise NoRouteError(f"node {destination} is unreachable from node {origin}")

    route: list[EdgeId] = []
    node = origin
    while node != destination:
        for eid in graph.out_edges(node):
            head = graph.edges[eid].head
            if head not in remaining:
                continue
            if math.isclose(
                edge_cost[eid] + remaining[head],
                remaining[node],
                rel_tol=_COST_TOLERANCE,
                abs_tol=_COST_TOLERANCE,
            ):
                route.append(eid)
                node = head
                break
        else:
            raise RuntimeError(f"shortest-path walk stalled at node {node}")
    return tuple(route)


def route_cost(route: Iterable[EdgeId], edge_cost: Mapping[EdgeId, float]) -> float:
    return sum(edge_cost[eid] for eid in route)


# ── JSON persistence ─────────────────────────────────────────────────────────

class _Document(BaseModel):
    model_config = ConfigDict(extra="forbid")


class _NodeDoc(_Document):
    id: int
    x: float
    y: float


class _EdgeDoc(_Document):
    id: int
    tail: int
    head: int
    length: float
    kind: Literal["internal", "link", "stub"]
    intersection: int | None = None


class _PathDoc(_Document):
    edge_id: int
    entry: int
    exit: int
    polyline: list[tuple[float, float]]
    length: float
    approach_length: float
    conflicts: list[tuple[int, float]]


class _ConflictDoc(_Document):
    id: int
    x: float
    y: float
    memberships: list[tuple[int, float]]


class _IntersectionDoc(_Document):
    id: int
    center: tuple[float, float]
    entry_nodes: list[int]
    exit_nodes: list[int]
    paths: list[_PathDoc]
    conflict_points: list[_ConflictDoc]


class NetworkDocument(_Document):
    nodes: list[_NodeDoc]
    edges: list[_EdgeDoc]
    intersections: list[_IntersectionDoc]

    @classmethod
    def from_graph(cls, graph: NetworkGraph) -> "NetworkDocument":
        return cls(
            nodes=[_NodeDoc(id=n.id, x=n.x, y=n.y) for n in graph.nodes.values()],
            edges=[
                _EdgeDoc(id=e.id, tail=e.tail, head=e.head, length=e.length, kind=e.kind, intersection=e.intersection)
                for e in graph.edges.values()
            ],
            intersections=[
                _IntersectionDoc(
                    id=g.id,
                    center=g.center,
                    entry_nodes=list(g.entry_nodes),
                    exit_nodes=list(g.exit_nodes),
                    paths=[
                        _PathDoc(
                            edge_id=p.edge_id,
                            entry=p.entry,
                            exit=p.exit,
                            polyline=list(p.polyline),
                            length=p.length,
                            approach_length=p.approach_length,
                            conflicts=list(p.conflicts),
                        )
                        for p in g.paths
                    ],
                    conflict_points=[
                        _ConflictDoc(id=cp.id, x=cp.x, y=cp.y, memberships=list(cp.memberships))
                        for cp in g.conflict_points
                    ],
                )
                for g in graph.intersections.values()
            ],
        )

    def to_graph(self) -> NetworkGraph:
        intersections = [
            IntersectionGeometry(
                id=g.id,
                center=tuple(g.center),
                entry_nodes=tuple(g.entry_nodes),
                exit_nodes=tuple(g.exit_nodes),
                paths=tuple(
                    PathDescriptor(
                        edge_id=p.edge_id,
                        intersection_id=g.id,
                        entry=p.entry,
                        exit=p.exit,
                        polyline=tuple(tuple(pt) for pt in p.polyline),
                        length=p.length,
                        approach_length=p.approach_length,
                        conflicts=tuple(tuple(c) for c in p.conflicts),
                    )
                    for p in g.paths
                ),
                conflict_points=tuple(
                    ConflictPoint(cp.id, cp.x, cp.y, tuple(tuple(m) for m in cp.memberships))
                    for cp in g.conflict_points
                ),
            )
            for g in self.intersections
        ]
        return NetworkGraph(
            (Node(n.id, n.x, n.y) for n in self.nodes),
            (Edge(e.id, e.tail, e.head, e.length, e.kind, e.intersection) for e in self.edges),
            intersections,
        )


def save_network(graph: NetworkGraph, path: str | Path) -> None:
    Path(path).write_text(NetworkDocument.from_graph(graph).model_dump_json(indent=2) + "\n")
    logger.info("Saved network (%s) to %s", graph.counts(), path)


def load_network(path: str | Path) -> NetworkGraph:
    """Load a network written by ``save_network``. Raises ValueError on malformed files."""
    text = Path(path).read_text()
    try:
        document = NetworkDocument.model_validate_json(text)
    except ValueError as e:
        raise ValueError(f"{path}: invalid network file: {e}") from e
    return document.to_graph()
