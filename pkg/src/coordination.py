"""Per-intersection coordination: safety constraints, minimum exit time and the FIFO ledger.

Each CAV entering an intersection control zone is assigned the earliest exit
time whose boundary cubic respects the motion limits, keeps a speed-dependent
gap to the CAV ahead on the same lane and clears every conflict point it
shares with a CAV already committed to the intersection.
"""

import logging
import math
from collections.abc import Iterable
from dataclasses import dataclass

import numpy as np

from src.config import settings
from src.network import ConflictPointId, EdgeId, IntersectionId, PathDescriptor
from src.trajectory import (
    CubicTrajectory,
    EmptyWindowError,
    FeasibleExitWindow,
    MotionLimits,
    WindowShapeError,
    feasible_exit_window,
    fit_boundary_trajectory,
    respects_limits,
    time_at_position,
)

logger = logging.getLogger(__name__)

SAFETY_TOLERANCE = 1e-9
AUDIT_TOLERANCE = 1e-6


class SafetyViolationError(RuntimeError):
    """Raised when a committed trajectory breaks a safety constraint against the ledger."""


@dataclass(frozen=True)
class SafetyParams:
    """Gap δ(v) = rho + phi·v between consecutive CAVs."""

    rho: float = 2.0
    phi: float = 0.5

    def __post_init__(self) -> None:
        if not self.rho > 0:
            raise ValueError(f"rho must be positive, got {self.rho}")
        if self.phi < 0:
            raise ValueError(f"phi must be non-negative, got {self.phi}")

    def gap(self, v: float) -> float:
        return self.rho + self.phi * v


@dataclass(frozen=True)
class SearchParams:
    step: float = 0.05
    tolerance: float = 1e-4

    def __post_init__(self) -> None:
        if not self.step > 0 or not self.tolerance > 0:
            raise ValueError(f"search step and tolerance must be positive, got {self.step}, {self.tolerance}")


@dataclass(frozen=True)
class EntryState:
    cav_id: int
    t0: float
    v0: float


@dataclass(frozen=True)
class CrossingRecord:
    cav_id: int
    conflict_id: ConflictPointId
    t_c: float
    p_c: float


@dataclass(frozen=True)
class CoordinationOutcome:
    trajectory: CubicTrajectory | None
    exit_time: float
    crossings: tuple[CrossingRecord, ...]
    feasible: bool
    window: FeasibleExitWindow | None = None

    @property
    def delay(self) -> float:
        """Exit time minus the unconstrained earliest exit time."""
        if not self.feasible or self.window is None:
            return math.inf
        return self.exit_time - self.window.t_lo

    @classmethod
    def infeasible(cls, window: FeasibleExitWindow | None = None) -> "CoordinationOutcome":
        return cls(None, math.inf, (), False, window)


@dataclass(frozen=True, eq=False)
class LedgerEntry:
    """A committed crossing. ``peers`` are the entries present at commit time."""

    cav_id: int
    path: PathDescriptor
    trajectory: CubicTrajectory
    crossings: tuple[CrossingRecord, ...]
    peers: tuple["LedgerEntry", ...] = ()


# ── Closed-form extrema ──────────────────────────────────────────────────────

def _extreme(poly: np.poly1d, lo: float, hi: float, largest: bool) -> float:
    """Max (or min) of ``poly`` over [lo, hi] from endpoints and stationary points."""
    if hi < lo:
        return -math.inf if largest else math.inf
    candidates = [lo, hi]
    if poly.order >= 2:
        for root in poly.deriv().roots:
            if abs(root.imag) < 1e-12 and lo < root.real < hi:
                candidates.append(root.real)
    values = poly(np.array(candidates, dtype=float))
    return float(values.max() if largest else values.min())


def _local_poly(traj: CubicTrajectory) -> np.poly1d:
    return np.poly1d([traj.a, traj.b, traj.c, traj.d])


def _reach_margin(traj: CubicTrajectory, params: SafetyParams, p_c: float, lo: float, hi: float) -> float:
    """max of δ(v) + p − p_c over [lo, hi] ∩ [t0, ∞), extending past tf at exit speed."""
    lo = max(lo, traj.t0)
    if hi < lo:
        return -math.inf
    best = -math.inf
    if lo <= traj.tf:
        poly = _local_poly(traj)
        reach = poly + params.phi * poly.deriv() + (params.rho - p_c)
        best = _extreme(reach, lo - traj.t0, min(hi, traj.tf) - traj.t0, largest=True)
    if hi > traj.tf:
        v_f = traj.exit_speed
        best = max(best, params.gap(v_f) + traj.pf + v_f * (hi - traj.tf) - p_c)
    return best


def rear_end_margin(
    follower: CubicTrajectory,
    leader: CubicTrajectory,
    params: SafetyParams,
    *,
    shared_length: float | None = None,
) -> float:
    """Smallest p_leader − p_follower − δ(v_follower) while both occupy the shared lane.

    Without ``shared_length`` the window is the follower's whole crossing and
    the leader is extended at its exit speed once it has left. With it, the
    window ends when either CAV passes ``shared_length``.
    """
    start = max(follower.t0, leader.t0)
    end = follower.tf
    if shared_length is not None:
        end = min(
            time_at_position(follower, min(shared_length, follower.pf)),
            time_at_position(leader, min(shared_length, leader.pf)),
        )
    if end < start:
        return math.inf

    own = _local_poly(follower)
    own = own + params.phi * own.deriv() + params.rho
    lo, hi = start - follower.t0, end - follower.t0
    worst = math.inf

    cubic_end = min(end, leader.tf)
    if start <= cubic_end:
        ahead = _local_poly(leader)(np.poly1d([1.0, follower.t0 - leader.t0]))
        worst = _extreme(ahead - own, lo, cubic_end - follower.t0, largest=False)
    if end > leader.tf:
        v_f = leader.exit_speed
        ahead = np.poly1d([v_f, leader.pf + v_f * (follower.t0 - leader.tf)])
        worst = min(worst, _extreme(ahead - own, max(start, leader.tf) - follower.t0, hi, largest=False))
    return worst


def rear_end_ok(
    follower: CubicTrajectory,
    leader: CubicTrajectory,
    params: SafetyParams,
    *,
    shared_length: float | None = None,
) -> bool:
    return rear_end_margin(follower, leader, params, shared_length=shared_length) >= -SAFETY_TOLERANCE


def lateral_margin(
    traj_i: CubicTrajectory,
    p_i_c: float,
    traj_k: CubicTrajectory,
    p_k_c: float,
    params: SafetyParams,
    *,
    t_i_c: float | None = None,
    t_k_c: float | None = None,
) -> float:
    """Non-positive when one CAV has cleared the conflict point before the other reaches it.

    The first term covers i arriving after k (i stays back until k crosses),
    the second covers k arriving after i.
    """
    if t_i_c is None:
        t_i_c = time_at_position(traj_i, p_i_c)
    if t_k_c is None:
        t_k_c = time_at_position(traj_k, p_k_c)
    i_after = _reach_margin(traj_i, params, p_i_c, traj_i.t0, t_k_c)
    k_after = _reach_margin(traj_k, params, p_k_c, traj_k.t0, t_i_c)
    return min(i_after, k_after)


def lateral_ok(
    traj_i: CubicTrajectory,
    p_i_c: float,
    traj_k: CubicTrajectory,
    p_k_c: float,
    params: SafetyParams,
    **crossing_times: float,
) -> bool:
    return lateral_margin(traj_i, p_i_c, traj_k, p_k_c, params, **crossing_times) <= SAFETY_TOLERANCE


# ── Ledger ───────────────────────────────────────────────────────────────────

class IntersectionLedger:
    """CAVs currently committed to one intersection, in commit (FIFO) order."""

    def __init__(self, intersection_id: IntersectionId, *, verify: bool | None = None) -> None:
        self.intersection_id = intersection_id
        self.verify = settings.verify_commits if verify is None else verify
        self._entries: dict[int, LedgerEntry] = {}

    def __len__(self) -> int:
        return len(self._entries)

    def __contains__(self, cav_id: int) -> bool:
        return cav_id in self._entries

    @property
    def entries(self) -> tuple[LedgerEntry, ...]:
        return tuple(self._entries.values())

    def predecessor_on_path(self, edge_id: EdgeId) -> LedgerEntry | None:
        for entry in reversed(self._entries.values()):
            if entry.path.edge_id == edge_id:
                return entry
        return None

    def predecessor_at_entry(self, entry_node: int) -> LedgerEntry | None:
        for entry in reversed(self._entries.values()):
            if entry.path.entry == entry_node:
                return entry
        return None

    def crossings_at(self, conflict_id: ConflictPointId) -> list[tuple[LedgerEntry, CrossingRecord]]:
        found = []
        for entry in self._entries.values():
            for record in entry.crossings:
                if record.conflict_id == conflict_id:
                    found.append((entry, record))
        return found

    def commit(
        self,
        cav_id: int,
        path: PathDescriptor,
        outcome: CoordinationOutcome,
        params: SafetyParams,
    ) -> LedgerEntry:
        if not outcome.feasible or outcome.trajectory is None:
            raise ValueError(f"cannot commit infeasible outcome for CAV {cav_id}")
        if cav_id in self._entries:
            raise ValueError(f"CAV {cav_id} is already committed to intersection {self.intersection_id}")
        if path.intersection_id != self.intersection_id:
            raise ValueError(f"path {path.edge_id} does not belong to intersection {self.intersection_id}")
        entry = LedgerEntry(cav_id, path, outcome.trajectory, outcome.crossings, self.entries)
        if self.verify:
            problems = [issue for other in self._entries.values() for issue in pair_violations(other, entry, params)]
            if problems:
                raise SafetyViolationError(
                    f"intersection {self.intersection_id}, CAV {cav_id}: " + "; ".join(problems)
                )
        self._entries[cav_id] = entry
        return entry

    def release(self, cav_id: int) -> LedgerEntry:
        try:
            return self._entries.pop(cav_id)
        except KeyError:
            raise KeyError(f"CAV {cav_id} is not committed to intersection {self.intersection_id}") from None

    def copy(self) -> "IntersectionLedger":
        clone = IntersectionLedger(self.intersection_id, verify=self.verify)
        clone._entries = dict(self._entries)
        return clone


# ── Exit-time search ─────────────────────────────────────────────────────────

@dataclass(frozen=True)
class _Constraints:
    path: PathDescriptor
    same_path: LedgerEntry | None
    same_entry: LedgerEntry | None
    crossings: dict[ConflictPointId, list[tuple[LedgerEntry, CrossingRecord]]]

    @classmethod
    def gather(cls, path: PathDescriptor, ledger: IntersectionLedger) -> "_Constraints":
        same_path = ledger.predecessor_on_path(path.edge_id)
        same_entry = ledger.predecessor_at_entry(path.entry)
        if same_entry is same_path:
            same_entry = None
        crossings = {
            cid: [(e, r) for e, r in ledger.crossings_at(cid) if e.path.edge_id != path.edge_id]
            for cid, _ in path.conflicts
        }
        return cls(path, same_path, same_entry, crossings)

    def evaluate(
        self,
        entry: EntryState,
        tf: float,
        params: SafetyParams,
        limits: MotionLimits,
    ) -> CoordinationOutcome | None:
        path = self.path
        traj = fit_boundary_trajectory(entry.t0, entry.v0, tf, path.length)
        if not respects_limits(traj, limits):
            return None
        if self.same_path is not None and not rear_end_ok(traj, self.same_path.trajectory, params):
            return None
        if self.same_entry is not None:
            shared = min(path.approach_length, self.same_entry.path.approach_length)
            if not rear_end_ok(traj, self.same_entry.trajectory, params, shared_length=shared):
                return None
        records = []
        for cid, p_c in path.conflicts:
            t_c = time_at_position(traj, p_c)
            for other, record in self.crossings[cid]:
                if not lateral_ok(traj, p_c, other.trajectory, record.p_c, params, t_i_c=t_c, t_k_c=record.t_c):
                    return None
            records.append(CrossingRecord(entry.cav_id, cid, t_c, p_c))
        return CoordinationOutcome(traj, tf, tuple(records), True)


def evaluate_exit_time(
    entry: EntryState,
    path: PathDescriptor,
    ledger: IntersectionLedger,
    tf: float,
    params: SafetyParams,
    limits: MotionLimits,
) -> CoordinationOutcome | None:
    """Outcome for exit time ``tf`` if it satisfies every constraint, else None."""
    return _Constraints.gather(path, ledger).evaluate(entry, tf, params, limits)


def min_exit_time(
    entry: EntryState,
    path: PathDescriptor,
    ledger: IntersectionLedger,
    params: SafetyParams,
    limits: MotionLimits,
    search: SearchParams = SearchParams(),
) -> CoordinationOutcome:
    """Earliest exit time in the feasible window that satisfies every constraint.

    Scans forward from t_lo in ``search.step`` increments and stops at the
    first feasible candidate, then bisects the bracket down to
    ``search.tolerance``. Returns an infeasible outcome when the whole window
    is blocked.
    """
    try:
        window = feasible_exit_window(entry.t0, entry.v0, path.length, limits)
    except WindowShapeError as e:
        logger.warning("CAV %d on path %d: %s", entry.cav_id, path.edge_id, e)
        return CoordinationOutcome.infeasible()
    except EmptyWindowError as e:
        logger.debug("CAV %d on path %d: %s", entry.cav_id, path.edge_id, e)
        return CoordinationOutcome.infeasible()

    constraints = _Constraints.gather(path, ledger)
    steps = int(math.floor((window.t_hi - window.t_lo) / search.step + 1e-9))
    grid = [window.t_lo + k * search.step for k in range(steps + 1)]
    if grid[-1] < window.t_hi - 1e-12:
        grid.append(window.t_hi)

    blocked: float | None = None
    for tf in grid:
        outcome = constraints.evaluate(entry, tf, params, limits)
        if outcome is None:
            blocked = tf
            continue
        if blocked is not None:
            good = tf
            while good - blocked > search.tolerance:
                mid = 0.5 * (good + blocked)
                refined = constraints.evaluate(entry, mid, params, limits)
                if refined is None:
                    blocked = mid
                else:
                    good, outcome = mid, refined
        return CoordinationOutcome(outcome.trajectory, outcome.exit_time, outcome.crossings, True, window)

    logger.debug(
        "CAV %d on path %d: no safe exit time in [%.3f, %.3f]",
        entry.cav_id, path.edge_id, window.t_lo, window.t_hi,
    )
    return CoordinationOutcome.infeasible(window)


# ── Verification ─────────────────────────────────────────────────────────────

def pair_violations(earlier: LedgerEntry, later: LedgerEntry, params: SafetyParams) -> list[str]:
    """Closed-form check of every constraint between two co-present entries."""
    issues = []
    if earlier.path.edge_id == later.path.edge_id:
        margin = rear_end_margin(later.trajectory, earlier.trajectory, params)
        if margin < -SAFETY_TOLERANCE:
            issues.append(f"rear-end gap to CAV {earlier.cav_id} short by {-margin:.6f}")
        return issues
    if earlier.path.entry == later.path.entry:
        shared = min(earlier.path.approach_length, later.path.approach_length)
        margin = rear_end_margin(later.trajectory, earlier.trajectory, params, shared_length=shared)
        if margin < -SAFETY_TOLERANCE:
            issues.append(f"approach gap to CAV {earlier.cav_id} short by {-margin:.6f}")
    theirs = {record.conflict_id: record for record in earlier.crossings}
    for record in later.crossings:
        other = theirs.get(record.conflict_id)
        if other is None:
            continue
        margin = lateral_margin(
            later.trajectory, record.p_c, earlier.trajectory, other.p_c, params,
            t_i_c=record.t_c, t_k_c=other.t_c,
        )
        if margin > SAFETY_TOLERANCE:
            issues.append(f"conflict point {record.conflict_id} shared with CAV {earlier.cav_id} (margin {margin:.6f})")
    return issues


def _sample(traj: CubicTrajectory, times: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    poly = _local_poly(traj)
    tau = times - traj.t0
    v_f = traj.exit_speed
    inside = times <= traj.tf
    p = np.where(inside, poly(tau), traj.pf + v_f * (times - traj.tf))
    v = np.where(inside, poly.deriv()(tau), v_f)
    return p, v


def _grid(lo: float, hi: float, dt: float) -> np.ndarray:
    if hi < lo:
        return np.empty(0)
    return np.append(np.arange(lo, hi, dt), hi)


def _sampled_issues(earlier: LedgerEntry, later: LedgerEntry, params: SafetyParams, dt: float) -> list[str]:
    issues = []
    i, k = later.trajectory, earlier.trajectory
    lane_end = None
    if earlier.path.edge_id == later.path.edge_id:
        lane_end = i.tf
    elif earlier.path.entry == later.path.entry:
        shared = min(earlier.path.approach_length, later.path.approach_length)
        lane_end = min(time_at_position(i, min(shared, i.pf)), time_at_position(k, min(shared, k.pf)))
    if lane_end is not None:
        times = _grid(max(i.t0, k.t0), lane_end, dt)
        if times.size:
            p_i, v_i = _sample(i, times)
            p_k, _ = _sample(k, times)
            gap = p_k - p_i - (params.rho + params.phi * v_i)
            if gap.min() < -AUDIT_TOLERANCE:
                issues.append(f"CAV {later.cav_id} behind CAV {earlier.cav_id}: gap short by {-gap.min():.6f}")

    if earlier.path.edge_id != later.path.edge_id:
        theirs = {record.conflict_id: record for record in earlier.crossings}
        for record in later.crossings:
            other = theirs.get(record.conflict_id)
            if other is None:
                continue
            reach = []
            for traj, p_c, until in ((i, record.p_c, other.t_c), (k, other.p_c, record.t_c)):
                times = _grid(traj.t0, until, dt)
                if not times.size:
                    reach.append(-math.inf)
                    continue
                p, v = _sample(traj, times)
                reach.append(float((params.rho + params.phi * v + p - p_c).max()))
            if min(reach) > AUDIT_TOLERANCE:
                issues.append(
                    f"CAVs {later.cav_id} and {earlier.cav_id} overlap at conflict point {record.conflict_id}"
                )
    return issues


def audit_commits(entries: Iterable[LedgerEntry], params: SafetyParams, dt: float = 0.1) -> list[str]:
    """Dense-sampling re-check of every committed entry against the peers it was planned around."""
    issues = []
    for entry in entries:
        for peer in entry.peers:
            for issue in _sampled_issues(peer, entry, params, dt):
                issues.append(f"intersection {entry.path.intersection_id}: {issue}")
    return issues
