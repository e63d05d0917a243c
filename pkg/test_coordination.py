import math

import numpy as np
import pytest

from conftest import internal_path
from src.coordination import (
    EntryState,
    IntersectionLedger,
    SafetyParams,
    SafetyViolationError,
    audit_commits,
    evaluate_exit_time,
    lateral_margin,
    lateral_ok,
    min_exit_time,
    rear_end_margin,
    rear_end_ok,
)
from src.network import Side
from src.trajectory import (
    MotionLimits,
    feasible_exit_window,
    fit_boundary_trajectory,
    respects_limits,
    time_at_position,
)


def _commit(ledger, cav_id, path, t0, v0, safety, limits):
    outcome = min_exit_time(EntryState(cav_id, t0, v0), path, ledger, safety, limits)
    assert outcome.feasible
    ledger.commit(cav_id, path, outcome, safety)
    return outcome


def test_empty_ledger_gives_earliest_exit(grid1, safety, limits):
    path = internal_path(grid1, Side.SOUTH, "straight")
    outcome = min_exit_time(EntryState(0, 5.0, 12.0), path, IntersectionLedger(0), safety, limits)
    window = feasible_exit_window(5.0, 12.0, path.length, limits)
    assert outcome.feasible
    assert outcome.exit_time == window.t_lo
    assert outcome.delay == 0.0
    assert respects_limits(outcome.trajectory, limits)
    assert [record.conflict_id for record in outcome.crossings] == [cid for cid, _ in path.conflicts]


def test_crossing_conflict_forces_a_later_exit(grid1, limits):
    safety = SafetyParams(rho=5.0, phi=1.0)
    ledger = IntersectionLedger(0)
    west = internal_path(grid1, Side.WEST, "straight")
    south = internal_path(grid1, Side.SOUTH, "straight")
    _commit(ledger, 1, west, 0.0, 12.0, safety, limits)

    outcome = min_exit_time(EntryState(2, 0.0, 12.0), south, ledger, safety, limits)
    assert outcome.feasible
    assert outcome.exit_time > outcome.window.t_lo + 0.01
    (shared,) = {cid for cid, _ in south.conflicts} & {cid for cid, _ in west.conflicts}
    mine = next(r for r in outcome.crossings if r.conflict_id == shared)
    (leader,) = ledger.entries
    theirs = next(r for r in leader.crossings if r.conflict_id == shared)
    assert lateral_ok(outcome.trajectory, mine.p_c, leader.trajectory, theirs.p_c, safety)

    ledger.commit(2, south, outcome, safety)
    assert audit_commits(ledger.entries, safety, dt=0.01) == []


def test_refined_exit_time_is_near_minimal(grid1, limits):
    safety = SafetyParams(rho=5.0, phi=1.0)
    ledger = IntersectionLedger(0)
    _commit(ledger, 1, internal_path(grid1, Side.WEST, "straight"), 0.0, 12.0, safety, limits)
    south = internal_path(grid1, Side.SOUTH, "straight")
    entry = EntryState(2, 0.0, 12.0)
    outcome = min_exit_time(entry, south, ledger, safety, limits)
    assert evaluate_exit_time(entry, south, ledger, outcome.exit_time, safety, limits) is not None
    assert evaluate_exit_time(entry, south, ledger, outcome.exit_time - 1e-3, safety, limits) is None


def test_same_lane_follower_keeps_its_gap(grid1, safety, limits):
    ledger = IntersectionLedger(0)
    path = internal_path(grid1, Side.EAST, "left")
    _commit(ledger, 1, path, 0.0, 9.0, safety, limits)
    outcome = _commit(ledger, 2, path, 2.0, 12.0, safety, limits)
    leader = ledger.entries[0]
    assert rear_end_ok(outcome.trajectory, leader.trajectory, safety)
    assert outcome.exit_time > leader.trajectory.tf
    assert audit_commits(ledger.entries, safety, dt=0.01) == []


def test_shared_approach_is_protected(grid1, safety, limits):
    ledger = IntersectionLedger(0)
    left = internal_path(grid1, Side.NORTH, "left")
    right = internal_path(grid1, Side.NORTH, "right")
    _commit(ledger, 1, left, 0.0, 6.0, safety, limits)
    outcome = _commit(ledger, 2, right, 3.0, 12.0, safety, limits)
    leader = ledger.entries[0]
    margin = rear_end_margin(outcome.trajectory, leader.trajectory, safety, shared_length=right.approach_length)
    assert margin >= -1e-9
    assert audit_commits(ledger.entries, safety, dt=0.01) == []


def test_rear_end_margin_examples(safety):
    leader = fit_boundary_trajectory(0.0, 12.0, 8.0, 100.0)
    assert not rear_end_ok(leader, leader, safety)
    # Speed rises to the exit speed, so the widest required gap is at exit
    assert rear_end_margin(leader, leader, safety) == pytest.approx(-safety.gap(leader.exit_speed), abs=1e-6)
    follower = fit_boundary_trajectory(3.0, 12.0, 11.0, 100.0)
    assert rear_end_ok(follower, leader, safety)


def test_lateral_examples(safety):
    k = fit_boundary_trajectory(0.0, 12.0, 8.0, 100.0)
    # Both at their conflict points at the same instant
    assert not lateral_ok(k, 50.0, k, 50.0, safety)
    # i enters long after k has crossed
    late = fit_boundary_trajectory(100.0, 12.0, 108.0, 100.0)
    assert lateral_ok(late, 50.0, k, 50.0, safety)
    assert lateral_margin(late, 50.0, k, 50.0, safety) == -math.inf


def test_blocked_window_returns_infeasible(grid1, limits):
    safety = SafetyParams(rho=60.0, phi=0.0)
    ledger = IntersectionLedger(0)
    path = internal_path(grid1, Side.SOUTH, "straight")
    _commit(ledger, 1, path, 0.0, 2.0, safety, limits)
    outcome = min_exit_time(EntryState(2, 0.0, 15.0), path, ledger, safety, limits)
    assert not outcome.feasible
    assert outcome.exit_time == math.inf
    assert outcome.trajectory is None


def test_ledger_commit_and_release(grid1, safety, limits):
    ledger = IntersectionLedger(0)
    path = internal_path(grid1, Side.SOUTH, "left")
    outcome = _commit(ledger, 7, path, 0.0, 12.0, safety, limits)
    assert 7 in ledger and len(ledger) == 1
    assert ledger.predecessor_on_path(path.edge_id).cav_id == 7
    assert ledger.predecessor_at_entry(path.entry).cav_id == 7
    with pytest.raises(ValueError):
        ledger.commit(7, path, outcome, safety)
    copy = ledger.copy()
    assert ledger.release(7).cav_id == 7
    assert len(ledger) == 0 and len(copy) == 1
    with pytest.raises(KeyError):
        ledger.release(7)


def test_verified_commit_rejects_unsafe_trajectory(grid1, limits):
    safety = SafetyParams(rho=5.0, phi=1.0)
    west = internal_path(grid1, Side.WEST, "straight")
    south = internal_path(grid1, Side.SOUTH, "straight")
    unchecked = min_exit_time(EntryState(2, 0.0, 12.0), south, IntersectionLedger(0), safety, limits)

    ledger = IntersectionLedger(0, verify=True)
    _commit(ledger, 1, west, 0.0, 12.0, safety, limits)
    with pytest.raises(SafetyViolationError):
        ledger.commit(2, south, unchecked, safety)
    assert 2 not in ledger


def test_invalid_safety_params():
    with pytest.raises(ValueError):
        SafetyParams(rho=0.0)
    with pytest.raises(ValueError):
        SafetyParams(phi=-1.0)


def test_limits_are_checked_before_safety(grid1):
    limits = MotionLimits()
    path = internal_path(grid1, Side.SOUTH, "straight")
    assert evaluate_exit_time(EntryState(0, 0.0, 12.0), path, IntersectionLedger(0), 3.0, SafetyParams(), limits) is None


def _dense(traj, times):
    """Position and speed at ``times``, continuing at exit speed after tf."""
    tau = times - traj.t0
    inside = times <= traj.tf
    cubic = ((traj.a * tau + traj.b) * tau + traj.c) * tau + traj.d
    p = np.where(inside, cubic, traj.pf + traj.exit_speed * (times - traj.tf))
    v = np.where(inside, (3.0 * traj.a * tau + 2.0 * traj.b) * tau + traj.c, traj.exit_speed)
    return p, v


def _times(lo, hi, dt=1e-3):
    if hi < lo:
        return np.empty(0)
    return np.append(np.arange(lo, hi, dt), hi)


def _random_crossing(rng, limits, t0, pf=100.0):
    v0 = rng.uniform(6.0, limits.v_max)
    window = feasible_exit_window(t0, v0, pf, limits)
    return fit_boundary_trajectory(t0, v0, rng.uniform(window.t_lo, window.t_hi), pf)


def test_rear_end_margin_agrees_with_dense_sampling(safety, limits):
    rng = np.random.default_rng(5)
    verdicts = set()
    for _ in range(300):
        leader = _random_crossing(rng, limits, 0.0)
        follower = _random_crossing(rng, limits, rng.uniform(0.2, 4.0))
        times = _times(max(follower.t0, leader.t0), follower.tf)
        p_k, _ = _dense(leader, times)
        p_i, v_i = _dense(follower, times)
        sampled = float((p_k - p_i - safety.gap(v_i)).min())
        margin = rear_end_margin(follower, leader, safety)
        assert margin <= sampled + 1e-9
        assert sampled - margin <= 1e-4
        if abs(sampled) > 1e-4:
            assert rear_end_ok(follower, leader, safety) == (sampled > 0)
            verdicts.add(sampled > 0)
    assert verdicts == {True, False}


def test_lateral_margin_agrees_with_dense_sampling(safety, limits):
    rng = np.random.default_rng(6)
    verdicts = set()
    for _ in range(300):
        traj_i = _random_crossing(rng, limits, 0.0)
        traj_k = _random_crossing(rng, limits, rng.uniform(0.0, 6.0))
        p_i_c, p_k_c = rng.uniform(85.0, 99.0, size=2)
        t_i_c = time_at_position(traj_i, p_i_c)
        t_k_c = time_at_position(traj_k, p_k_c)
        reach = []
        for traj, p_c, until in ((traj_i, p_i_c, t_k_c), (traj_k, p_k_c, t_i_c)):
            times = _times(traj.t0, until)
            if not times.size:
                reach.append(-math.inf)
                continue
            p, v = _dense(traj, times)
            reach.append(float((safety.gap(v) + p - p_c).max()))
        sampled = min(reach)
        margin = lateral_margin(traj_i, p_i_c, traj_k, p_k_c, safety)
        if math.isinf(sampled):
            assert margin == sampled
            continue
        assert sampled <= margin + 1e-9
        assert margin - sampled <= 1e-4
        if abs(sampled) > 1e-4:
            assert lateral_ok(traj_i, p_i_c, traj_k, p_k_c, safety) == (sampled < 0)
            verdicts.add(sampled < 0)
    assert verdicts == {True, False}


@pytest.mark.slow
def test_min_exit_time_matches_a_fine_grid_search(grid1, safety, limits):
    rng = np.random.default_rng(7)
    paths = grid1.intersections[0].paths
    delayed = 0
    for _ in range(200):
        ledger = IntersectionLedger(0)
        first = paths[rng.integers(len(paths))]
        _commit(ledger, 1, first, 0.0, rng.uniform(6.0, limits.v_max), safety, limits)
        path = paths[rng.integers(len(paths))]
        entry = EntryState(2, rng.uniform(0.0, 3.0), rng.uniform(6.0, limits.v_max))
        outcome = min_exit_time(entry, path, ledger, safety, limits)
        if not outcome.feasible:
            continue
        assert evaluate_exit_time(entry, path, ledger, outcome.exit_time, safety, limits) is not None
        earlier = np.arange(outcome.window.t_lo, outcome.exit_time - 2e-3, 1e-3)
        assert all(
            evaluate_exit_time(entry, path, ledger, float(tf), safety, limits) is None for tf in earlier
        )
        delayed += outcome.delay > 0
    assert delayed > 0
