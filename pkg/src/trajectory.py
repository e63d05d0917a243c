"""Energy-optimal cubic trajectories inside one intersection.

A trajectory is p(τ) = aτ³ + bτ² + cτ + d with τ = t − t0 measured from the
entry time, fixed by p(t0) = 0, v(t0) = v0, p(tf) = pf and zero acceleration
at exit. Coefficients are stored in entry-relative time so that they stay well
conditioned late in a long run.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import optimize

BOUNDARY_TOLERANCE = 1e-9
ROOT_TOLERANCE = 1e-12
LIMIT_SLACK = 1e-9
WINDOW_TOLERANCE = 1e-6
WINDOW_SCAN_POINTS = 64


class TrajectoryDomainError(ValueError):
    """Raised when a trajectory is evaluated outside [t0, tf] or [0, pf]."""


class EmptyWindowError(RuntimeError):
    """Raised when no exit time satisfies the speed and acceleration limits."""


class WindowShapeError(RuntimeError):
    """Raised when the feasible exit-time set is not a single interval."""


@dataclass(frozen=True)
class MotionLimits:
    u_min: float = -3.0
    u_max: float = 3.0
    v_min: float = 2.0
    v_max: float = 15.0

    def __post_init__(self) -> None:
        if not self.u_min < 0 < self.u_max:
            raise ValueError(f"acceleration limits must satisfy u_min < 0 < u_max, got [{self.u_min}, {self.u_max}]")
        if not 0 < self.v_min <= self.v_max:
            raise ValueError(f"speed limits must satisfy 0 < v_min <= v_max, got [{self.v_min}, {self.v_max}]")


@dataclass(frozen=True)
class CubicTrajectory:
    a: float
    b: float
    c: float
    d: float
    t0: float
    tf: float
    pf: float
    v0: float

    @property
    def duration(self) -> float:
        return self.tf - self.t0

    @property
    def exit_speed(self) -> float:
        return _local_speed(self, self.duration)


@dataclass(frozen=True)
class FeasibleExitWindow:
    t_lo: float
    t_hi: float

    def __contains__(self, t: float) -> bool:
        return self.t_lo <= t <= self.t_hi


def _local_position(traj: CubicTrajectory, tau: float) -> float:
    return ((traj.a * tau + traj.b) * tau + traj.c) * tau + traj.d


def _local_speed(traj: CubicTrajectory, tau: float) -> float:
    return (3.0 * traj.a * tau + 2.0 * traj.b) * tau + traj.c


def _local_accel(traj: CubicTrajectory, tau: float) -> float:
    return 6.0 * traj.a * tau + 2.0 * traj.b


def _check_time(traj: CubicTrajectory, t: float) -> float:
    if t < traj.t0 - BOUNDARY_TOLERANCE or t > traj.tf + BOUNDARY_TOLERANCE:
        raise TrajectoryDomainError(f"time {t} is outside [{traj.t0}, {traj.tf}]")
    return min(max(t, traj.t0), traj.tf) - traj.t0


def fit_boundary_trajectory(t0: float, v0: float, tf: float, pf: float) -> CubicTrajectory:
    """Unique cubic with p(t0)=0, v(t0)=v0, p(tf)=pf, u(tf)=0."""
    if not tf > t0:
        raise ValueError(f"exit time {tf} must be later than entry time {t0}")
    if not pf > 0:
        raise ValueError(f"path length must be positive, got {pf}")
    if not v0 > 0:
        raise ValueError(f"entry speed must be positive, got {v0}")
    T = tf - t0
    system = np.array([
        [0.0, 0.0, 0.0, 1.0],
        [0.0, 0.0, 1.0, 0.0],
        [T**3, T**2, T, 1.0],
        [6.0 * T, 2.0, 0.0, 0.0],
    ])
    rhs = np.array([0.0, v0, pf, 0.0])
    try:
        a, b, c, d = np.linalg.solve(system, rhs)
    except np.linalg.LinAlgError as e:
        raise ValueError(f"boundary system is singular for duration {T}") from e
    return CubicTrajectory(float(a), float(b), float(c), float(d), t0, tf, pf, v0)


def position(traj: CubicTrajectory, t: float) -> float:
    return _local_position(traj, _check_time(traj, t))


def speed(traj: CubicTrajectory, t: float) -> float:
    return _local_speed(traj, _check_time(traj, t))


def accel(traj: CubicTrajectory, t: float) -> float:
    return _local_accel(traj, _check_time(traj, t))


def position_extended(traj: CubicTrajectory, t: float) -> float:
    """Position with constant exit-speed extrapolation past tf."""
    if t <= traj.tf:
        return position(traj, t)
    return traj.pf + traj.exit_speed * (t - traj.tf)


def time_at_position(traj: CubicTrajectory, p: float) -> float:
    """Time at which the trajectory reaches position ``p``.

    Only meaningful for limit-certified trajectories, where speed stays
    positive and position is strictly increasing.
    """
    if p < -BOUNDARY_TOLERANCE or p > traj.pf + BOUNDARY_TOLERANCE:
        raise TrajectoryDomainError(f"position {p} is outside [0, {traj.pf}]")
    if p <= 0.0:
        return traj.t0
    if p >= traj.pf:
        return traj.tf
    return optimize.brentq(
        lambda tau: _local_position(traj, tau) - p,
        0.0,
        traj.duration,
        xtol=ROOT_TOLERANCE,
    ) + traj.t0


def respects_limits(traj: CubicTrajectory, limits: MotionLimits) -> bool:
    """Closed-form check of speed and acceleration bounds over [t0, tf]."""
    T = traj.duration
    speeds = [_local_speed(traj, 0.0), _local_speed(traj, T)]
    if traj.a != 0.0:
        vertex = -traj.b / (3.0 * traj.a)
        if 0.0 < vertex < T:
            speeds.append(_local_speed(traj, vertex))
    accels = (_local_accel(traj, 0.0), _local_accel(traj, T))
    return (
        min(speeds) >= limits.v_min - LIMIT_SLACK
        and max(speeds) <= limits.v_max + LIMIT_SLACK
        and min(accels) >= limits.u_min - LIMIT_SLACK
        and max(accels) <= limits.u_max + LIMIT_SLACK
    )


def _bisect(feasible, bad: float, good: float) -> float:
    while abs(good - bad) > WINDOW_TOLERANCE:
        mid = 0.5 * (good + bad)
        if feasible(mid):
            good = mid
        else:
            bad = mid
    return good


@lru_cache(maxsize=8192)
def _window_durations(v0: float, pf: float, limits: MotionLimits) -> tuple[float, float]:
    def feasible(T: float) -> bool:
        return respects_limits(fit_boundary_trajectory(0.0, v0, T, pf), limits)

    # Average speed pf/T must lie within the speed limits.
    shortest = pf / limits.v_max
    longest = pf / limits.v_min
    if longest - shortest <= WINDOW_TOLERANCE:
        if feasible(shortest):
            return shortest, shortest
        raise EmptyWindowError(f"no feasible exit time for v0={v0}, pf={pf}")

    grid = np.linspace(shortest, longest, WINDOW_SCAN_POINTS)
    flags = [feasible(float(T)) for T in grid]
    if not any(flags):
        raise EmptyWindowError(f"no feasible exit time for v0={v0}, pf={pf} under {limits}")
    first = flags.index(True)
    last = len(flags) - 1 - flags[::-1].index(True)
    if not all(flags[first:last + 1]):
        gaps = [float(grid[k]) for k in range(first, last + 1) if not flags[k]]
        raise WindowShapeError(
            f"feasible durations for v0={v0}, pf={pf} are not an interval (infeasible at {gaps[:3]})"
        )

    lo = float(grid[first]) if first == 0 else _bisect(feasible, float(grid[first - 1]), float(grid[first]))
    hi = float(grid[last]) if last == len(grid) - 1 else _bisect(feasible, float(grid[last + 1]), float(grid[last]))
    return lo, hi


def feasible_exit_window(t0: float, v0: float, pf: float, limits: MotionLimits) -> FeasibleExitWindow:
    """Earliest and latest exit times whose boundary cubic respects ``limits``."""
    if not pf > 0:
        raise ValueError(f"path length must be positive, got {pf}")
    if not (limits.v_min - LIMIT_SLACK <= v0 <= limits.v_max + LIMIT_SLACK):
        raise ValueError(f"entry speed {v0} is outside [{limits.v_min}, {limits.v_max}]")
    lo, hi = _window_durations(float(v0), float(pf), limits)
    return FeasibleExitWindow(t0 + lo, t0 + hi)

