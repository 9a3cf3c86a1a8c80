"""Low-level layer: vehicle states, controllers and the three hybrid automata.

Axes are named ``long`` (along the road) and ``lat`` (across it).  ``long`` is
the front-bumper position, so a vehicle occupies ``[long - length, long]``.
Lane ``k`` is centred at ``lat = k * LANE_WIDTH``.

Controllers are digital: :func:`ha_step` runs once per protocol tick and
latches an acceleration and a lateral target which :func:`flow` then holds
over the dynamics substeps.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Mapping, Union

import numpy as np

LANE_WIDTH = 3.5

LEADER, FOLLOWER, JOINER = "Leader", "Follower", "Joiner"

# HA modes
DRIVE, FOLLOW, ALIGN, ALIGNED, MERGE = "drive", "follow", "align", "aligned", "merge"


class UnknownVehicle(KeyError):
    pass


class ProtocolOrderViolation(RuntimeError):
    pass


@dataclass(frozen=True)
class PID:
    kp: float = 0.45
    ki: float = 0.0
    kd: float = 1.4
    integral_limit: float = 5.0


@dataclass(frozen=True)
class Predictive:
    horizon: int = 10
    base_q: float = 1.0
    base_r: float = 0.5
    kappa: float = 0.3
    step: float = 0.1


Controller = Union[PID, Predictive]


@dataclass(frozen=True)
class VehicleParams:
    length: float = 4.5
    max_accel: float = 2.5
    max_decel: float = 6.0
    cruise_speed: float = 20.0
    lane_change_rate: float = 1.0
    max_speed: float = 40.0
    controller: Controller = field(default_factory=PID)

    def __post_init__(self):
        if self.length <= 0:
            raise ValueError("length must be positive")
        if self.max_decel <= 0 or self.max_accel <= 0:
            raise ValueError("acceleration limits must be positive")
        if self.cruise_speed <= 0:
            raise ValueError("cruise speed must be positive")


@dataclass(frozen=True)
class Tolerances:
    d: float = 10.0
    align: float = 0.25
    speed: float = 0.1
    lat: float = 0.1
    ticks: int = 5


@dataclass(frozen=True)
class SignalSet:
    """Pulse inputs/outputs for one tick plus the leader pair (L, L')."""

    align_start: bool = False
    align_done: bool = False
    merge_start: bool = False
    merge_done: bool = False
    leader: int | None = None
    prev_leader: int | None = None


@dataclass(frozen=True)
class VehicleState:
    id: int
    long: float
    lat: float
    v_long: float
    params: VehicleParams
    behavior: str = LEADER
    mode: str = DRIVE
    signals: SignalSet = SignalSet()
    v_lat: float = 0.0
    # references latched by the automaton
    long_ref: int | None = None
    lat_ref: int | None = None
    lat_target: float | None = None
    accel: float = 0.0
    integral: float = 0.0
    # align / merge monitors
    align_armed: bool = False
    align_count: int = 0
    align_emitted: bool = False
    merge_armed: bool = False
    merge_emitted: bool = False

    @property
    def lane(self) -> int:
        return int(math.floor(self.lat / LANE_WIDTH + 0.5))

    @property
    def rear(self) -> float:
        return self.long - self.params.length


def lane_center(lane: int) -> float:
    return lane * LANE_WIDTH


def _get(world: Mapping[int, VehicleState], vid: int) -> VehicleState:
    try:
        return world[vid]
    except KeyError:
        raise UnknownVehicle(vid) from None


def gap_long(world: Mapping[int, VehicleState], self_id: int, target_id: int) -> float:
    """Bumper-to-bumper distance from ``self``'s front to ``target``'s rear."""
    me, tgt = _get(world, self_id), _get(world, target_id)
    return tgt.rear - me.long


def offset_lat(world: Mapping[int, VehicleState], self_id: int, target_id: int) -> float:
    """Signed lateral distance from ``self`` to the centre of ``target``'s lane."""
    me, tgt = _get(world, self_id), _get(world, target_id)
    return lane_center(tgt.lane) - me.lat


# ---------------------------------------------------------------- controllers


def _clamp(a: float, p: VehicleParams) -> float:
    return min(p.max_accel, max(-p.max_decel, a))


def cruise_accel(v: float, p: VehicleParams, gain: float = 0.5) -> float:
    return _clamp(gain * (p.cruise_speed - v), p)


def pid_accel(gap_error: float, rel_speed: float, integral: float, pid: PID) -> float:
    return pid.kp * gap_error + pid.ki * integral + pid.kd * rel_speed


def predictive_weights(gap_error: float, d: float, ctrl: Predictive) -> tuple[float, float]:
    s = 1.0 + abs(gap_error) / d
    return ctrl.base_q * s, ctrl.base_r / s


def predictive_control(gap_error: float, rel_speed: float, ctrl: Predictive, d: float, params: VehicleParams) -> float:
    """First move of a finite-horizon quadratic gap/speed tracker.

    ``rel_speed`` is leader speed minus own speed.  The leader is assumed to
    hold its speed.  Over the horizon the gap error evolves as
    ``e[k+1] = e[k] + h*ev[k]``, ``ev[k+1] = ev[k] - h*a[k]``; the speed
    reference is ``v_leader + kappa*e``.  Cost is
    ``sum Q*(e^2 + (ev + kappa*e)^2) + R*a^2`` with Q, R scaled by the error.
    """
    n, h = ctrl.horizon, ctrl.step
    if n < 1:
        raise ValueError("horizon must be >= 1")
    q, r = predictive_weights(gap_error, d, ctrl)
    # affine maps: e_k = ce[k] + Ge[k] @ a, ev_k = cv[k] + Gv[k] @ a
    ce, cv = gap_error, rel_speed
    ge, gv = np.zeros(n), np.zeros(n)
    rows, rhs = [], []
    sq, sr = math.sqrt(q), math.sqrt(r)
    for k in range(n):
        ce, ge = ce + h * cv, ge + h * gv
        gv = gv.copy()
        gv[k] -= h
        rows.append(sq * ge)
        rhs.append(-sq * ce)
        rows.append(sq * (gv + ctrl.kappa * ge))
        rhs.append(-sq * (cv + ctrl.kappa * ce))
    a_rows = np.vstack(rows + [sr * np.eye(n)])
    b = np.concatenate([np.array(rhs), np.zeros(n)])
    sol, *_ = np.linalg.lstsq(a_rows, b, rcond=None)
    return _clamp(float(sol[0]), params)


def follow_accel(
    me: VehicleState, leader: VehicleState, d: float, dt: float
) -> tuple[float, float]:
    """Acceleration keeping ``d`` behind ``leader``; returns (accel, new integral)."""
    e = (leader.rear - me.long) - d
    ev = leader.v_long - me.v_long
    ctrl = me.params.controller
    if isinstance(ctrl, Predictive):
        return predictive_control(e, ev, ctrl, d, me.params), 0.0
    integral = max(-ctrl.integral_limit, min(ctrl.integral_limit, me.integral + e * dt))
    a = pid_accel(e, ev, integral, ctrl)
    return _clamp(a, me.params), integral


# ---------------------------------------------------------------- flow


@dataclass(frozen=True)
class Commands:
    accel: float
    lat_target: float | None = None


def flow(state: VehicleState, mode: str, commands: Commands, dt: float) -> VehicleState:
    """One explicit Euler step under held commands."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    p = state.params
    v = state.v_long
    long = state.long + v * dt
    v_new = min(p.max_speed, max(0.0, v + commands.accel * dt))
    lat, v_lat = state.lat, 0.0
    if commands.lat_target is not None:
        err = commands.lat_target - lat
        if abs(err) > 1e-12:
            v_lat = math.copysign(min(p.lane_change_rate, abs(err) / dt), err)
            lat = lat + v_lat * dt
    return replace(state, long=long, v_long=v_new, lat=lat, v_lat=v_lat, mode=mode)


def commands_of(state: VehicleState) -> Commands:
    return Commands(state.accel, state.lat_target)


# ---------------------------------------------------------------- automata


def ha_step(
    vehicle: VehicleState,
    pulses: SignalSet,
    world: Mapping[int, VehicleState],
    dt: float,
    tol: Tolerances = Tolerances(),
) -> tuple[VehicleState, SignalSet]:
    """Advance one vehicle's automaton by one protocol tick.

    ``pulses`` carries the input pulses raised by the interface this tick and
    the current (L, L').  Returns the updated vehicle (with latched commands)
    and the output pulses.
    """
    v = replace(vehicle, signals=pulses)
    out_align = out_merge = False
    L, Lp = pulses.leader, pulses.prev_leader

    if v.behavior == LEADER:
        v = replace(v, mode=DRIVE, long_ref=None, lat_ref=None, lat_target=lane_center(v.lane))

    elif v.behavior == FOLLOWER:
        if v.mode not in (FOLLOW, ALIGN):
            v = replace(v, mode=FOLLOW, long_ref=L, lat_ref=L)
        if pulses.align_start:
            v = replace(v, mode=ALIGN, long_ref=L, lat_ref=Lp if Lp is not None else v.lat_ref,
                        align_armed=True, align_count=0, align_emitted=False)
        if pulses.merge_done:
            v = replace(v, mode=FOLLOW, long_ref=L, lat_ref=L)
        v, out_align = _monitor_align(v, world, tol)

    elif v.behavior == JOINER:
        if pulses.align_start:
            v = replace(v, mode=ALIGN, long_ref=L, lat_ref=None, lat_target=lane_center(v.lane),
                        align_armed=True, align_count=0, align_emitted=False)
        if pulses.merge_start:
            if not v.align_emitted:
                raise ProtocolOrderViolation(f"vehicle {v.id}: merge_start before align_done")
            v = replace(v, mode=MERGE, lat_ref=L, merge_armed=True, merge_emitted=False)
        v, out_align = _monitor_align(v, world, tol)
        if v.align_emitted and v.mode == ALIGN:
            v = replace(v, mode=ALIGNED)
        if v.merge_armed and v.lat_ref is not None:
            if abs(offset_lat(world, v.id, v.lat_ref)) <= tol.lat:
                v = replace(v, merge_armed=False, merge_emitted=True)
                out_merge = True

    v = _control(v, world, tol.d, dt)
    return v, SignalSet(align_done=out_align, merge_done=out_merge, leader=L, prev_leader=Lp)


def _monitor_align(v: VehicleState, world, tol: Tolerances) -> tuple[VehicleState, bool]:
    if not v.align_armed or v.long_ref is None:
        return v, False
    ref = _get(world, v.long_ref)
    ok = abs(gap_long(world, v.id, v.long_ref) - tol.d) <= tol.align and abs(ref.v_long - v.v_long) <= tol.speed
    count = v.align_count + 1 if ok else 0
    if count >= tol.ticks:
        return replace(v, align_count=count, align_armed=False, align_emitted=True), True
    return replace(v, align_count=count), False


def _control(v: VehicleState, world, d: float, dt: float) -> VehicleState:
    if v.long_ref is None or v.long_ref not in world:
        accel, integral = cruise_accel(v.v_long, v.params), 0.0
    else:
        accel, integral = follow_accel(v, world[v.long_ref], d, dt)
    if v.lat_ref is not None and v.lat_ref in world:
        lat_target = lane_center(world[v.lat_ref].lane)
    elif v.lat_target is not None:
        lat_target = v.lat_target
    else:
        lat_target = lane_center(v.lane)
    return replace(v, accel=accel, integral=integral, lat_target=lat_target)


def become_follower(v: VehicleState) -> VehicleState:
    L = v.signals.leader
    return replace(v, behavior=FOLLOWER, mode=FOLLOW, long_ref=L, lat_ref=L, merge_armed=False)
