"""Co-simulation of the protocol layer and the vehicle dynamics."""

from __future__ import annotations

import csv
import hashlib
import io
import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

from .calculus import (
    BroadcastStep,
    Call,
    Communication,
    MatchStep,
    UnfoldStep,
    UnobservableStep,
    make_system,
)
from .dynamics import (
    FOLLOW,
    FOLLOWER,
    JOINER,
    LANE_WIDTH,
    LEADER,
    PID,
    Commands,
    Predictive,
    SignalSet,
    Tolerances,
    VehicleParams,
    VehicleState,
    become_follower,
    flow,
    ha_step,
)
from .protocol import ROLE_ENTRY, VehicleRole, WorldView, make_handler, platoon_env
from .runtime import Fired, Runtime


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class VehicleSpec:
    id: int
    role: str
    lane: int
    long: float
    params: VehicleParams
    speed: float | None = None
    label: str = ""


@dataclass(frozen=True)
class Scenario:
    vehicles: tuple[VehicleSpec, ...]
    platoon_order: tuple[int, ...]
    d: float = 10.0
    sampling_period: float = 0.1
    dynamics_dt: float = 0.01
    broadcast_range: float = 80.0
    seed: int = 0
    max_duration: float = 120.0
    name: str = ""
    align_tolerance: float = 0.25
    speed_tolerance: float = 0.1
    lat_tolerance: float = 0.1
    align_ticks: int = 5
    settle_tolerance: float = 0.01

    @property
    def substeps(self) -> int:
        return int(round(self.sampling_period / self.dynamics_dt))

    @property
    def tolerances(self) -> Tolerances:
        return Tolerances(self.d, self.align_tolerance, self.speed_tolerance, self.lat_tolerance, self.align_ticks)

    def validate(self) -> None:
        ids = [v.id for v in self.vehicles]
        if len(set(ids)) != len(ids):
            raise ConfigError("vehicle ids must be unique")
        roles = {v.id: v.role for v in self.vehicles}
        for vid in self.platoon_order:
            if vid not in roles:
                raise ConfigError(f"platoon member {vid} is not a vehicle")
        for k, vid in enumerate(self.platoon_order):
            want = LEADER if k == 0 else FOLLOWER
            if roles[vid] != want:
                raise ConfigError(f"vehicle {vid} at platoon position {k} must be a {want}")
        for v in self.vehicles:
            if v.role not in (LEADER, FOLLOWER, JOINER):
                raise ConfigError(f"unknown role {v.role!r}")
            if v.role != JOINER and v.id not in self.platoon_order:
                raise ConfigError(f"{v.role} {v.id} missing from platoon_order")
        n = self.sampling_period / self.dynamics_dt
        if self.dynamics_dt <= 0 or abs(n - round(n)) > 1e-9:
            raise ConfigError("dynamics_dt must divide sampling_period")
        if self.d <= 0 or self.max_duration <= 0:
            raise ConfigError("d and max_duration must be positive")


def _controller(spec: dict):
    spec = dict(spec or {"type": "pid"})
    kind = spec.pop("type", "pid")
    if kind == "pid":
        return PID(**spec)
    if kind == "predictive":
        return Predictive(**spec)
    raise ConfigError(f"unknown controller type {kind!r}")


def _params(spec: dict) -> VehicleParams:
    spec = dict(spec)
    ctrl = _controller(spec.pop("controller", None))
    try:
        return VehicleParams(controller=ctrl, **spec)
    except TypeError as e:
        raise ConfigError(str(e)) from None


def scenario_from_dict(data: dict) -> Scenario:
    profiles = {k: v for k, v in data.get("profiles", {}).items()}
    vehicles = []
    for v in data["vehicles"]:
        p = dict(profiles.get(v["profile"], {})) if "profile" in v else {}
        if "profile" in v and v["profile"] not in profiles:
            raise ConfigError(f"unknown profile {v['profile']!r}")
        p.update(v.get("params", {}))
        vehicles.append(
            VehicleSpec(
                id=int(v["id"]),
                role=v["role"],
                lane=int(v.get("lane", 0)),
                long=float(v["long"]),
                params=_params(p),
                speed=v.get("speed"),
                label=v.get("label", ""),
            )
        )
    keys = {
        "d", "sampling_period", "dynamics_dt", "broadcast_range", "seed", "max_duration", "name",
        "align_tolerance", "speed_tolerance", "lat_tolerance", "align_ticks", "settle_tolerance",
    }
    unknown = set(data) - keys - {"vehicles", "platoon_order", "profiles", "description"}
    if unknown:
        raise ConfigError(f"unknown scenario keys: {sorted(unknown)}")
    sc = Scenario(
        vehicles=tuple(vehicles),
        platoon_order=tuple(int(i) for i in data.get("platoon_order", [])),
        **{k: data[k] for k in keys if k in data},
    )
    sc.validate()
    return sc


def load_scenario(path: str | Path) -> Scenario:
    try:
        data = json.loads(Path(path).read_text())
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: {e}") from None
    return scenario_from_dict(data)


# ---------------------------------------------------------------- trace


@dataclass(frozen=True)
class VehicleRow:
    id: int
    long: float
    lat: float
    v_long: float
    role: str
    mode: str
    leader: int | None
    prev_leader: int | None


@dataclass(frozen=True)
class TraceRecord:
    tick: int
    time: float
    vehicles: tuple[VehicleRow, ...]
    events: tuple[str, ...]
    reactions: tuple[str, ...]
    min_gap: float


@dataclass
class MetricsSummary:
    merges_completed: int = 0
    merge_times: dict[int, float] = field(default_factory=dict)
    min_gap: float = math.inf
    final_gap_rms: float = 0.0
    deadlock_flag: bool = False
    final_gaps: list[float] = field(default_factory=list)
    merges: list[dict] = field(default_factory=list)
    duration: float = 0.0
    joiners: int = 0

    def to_dict(self) -> dict:
        return {
            "merges_completed": self.merges_completed,
            "merge_times": {str(k): round(v, 6) for k, v in sorted(self.merge_times.items())},
            "min_gap": None if math.isinf(self.min_gap) else round(self.min_gap, 6),
            "final_gap_rms": round(self.final_gap_rms, 6),
            "deadlock_flag": self.deadlock_flag,
            "final_gaps": [round(g, 6) for g in self.final_gaps],
            "merges": self.merges,
            "duration": round(self.duration, 6),
            "joiners": self.joiners,
        }


def describe_step(f: Fired) -> str:
    st = f.step
    if isinstance(st, Communication):
        return f"c{st.sender_owner}>{st.receiver_owner}"
    if isinstance(st, BroadcastStep):
        return f"b{st.sender_owner}>{'/'.join(map(str, st.receiver_owners))}"
    if isinstance(st, UnobservableStep):
        return f"{'x' if f.rejected else 't'}{st.owner}:{st.label}"
    if isinstance(st, UnfoldStep):
        return f"u{st.owner}:{st.def_name}"
    if isinstance(st, MatchStep):
        return f"m{st.owner}"
    return type(st).__name__


def same_lane_gaps(vehicles: dict[int, VehicleState]) -> list[tuple[int, int, float]]:
    """(follower, leader, gap) for consecutive vehicles sharing a lane."""
    out = []
    lanes: dict[int, list[VehicleState]] = {}
    for v in vehicles.values():
        lanes.setdefault(v.lane, []).append(v)
    for lane in sorted(lanes):
        row = sorted(lanes[lane], key=lambda v: (v.long, v.id))
        for back, front in zip(row, row[1:]):
            out.append((back.id, front.id, front.rear - back.long))
    return out


def _fmt(x: float) -> str:
    return "inf" if math.isinf(x) else f"{x:.6f}"


def trace_header(ids: list[int]) -> list[str]:
    cols = ["tick", "time"]
    for vid in ids:
        cols += [f"v{vid}_{c}" for c in ("long", "lat", "vlong", "role", "mode", "L", "Lp")]
    return cols + ["events", "reactions", "min_gap"]


def write_trace(trace: list[TraceRecord], out) -> None:
    w = csv.writer(out, lineterminator="\n")
    ids = [r.id for r in trace[0].vehicles] if trace else []
    w.writerow(trace_header(ids))
    opt = lambda x: "" if x is None else str(x)  # noqa: E731
    for rec in trace:
        row = [str(rec.tick), f"{rec.time:.3f}"]
        for v in rec.vehicles:
            row += [_fmt(v.long), _fmt(v.lat), _fmt(v.v_long), v.role, v.mode, opt(v.leader), opt(v.prev_leader)]
        row += [";".join(rec.events), ";".join(rec.reactions), _fmt(rec.min_gap)]
        w.writerow(row)


def trace_text(trace: list[TraceRecord]) -> str:
    buf = io.StringIO()
    write_trace(trace, buf)
    return buf.getvalue()


def trace_digest(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


# ---------------------------------------------------------------- loop


def _in_range(vehicles: dict[int, VehicleState], radius: float):
    pos = {vid: (v.long, v.lat) for vid, v in vehicles.items()}

    def rel(a: int, b: int) -> bool:
        (xa, ya), (xb, yb) = pos[a], pos[b]
        return math.hypot(xa - xb, ya - yb) <= radius

    return rel


def _initial_world(sc: Scenario) -> WorldView:
    vehicles, roles = {}, {}
    order = list(sc.platoon_order)
    for spec in sc.vehicles:
        leader = order[order.index(spec.id) - 1] if spec.role == FOLLOWER else None
        speed = spec.speed if spec.speed is not None else spec.params.cruise_speed
        mode = FOLLOW if spec.role == FOLLOWER else "drive"
        vehicles[spec.id] = VehicleState(
            spec.id,
            spec.long,
            spec.lane * LANE_WIDTH,
            float(speed),
            spec.params,
            behavior=spec.role,
            mode=mode,
            signals=SignalSet(leader=leader),
            long_ref=leader,
            lat_ref=leader,
        )
        roles[spec.id] = VehicleRole(spec.role, leader)
    return WorldView(dict(sorted(vehicles.items())), dict(sorted(roles.items())), sc.tolerances)


def _settled(world: WorldView, sc: Scenario) -> bool:
    tol = sc.settle_tolerance * sc.d
    for vid, role in world.roles.items():
        v = world.vehicles[vid]
        if role.kind == JOINER:
            return False
        if role.kind == FOLLOWER:
            L = world.vehicles[role.current_leader]
            if abs(L.rear - v.long - sc.d) > tol or abs(L.v_long - v.v_long) > 0.05:
                return False
            if abs(v.lat - L.lane * LANE_WIDTH) > sc.lat_tolerance:
                return False
    return True


def run_scenario(sc: Scenario) -> tuple[list[TraceRecord], MetricsSummary]:
    sc.validate()
    world = _initial_world(sc)
    env = platoon_env()
    joiners = [vid for vid, r in world.roles.items() if r.kind == JOINER]
    sys = make_system([(vid, Call(ROLE_ENTRY[r.kind])) for vid, r in world.roles.items()])

    def rebroadcast(owner: int) -> bool:
        dec = world.decisions.get(owner)
        return world.roles[owner].kind == JOINER and not (dec and dec.decided)

    runtime = Runtime(env, make_handler(world), seed=sc.seed, rebroadcast=rebroadcast)
    ts, n_sub, dt = sc.sampling_period, sc.substeps, sc.dynamics_dt
    trace: list[TraceRecord] = []
    metrics = MetricsSummary(joiners=len(joiners))
    n_ticks = int(round(sc.max_duration / ts))

    for k in range(n_ticks):
        t = k * ts
        world.time = t
        world.events = []
        sys, report = runtime.tick(sys, _in_range(world.vehicles, sc.broadcast_range))

        for owner, name in report.unfolds():
            role = world.roles[owner]
            if name == "Follower" and role.kind == JOINER:
                role.kind = FOLLOWER
                v = world.vehicles[owner]
                world.vehicles[owner] = become_follower(
                    replace(v, signals=SignalSet(leader=role.current_leader, prev_leader=role.previous_leader))
                )
                world.emit(f"role:{owner}:{FOLLOWER}")
                metrics.merge_times[owner] = t
                rec = world.merges.get(owner)
                if rec is not None:
                    rec.completed_at = t
                    world.reservations.pop(rec.follower, None)

        for vid in list(world.vehicles):
            role = world.roles[vid]
            got = world.pulses.get(vid, set())
            pulses = SignalSet(
                align_start="align_start" in got,
                merge_start="merge_start" in got,
                merge_done="merge_done" in got,
                leader=role.current_leader,
                prev_leader=role.previous_leader,
            )
            v, out = ha_step(world.vehicles[vid], pulses, world.vehicles, ts, world.tol)
            world.vehicles[vid] = v
            if out.align_done:
                world.align_latch.add(vid)
                world.emit(f"align_done:{vid}")
            if out.merge_done:
                world.merge_latch.add(vid)
                world.emit(f"merge_done:{vid}")
        world.pulses.clear()

        min_gap = math.inf
        for _ in range(n_sub):
            world.vehicles = {
                vid: flow(v, v.mode, Commands(v.accel, v.lat_target), dt) for vid, v in world.vehicles.items()
            }
            gaps = same_lane_gaps(world.vehicles)
            if gaps:
                min_gap = min(min_gap, min(g for _, _, g in gaps))

        rows = tuple(
            VehicleRow(vid, v.long, v.lat, v.v_long, world.roles[vid].kind, v.mode,
                       world.roles[vid].current_leader, world.roles[vid].previous_leader)
            for vid, v in world.vehicles.items()
        )
        trace.append(TraceRecord(k, t, rows, tuple(world.events), tuple(map(describe_step, report.steps_taken)), min_gap))
        metrics.min_gap = min(metrics.min_gap, min_gap)
        metrics.duration = t + ts
        if joiners and _settled(world, sc):
            break

    metrics.merges_completed = len(metrics.merge_times)
    metrics.deadlock_flag = metrics.merges_completed < len(joiners)
    final = [g for _, _, g in same_lane_gaps(world.vehicles)]
    metrics.final_gaps = final
    metrics.final_gap_rms = math.sqrt(sum((g - sc.d) ** 2 for g in final) / len(final)) if final else 0.0
    for j, rec in sorted(world.merges.items()):
        metrics.merges.append(
            {
                "joiner": rec.joiner,
                "follower": rec.follower,
                "old_leader": rec.old_leader,
                "gap_at_merge_start": None if rec.gap_at_merge_start is None else round(rec.gap_at_merge_start, 6),
                "joiner_length": world.vehicles[j].params.length,
                "completed_at": None if rec.completed_at is None else round(rec.completed_at, 6),
            }
        )
    return trace, metrics


# ---------------------------------------------------------------- trace analysis


def read_trace(src) -> list[TraceRecord]:
    """Parse a CSV trace written by :func:`write_trace`."""
    rows = list(csv.reader(src))
    if not rows:
        raise ConfigError("empty trace")
    header = rows[0]
    if header[:2] != ["tick", "time"] or header[-3:] != ["events", "reactions", "min_gap"]:
        raise ConfigError("not a trace file: unexpected header")
    ids = [int(c[1:-5]) for c in header[2:-3:7]]
    if trace_header(ids) != header:
        raise ConfigError("not a trace file: unexpected header")
    opt = lambda s: int(s) if s else None  # noqa: E731
    out = []
    for line, row in enumerate(rows[1:], start=2):
        if len(row) != len(header):
            raise ConfigError(f"trace line {line}: expected {len(header)} fields, got {len(row)}")
        vehicles = []
        for k, vid in enumerate(ids):
            f = row[2 + 7 * k: 9 + 7 * k]
            vehicles.append(VehicleRow(vid, float(f[0]), float(f[1]), float(f[2]), f[3], f[4], opt(f[5]), opt(f[6])))
        split = lambda s: tuple(s.split(";")) if s else ()  # noqa: E731
        out.append(
            TraceRecord(int(row[0]), float(row[1]), tuple(vehicles), split(row[-3]), split(row[-2]), float(row[-1]))
        )
    return out


def metrics_from_trace(trace: list[TraceRecord]) -> MetricsSummary:
    """Metrics recoverable from a trace alone (no vehicle lengths)."""
    m = MetricsSummary()
    for rec in trace:
        m.min_gap = min(m.min_gap, rec.min_gap)
        for ev in rec.events:
            parts = ev.split(":")
            if parts[0] == "role" and parts[2] == FOLLOWER:
                m.merge_times[int(parts[1])] = rec.time
    if trace:
        m.joiners = sum(1 for v in trace[0].vehicles if v.role == JOINER)
        m.duration = trace[-1].time + (trace[1].time - trace[0].time if len(trace) > 1 else 0.0)
    m.merges_completed = len(m.merge_times)
    m.deadlock_flag = m.merges_completed < m.joiners
    return m


def safety_violations(trace: list[TraceRecord], d: float) -> list[str]:
    out = []
    for rec in trace:
        if rec.min_gap < 0:
            out.append(f"tick {rec.tick}: vehicles overlap (gap {rec.min_gap:.3f} m)")
        elif rec.min_gap < 0.5 * d:
            out.append(f"tick {rec.tick}: gap {rec.min_gap:.3f} m below 0.5*d")
    return out


# (trace time, position among that tick's events): the trace keeps events in
# the order they happened, so several milestones may share one tick
Stamp = tuple[float, int]


@dataclass
class MergeEvents:
    joiner: int
    follower: int | None = None
    join_ok: Stamp | None = None
    set_ldr: Stamp | None = None
    align_done_joiner: Stamp | None = None
    align_done_follower: Stamp | None = None
    merge_start: Stamp | None = None
    merge_done: Stamp | None = None

    def ordered(self) -> bool:
        seq = [self.join_ok, self.set_ldr, self.align_done_joiner, self.merge_start, self.merge_done]
        if any(t is None for t in seq) or self.align_done_follower is None:
            return False
        strict = all(a < b for a, b in zip(seq, seq[1:]))
        return strict and self.align_done_joiner <= self.align_done_follower < self.merge_start


def merge_events(trace: list[TraceRecord]) -> dict[int, MergeEvents]:
    """First occurrence of each protocol milestone, per joiner.

    ``set_ldr`` is the joiner's own update to the follower's old leader.
    """
    out: dict[int, MergeEvents] = {}
    first = lambda cur, t: t if cur is None else cur  # noqa: E731
    for rec in trace:
        for k, ev in enumerate(rec.events):
            t = (rec.time, k)
            p = ev.split(":")
            vid = int(p[1]) if len(p) > 1 and p[1].isdigit() else None
            if p[0] == "join_ok" and p[3] == "True":
                m = out.setdefault(vid, MergeEvents(vid))
                m.follower, m.join_ok = int(p[2]), first(m.join_ok, t)
                continue
            if vid in out:
                m = out[vid]
                if p[0] == "set_ldr" and m.join_ok is not None:
                    m.set_ldr = first(m.set_ldr, t)
                elif p[0] == "align_done":
                    m.align_done_joiner = first(m.align_done_joiner, t)
                elif p[0] == "merge_start":
                    m.merge_start = first(m.merge_start, t)
                elif p[0] == "merge_done":
                    m.merge_done = first(m.merge_done, t)
            for m in out.values():
                if p[0] == "align_done" and vid == m.follower and m.align_done_joiner is not None:
                    m.align_done_follower = first(m.align_done_follower, t)
    return out
