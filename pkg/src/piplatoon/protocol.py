"""Leader/Follower/Joiner programs and the vehicle side of the interface actions."""

from __future__ import annotations

from dataclasses import dataclass, field
from importlib import resources

from .calculus import FALSE, TRUE, Call, Definition, Name, Prefix, Send
from .dsl import parse
from .dynamics import FOLLOWER, JOINER, LEADER, Tolerances, VehicleState, gap_long
from .runtime import Completed, InterfaceOutcome, InterfaceRequest, Pending, Rejected

CORPUS_FILES = ("leader.pic", "follower.pic", "joiner.pic")
ROLE_ENTRY = {LEADER: "Leader", FOLLOWER: "Follower", JOINER: "Joiner"}


def corpus_text(filename: str) -> str:
    return resources.files("piplatoon.corpus").joinpath(filename).read_text()


def _load(filename: str, base: dict[str, Definition]) -> dict[str, Definition]:
    env, _ = parse(corpus_text(filename), base)
    return env


def leader_program() -> dict[str, Definition]:
    return _load("leader.pic", {})


def follower_program() -> dict[str, Definition]:
    return _load("follower.pic", {})


def joiner_program() -> dict[str, Definition]:
    """Joiner definitions; the final continuation calls into the Follower program."""
    return _load("joiner.pic", follower_program())


def platoon_env() -> dict[str, Definition]:
    return {**leader_program(), **follower_program(), **joiner_program()}


def vehicle_name(vid: int) -> Name:
    return Name.const(vid)


@dataclass
class VehicleRole:
    kind: str
    current_leader: int | None = None
    previous_leader: int | None = None

    def __post_init__(self):
        if self.kind == LEADER and self.current_leader is not None:
            raise ValueError("a Leader has no leader")


@dataclass
class JoinDecision:
    target_follower_id: int | None = None
    decided: bool = False


@dataclass
class MergeRecord:
    joiner: int
    follower: int
    old_leader: int | None
    gap_at_merge_start: float | None = None
    completed_at: float | None = None


@dataclass
class WorldView:
    """Everything the interface handlers may read or update during a tick."""

    vehicles: dict[int, VehicleState]
    roles: dict[int, VehicleRole]
    tol: Tolerances = Tolerances()
    time: float = 0.0
    decisions: dict[int, JoinDecision] = field(default_factory=dict)
    reservations: dict[int, int] = field(default_factory=dict)  # follower -> joiner
    pulses: dict[int, set[str]] = field(default_factory=dict)
    align_latch: set[int] = field(default_factory=set)
    merge_latch: set[int] = field(default_factory=set)
    events: list[str] = field(default_factory=list)
    merges: dict[int, MergeRecord] = field(default_factory=dict)

    def pulse(self, vid: int, label: str) -> None:
        self.pulses.setdefault(vid, set()).add(label)

    def emit(self, text: str) -> None:
        self.events.append(text)

    def set_leader(self, vid: int, new: int) -> None:
        role = self.roles[vid]
        role.previous_leader, role.current_leader = role.current_leader, new


def _as_id(n: Name, world: WorldView) -> int | None:
    return n.key if isinstance(n.key, int) and n.key in world.vehicles else None


def join_decision(self_state: VehicleState, candidate_id: int, world: WorldView) -> bool:
    """Whether the joiner should merge in front of ``candidate_id``.

    The chosen follower is the unreserved platoon member with a predecessor
    whose longitudinal position is nearest to the joiner (ties to the lower
    id).  Once a joiner has said yes it says no to everyone else.
    """
    decision = world.decisions.setdefault(self_state.id, JoinDecision())
    if decision.decided:
        return False
    members = [
        vid
        for vid, role in world.roles.items()
        if role.kind == FOLLOWER and role.current_leader is not None
        and world.reservations.get(vid, self_state.id) == self_state.id
    ]
    if candidate_id not in members:
        return False
    best = min(members, key=lambda vid: (abs(world.vehicles[vid].long - self_state.long), vid))
    if best != candidate_id:
        return False
    decision.target_follower_id = candidate_id
    decision.decided = True
    world.reservations[candidate_id] = self_state.id
    return True


def handle_interface(request: InterfaceRequest, vehicle: VehicleState, world: WorldView) -> InterfaceOutcome:
    vid, label = vehicle.id, request.label
    role = world.roles[vid]

    if label == "get_id":
        return Completed((vehicle_name(vid),))

    if label == "get_ldr":
        if role.current_leader is None:
            return Rejected("no leader")
        return Completed((vehicle_name(role.current_leader),))

    if label == "set_ldr":
        new = _as_id(request.args[0], world) if request.args else None
        if new is None or new == vid:
            return Rejected(f"unknown leader {request.args[0] if request.args else None}")
        if vehicle.align_armed:
            return Rejected("alignment in progress")
        world.set_leader(vid, new)
        world.emit(f"set_ldr:{vid}:{new}")
        return Completed()

    if label in ("drive", "keep_dist"):
        return Completed()

    if label in ("join_ok", "check_join"):
        chan = request.args[0] if label == "join_ok" else None
        target = request.args[-1]
        cid = _as_id(target, world)
        ok = cid is not None and join_decision(vehicle, cid, world)
        world.emit(f"join_ok:{vid}:{target}:{ok}")
        if ok:
            world.merges[vid] = MergeRecord(vid, cid, world.roles[cid].current_leader)
        answer = TRUE if ok else FALSE
        if chan is None:
            return Completed((answer,)) if request.reply_binders else Completed()
        return Completed((), (Prefix(Send(chan, (answer,))),))

    if label == "align_start":
        if role.current_leader is None:
            return Rejected("no leader set")
        world.pulse(vid, "align_start")
        world.emit(f"align_start:{vid}")
        return Completed()

    if label == "align_done":
        if vid in world.align_latch:
            world.align_latch.discard(vid)
            return Completed()
        return Pending()

    if label == "merge_start":
        world.pulse(vid, "merge_start")
        world.emit(f"merge_start:{vid}")
        rec = world.merges.get(vid)
        if rec is not None and rec.old_leader is not None:
            rec.gap_at_merge_start = gap_long(world.vehicles, rec.follower, rec.old_leader)
        return Completed()

    if label == "merge_done":
        if role.kind == JOINER:
            if vid in world.merge_latch:
                world.merge_latch.discard(vid)
                return Completed()
            return Pending()
        # a Follower signalling its automaton that the joiner has merged
        world.pulse(vid, "merge_done")
        world.emit(f"merge_signal:{vid}")
        return Completed()

    return Rejected(f"unknown interface action {label!r}")


def make_handler(world: WorldView):
    def handler(request: InterfaceRequest) -> InterfaceOutcome:
        return handle_interface(request, world.vehicles[request.owner], world)

    return handler


def entry_call(role: str) -> Call:
    return Call(ROLE_ENTRY[role])
