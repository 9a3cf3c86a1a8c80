from pathlib import Path

from piplatoon.calculus import (
    FALSE,
    TRUE,
    Call,
    Name,
    Nil,
    Prefix,
    Receive,
    Replicate,
    Send,
    components,
    make_system,
)
from piplatoon.dynamics import FOLLOWER, JOINER, LEADER, VehicleParams, VehicleState
from piplatoon.protocol import (
    VehicleRole,
    WorldView,
    handle_interface,
    join_decision,
    joiner_program,
    platoon_env,
    vehicle_name,
)
from piplatoon.runtime import Completed, InterfaceRequest, Pending, Rejected, Runtime
from piplatoon.sim import load_scenario, run_scenario

SCEN = Path(__file__).parents[1] / "src" / "piplatoon" / "scenarios"
ENV = platoon_env()
A, B, C = 1, 2, 3


def world(joiner_long=85.5, extra=()):
    p = VehicleParams()
    vs = {
        A: VehicleState(A, 100.0, 0.0, 20.0, p, LEADER),
        B: VehicleState(B, 85.5, 0.0, 20.0, p, FOLLOWER),
        C: VehicleState(C, joiner_long, 3.5, 20.0, p, JOINER),
    }
    roles = {A: VehicleRole(LEADER), B: VehicleRole(FOLLOWER, A), C: VehicleRole(JOINER)}
    for v, r in extra:
        vs[v.id] = v
        roles[v.id] = r
    return WorldView(vs, roles)


def ask(w, owner, label, args=(), binders=()):
    return handle_interface(InterfaceRequest(owner, label, args, binders), w.vehicles[owner], w)


def test_get_ldr_and_get_id():
    w = world()
    assert ask(w, B, "get_ldr", binders=(Name.chan("l"),)) == Completed((vehicle_name(A),))
    assert ask(w, B, "get_id", binders=(Name.chan("i"),)) == Completed((vehicle_name(B),))
    assert isinstance(ask(w, A, "get_ldr"), Rejected)


def test_check_join_on_b_is_positive():
    w = world()
    assert ask(w, C, "check_join", (vehicle_name(B),), (Name.chan("ok"),)) == Completed((TRUE,))


def test_join_ok_replies_on_channel():
    w = world()
    z = Name.chan("z")
    out = ask(w, C, "join_ok", (z, vehicle_name(B)))
    assert out == Completed((), (Prefix(Send(z, (TRUE,))),))
    assert w.merges[C].follower == B and w.merges[C].old_leader == A


def test_join_decision_policy():
    w = world()
    assert join_decision(w.vehicles[C], B, w)
    # decided latch
    assert not join_decision(w.vehicles[C], B, w)
    # tie on distance goes to the lower id
    p = VehicleParams()
    d = VehicleState(4, 85.5 - 29.0, 0.0, 20.0, p, FOLLOWER)
    w2 = world(joiner_long=85.5 - 14.5, extra=[(d, VehicleRole(FOLLOWER, B))])
    assert not join_decision(w2.vehicles[C], 4, w2)
    assert join_decision(w2.vehicles[C], B, w2)


def test_reserved_follower_not_offered_twice():
    p = VehicleParams()
    other = VehicleState(5, 85.5, 7.0, 20.0, p, JOINER)
    w = world(extra=[(other, VehicleRole(JOINER))])
    assert join_decision(w.vehicles[C], B, w)
    assert not join_decision(w.vehicles[5], B, w)


def test_waits_are_pending_until_latched():
    w = world()
    assert ask(w, C, "align_done") == Pending()
    w.align_latch.add(C)
    assert ask(w, C, "align_done") == Completed()
    assert C not in w.align_latch
    assert ask(w, C, "merge_done") == Pending()
    # a Follower's merge_done is a signal to its own automaton
    assert ask(w, B, "merge_done") == Completed()
    assert "merge_done" in w.pulses[B]


def test_set_ldr_updates_leader_pair():
    w = world()
    assert ask(w, B, "set_ldr", (vehicle_name(C),)) == Completed()
    assert (w.roles[B].current_leader, w.roles[B].previous_leader) == (C, A)
    assert isinstance(ask(w, B, "set_ldr", (Name.chan("junk"),)), Rejected)


def test_unknown_label_rejected():
    assert isinstance(ask(world(), A, "fly"), Rejected)


# ---------------------------------------------------------------- programs


class Scripted:
    def __init__(self, answers):
        self.answers = answers
        self.seen = []

    def __call__(self, req):
        self.seen.append(req)
        ans = self.answers.get(req.label, Completed())
        return ans(req) if callable(ans) else ans


def test_leader_program_runs_drive_each_tick():
    h = Scripted({})
    rt = Runtime(ENV, h)
    sys = make_system([(A, Call("Leader"))])
    for _ in range(3):
        sys, _ = rt.tick(sys)
    assert [r.label for r in h.seen] == ["drive"] * 3


def test_follower_session_false_terminates():
    y = Name.chan("y")
    sys = make_system([(B, Call("Respond", (y, FALSE)))])
    rt = Runtime(ENV, Scripted({}))
    sys, _ = rt.tick(sys)
    assert sys.term(B) == Nil()


def test_follower_session_true_sends_leader_then_aligns():
    y = Name.chan("y")
    joiner = Name.const(C)
    h = Scripted({"get_ldr": Completed((vehicle_name(A),)), "align_done": Pending()})
    rt = Runtime(ENV, h)
    # the joiner side: receive the leader, later answer with its id
    sys = make_system(
        [
            (B, Call("Respond", (y, TRUE))),
            (C, Prefix(Receive(y, (Name.chan("l"),)), Prefix(Send(y, (joiner,))))),
        ]
    )
    rt.tick(sys)
    labels = [r.label for r in h.seen]
    assert labels[:3] == ["get_ldr", "set_ldr", "align_start"]
    set_ldr = h.seen[1]
    assert set_ldr.args == (joiner,)


def test_follower_wait_emits_merge_done():
    y = Name.chan("y")
    h = Scripted({})
    sys = make_system([(B, Call("Wait", (y,))), (C, Prefix(Send(y, ())))])
    sys, _ = Runtime(ENV, h).tick(sys)
    assert [r.label for r in h.seen] == ["merge_done"]


def test_joiner_listen_asks_join_ok_and_false_ends_session():
    x, y = Name.chan("x"), Name.chan("y")
    h = Scripted({"join_ok": lambda req: Completed((), (Prefix(Send(req.args[0], (FALSE,))),))})
    sys = make_system(
        [
            (C, Replicate(Call("Listen", (x,)))),
            (B, Prefix(Send(x, (y,)), Prefix(Send(y, (vehicle_name(B),)), Prefix(Receive(y, (Name.chan("f"),)))))),
        ]
    )
    sys, _ = Runtime(ENV, h).tick(sys)
    (req,) = [r for r in h.seen if r.label == "join_ok"]
    assert req.args[1] == vehicle_name(B) and req.args[0].is_fresh
    assert sys.term(B) == Nil()  # got its False
    assert components(sys.term(C)) == [Replicate(Call("Listen", (x,)))]


def test_joiner_happy_path_ends_as_follower():
    sc = load_scenario(SCEN / "fig4.json")
    trace, m = run_scenario(sc)
    assert m.merges_completed == 1
    last = {v.id: v for v in trace[-1].vehicles}
    assert last[4].role == FOLLOWER
    assert "u4:Follower" in [r for rec in trace for r in rec.reactions]


def test_joiner_program_depends_on_follower():
    env = joiner_program()
    assert "Follower" not in env and "Merge" in env


def test_merge_leader_chain_and_role_monotonicity():
    sc = load_scenario(SCEN / "homogeneous.json")
    trace, m = run_scenario(sc)
    last = {v.id: v for v in trace[-1].vehicles}
    for rec in m.merges:
        j, f, old = rec["joiner"], rec["follower"], rec["old_leader"]
        assert last[j].leader == old
        assert last[f].leader == j
    roles = {v.id: v.role for v in trace[0].vehicles}
    for rec in trace:
        for v in rec.vehicles:
            if v.role != roles[v.id]:
                assert (roles[v.id], v.role) == (JOINER, FOLLOWER)
                roles[v.id] = v.role
    # at most one True per joiner
    trues = [e for rec in trace for e in rec.events if e.startswith("join_ok") and e.endswith("True")]
    assert len(trues) == len({e.split(":")[1] for e in trues}) == 4
