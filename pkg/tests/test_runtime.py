import pytest

from piplatoon.calculus import (
    Call,
    Communication,
    Definition,
    Name,
    Nil,
    Prefix,
    Receive,
    Replicate,
    Send,
    Unobservable,
    UnobservableStep,
    channel_topology,
    components,
    free_names,
    make_system,
)
from piplatoon.protocol import platoon_env
from piplatoon.runtime import (
    BudgetExceeded,
    Completed,
    HandlerMissing,
    Pending,
    Rejected,
    Runtime,
    replay_steps,
    tick,
)
from protohelpers import fig3_stages

ENV = platoon_env()


class Recorder:
    """Handler that completes everything, answering get_id/get_ldr symbolically."""

    def __init__(self, pending=(), reject=()):
        self.requests = []
        self.pending = set(pending)
        self.reject = set(reject)

    def __call__(self, req):
        self.requests.append(req)
        if req.label in self.pending:
            return Pending()
        if req.label in self.reject:
            return Rejected("test")
        if req.label in ("get_id", "get_ldr"):
            return Completed((Name.const(req.owner),))
        return Completed()


def labels(report):
    return [f.step.label for f in report.steps_taken if isinstance(f.step, UnobservableStep)]


def test_leader_tick():
    h = Recorder()
    rt = Runtime(ENV, h)
    sys = make_system([(1, Call("Leader"))])
    for _ in range(3):
        sys, rep = rt.tick(sys)
        assert labels(rep) == ["drive"]
        assert rep.unfolds() == [(1, "Leader")]
        assert rep.quiescent
    assert [r.label for r in h.requests] == ["drive"] * 3
    assert channel_topology(sys) == {}


def test_leader_budget_one_still_quiescent():
    rt = Runtime(ENV, Recorder(), budget=2)
    sys = make_system([(1, Call("Leader"))])
    sys, rep = rt.tick(sys)
    sys, rep = rt.tick(sys)
    assert rep.quiescent


def test_follower_alone_keeps_distance():
    rt = Runtime(ENV, Recorder())
    sys = make_system([(2, Call("Follower"))])
    sys, rep = rt.tick(sys)
    assert labels(rep) == ["keep_dist"]
    assert any(isinstance(c, Replicate) for c in components(sys.term(2)))
    sys, rep = rt.tick(sys)
    assert labels(rep) == ["keep_dist"]


def test_broadcast_to_three_followers_gives_distinct_channels():
    h = Recorder(pending={"get_id"})
    rt = Runtime(ENV, h)
    sys = make_system([(k, Call("Follower")) for k in (1, 2, 3)] + [(4, Call("Joiner"))])
    # first tick lets the followers reach Cooperate; the joiner re-broadcasts after that
    rt.rebroadcast = lambda owner: owner == 4
    rt.rebroadcast_period = 1
    for _ in range(3):
        sys, rep = rt.tick(sys)
    sessions = [c for c in components(sys.term(4)) if not isinstance(c, Replicate)]
    ys = set()
    for s in sessions:
        ys |= {n for n in free_names(s) if n.is_fresh and n.creator != 4}
    creators = {n.creator for n in ys}
    assert creators == {1, 2, 3}
    assert len(ys) >= 3


def test_sampling_rule_one_unfold_per_definition():
    loop = {"Spin": Definition((), Call("Spin"))}
    rt = Runtime(loop, Recorder())
    sys, rep = rt.tick(make_system([(1, Call("Spin"))]))
    assert rep.unfolds() == [(1, "Spin")]
    assert rep.quiescent


def test_budget_exceeded_on_livelock():
    x = Name.chan("x")
    env = {
        "Ping": Definition((), Prefix(Send(x, ()), Call("Pong"))),
        "Pong": Definition((), Prefix(Send(x, ()), Call("Ping"))),
        "Sink": Definition((), Prefix(Receive(x, ()), Call("Sink2"))),
        "Sink2": Definition((), Prefix(Receive(x, ()), Call("Sink"))),
    }
    sys = make_system([(1, Call("Ping")), (2, Call("Sink"))])
    with pytest.raises(BudgetExceeded):
        Runtime(env, Recorder(), budget=3).tick(sys)
    Runtime(env, Recorder(), budget=4).tick(sys)  # each definition unfolds once per tick
    many = {f"D{k}": Definition((), Prefix(Unobservable("drive"), Call(f"D{k+1}"))) for k in range(10)}
    many["D10"] = Definition((), Call("D0"))
    with pytest.raises(BudgetExceeded):
        Runtime(many, Recorder(), budget=5).tick(make_system([(1, Call("D0"))]))


def test_pending_request_repolled_next_tick():
    h = Recorder(pending={"align_done"})
    env = {"W": Definition((), Prefix(Unobservable("align_done"), Prefix(Unobservable("drive"))))}
    rt = Runtime(env, h)
    sys = make_system([(1, Call("W"))])
    sys, rep = rt.tick(sys)
    assert [r.label for r in rep.pending_requests] == ["align_done"]
    h.pending.clear()
    sys, rep = rt.tick(sys)
    assert labels(rep) == ["align_done", "drive"]


def test_rejected_request_discards_branch():
    env = {"G": Definition((), Prefix(Unobservable("get_ldr", (), (Name.chan("l"),)), Prefix(Unobservable("drive"))))}
    rt = Runtime(env, Recorder(reject={"get_ldr"}))
    sys, rep = rt.tick(make_system([(1, Call("G"))]))
    assert rep.steps_taken[-1].rejected
    assert labels(rep) == ["get_ldr"]
    assert sys.term(1) == Nil()


def test_missing_handler():
    rt = Runtime(ENV, {2: Recorder()})
    with pytest.raises(HandlerMissing):
        rt.tick(make_system([(1, Call("Leader"))]))


def test_determinism_and_replay():
    def run(seed):
        rt = Runtime(ENV, Recorder(pending={"align_done"}), seed=seed)
        rt.rebroadcast = lambda o: o == 4
        sys = make_system([(1, Call("Leader")), (2, Call("Follower")), (3, Call("Follower")), (4, Call("Joiner"))])
        reports, states = [], [sys]
        for _ in range(12):
            sys, rep = rt.tick(sys)
            reports.append(rep)
            states.append(sys)
        return reports, states

    r1, s1 = run(5)
    r2, s2 = run(5)
    assert [[f.step for f in r.steps_taken] for r in r1] == [[f.step for f in r.steps_taken] for r in r2]
    assert s1 == s2
    for k, rep in enumerate(r1):
        assert replay_steps(rep.start, ENV, rep.steps_taken) == s1[k + 1]
        per_owner = {}
        for o, name in rep.unfolds():
            assert (o, name) not in per_owner
            per_owner[(o, name)] = True


def test_no_cross_restriction_communication():
    # the replicated Cooperate server must never talk on another session's channel
    rt = Runtime(ENV, Recorder(pending={"align_done"}), seed=3)
    rt.rebroadcast = lambda o: o == 4
    sys = make_system([(1, Call("Leader")), (2, Call("Follower")), (3, Call("Follower")), (4, Call("Joiner"))])
    for _ in range(12):
        sys, rep = rt.tick(sys)
        for f in rep.steps_taken:
            st = f.step
            if isinstance(st, Communication) and st.chan.is_fresh:
                assert st.chan.creator in (st.sender_owner, st.receiver_owner)


def test_module_tick_wrapper():
    sys, rep = tick(make_system([(1, Call("Leader"))]), ENV, Recorder(), seed=1, tick_index=4)
    assert rep.tick_index == 4 and labels(rep) == ["drive"]


def test_fig3_topology_stages():
    during, after_coop, after_respond = fig3_stages()
    t1 = channel_topology(during)
    assert set(t1) == {frozenset({2, 4}), frozenset({3, 4})}
    assert t1[frozenset({2, 4})] == t1[frozenset({3, 4})]
    t2 = channel_topology(after_coop)
    assert set(t2) == {frozenset({2, 4}), frozenset({3, 4})}
    assert t2[frozenset({2, 4})].isdisjoint(t2[frozenset({3, 4})])
    assert set(channel_topology(after_respond)) == {frozenset({2, 4})}
