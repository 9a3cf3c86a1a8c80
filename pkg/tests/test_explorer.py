import random

import pytest

from explorer_oracle import StateSet, enumerate_states, state_graph
from piplatoon.calculus import CHANNEL, Name, SystemTerm, free_names, substitute
from piplatoon.dynamics import FOLLOWER
from piplatoon.explorer import (
    Bounds,
    CorruptTrace,
    Explorer,
    Move,
    canonical_key,
    delete_reply,
    explore,
    initial_state,
    joined_goal,
    parse_owners,
    replay,
)
from piplatoon.protocol import platoon_env

ENV = platoon_env()


def run(spec, env=ENV, **kw):
    init = initial_state(parse_owners(spec), env)
    return init, explore(init, env, joined_goal(init), Bounds(**kw))


def all_states(spec, env=ENV):
    init = initial_state(parse_owners(spec), env)
    ex = Explorer(env, len(init.sys.participants))
    seen, todo = {init.key: init}, [init]
    while todo:
        for _, nxt in ex.successors(todo.pop()):
            if nxt.key not in seen:
                seen[nxt.key] = nxt
                todo.append(nxt)
    return list(seen.values())


@pytest.mark.parametrize("spec", ["L,F,J", "L,F,F,J"])
def test_agrees_with_oracle(spec):
    _, res = run(spec)
    ref = enumerate_states(ENV, parse_owners(spec))
    assert not res.truncated
    assert res.states_visited == ref.states
    assert len(res.deadlocks) == ref.deadlocks == 0
    assert res.goal_reached == ref.goal_reached is True


def test_mutation_agrees_with_oracle():
    env = delete_reply(ENV)
    _, res = run("L,F,F,J", env)
    ref = enumerate_states(env, parse_owners("L,F,F,J"))
    assert (res.states_visited, len(res.deadlocks), res.goal_reached) == (ref.states, ref.deadlocks, ref.goal_reached)


def test_four_owner_summary():
    _, res = run("L,F,F,J")
    assert res.summary() == "goal reached, 0 deadlocks, 302 states"
    # join_ok may always answer False, so joining is reachable but not forced
    assert res.goal_inevitable is False


def test_leader_alone():
    init, res = run("L")
    assert res.states_visited == 1 and not res.deadlocks
    assert res.goal_reached and res.goal_inevitable


def test_no_followers_is_not_an_error():
    _, res = run("L,J")
    assert res.states_visited == 2
    assert not res.deadlocks and not res.goal_reached and not res.truncated


def test_mutation_deadlock_trace_replays():
    env = delete_reply(ENV)
    init, res = run("L,F,F,J", env)
    assert res.deadlocks
    state, trace = res.deadlocks[0]
    assert trace
    path = replay(init, env, trace)
    assert path[-1].key == state.key
    assert Explorer(env, 4).is_deadlock(path[-1])
    assert Explorer(env, 4).successors(path[-1]) == []


def test_goal_trace_replays_to_goal():
    init, res = run("L,F,F,J")
    path = replay(init, ENV, res.goal_trace)
    assert path[-1].book.role(4) == FOLLOWER
    assert any(m.kind == "tau" and m.choice == "True" for m in res.goal_trace)


def test_empty_replay_and_corrupt_trace():
    init = initial_state(parse_owners("L,F,J"), ENV)
    assert replay(init, ENV, []) == [init]
    with pytest.raises(CorruptTrace):
        replay(init, ENV, [Move("comm", ((9, 0, 0), (1, 0, 0)))])


def _rename_fresh(sys: SystemTerm, rng) -> SystemTerm:
    fresh = sorted({n for _, t in sys.participants for n in free_names(t) if n.is_fresh}, key=str)
    counters = rng.sample(range(1000, 2000), len(fresh))
    m = {n: Name(CHANNEL, ("#", k, n.creator), f"r{k}") for n, k in zip(fresh, counters)}
    return SystemTerm(tuple((o, substitute(t, m)) for o, t in sys.participants))


def test_canonical_key_ignores_fresh_renaming():
    rng = random.Random(7)
    states = all_states("L,F,F,J")
    for s in rng.sample(states, 60):
        renamed = _rename_fresh(s.sys, rng)
        assert canonical_key(renamed, s.book) == s.key


def test_distinct_keys_are_not_isomorphic():
    # canonical keys never merge states the oracle considers different
    from explorer_oracle import Abs

    states = all_states("L,F,J")
    store = StateSet()
    for s in states:
        b = s.book
        ab = Abs(frozenset(b.roles), frozenset(b.leaders), frozenset(b.decided),
                 frozenset(b.armed), frozenset(b.fired))
        assert store.add(state_graph(s.sys, ab))
    assert store.count == len(states) == 26


def test_bounds_truncate_and_are_monotone():
    sizes = []
    for cap in (10, 50, 200, 100_000):
        _, res = run("L,F,F,J", max_states=cap)
        sizes.append(res.states_visited)
        assert res.states_visited <= cap
        assert res.truncated == (cap < 302)
        if res.truncated:
            assert "lower bound" in res.summary()
            assert res.goal_inevitable is None
    assert sizes == sorted(sizes) and sizes[-1] == 302
    _, shallow = run("L,F,F,J", max_depth=3)
    assert shallow.truncated and shallow.states_visited < 302


def test_bad_inputs():
    with pytest.raises(ValueError):
        parse_owners("L,X")
    with pytest.raises(ValueError):
        run("L,F", max_states=0)
