"""Bounded breadth-first exploration of the protocol layer.

Interface actions are abstracted: identifiers and leaders are tracked
symbolically, ``join_ok`` may answer either way (at most one yes per joiner),
and ``align_done``/``merge_done`` waits complete at any point after they are
armed.  Definition unfolding and match resolution are internal, deterministic
moves and are applied eagerly.

States are identified up to renaming of fresh channels: the canonical key is
the least rendering over all orderings of fresh names consistent with a
name-blind signature.
"""

from __future__ import annotations

import itertools
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Mapping

from .calculus import (
    CHANNEL,
    FALSE,
    TRUE,
    BroadcastReceive,
    BroadcastStep,
    Call,
    Communication,
    Definition,
    MatchStep,
    Name,
    Nil,
    Prefix,
    Receive,
    Replicate,
    Send,
    SystemTerm,
    UnfoldStep,
    UnobservableStep,
    apply_reaction,
    choice_operands,
    components,
    discard_guard,
    enabled_reactions,
    free_names_ordered,
    make_system,
    normal_form,
    substitute,
    term_key,
    unfold_call,
    Unobservable,
    _expose,
)
from .dynamics import FOLLOWER, JOINER, LEADER

IDLE_LABELS = frozenset({"drive", "keep_dist"})
ROLE_CODES = {"L": LEADER, "F": FOLLOWER, "J": JOINER}
_PLACEHOLDER = Name.const("?")


class CorruptTrace(ValueError):
    pass


@dataclass(frozen=True)
class Bounds:
    max_states: int = 100_000
    max_depth: int = 10_000
    replication: int | None = None  # default: number of owners


@dataclass(frozen=True)
class Book:
    """Symbolic bookkeeping for the abstract interface."""

    roles: tuple[tuple[int, str], ...]
    leaders: tuple[tuple[int, int | None], ...]
    decided: frozenset = frozenset()
    armed: frozenset = frozenset()  # (owner, "align" | "merge")
    fired: tuple[tuple[tuple[int, str], int], ...] = ()  # replicated-guard firings

    def role(self, owner: int) -> str:
        return dict(self.roles)[owner]

    def leader(self, owner: int) -> int | None:
        return dict(self.leaders)[owner]

    def with_role(self, owner: int, role: str) -> "Book":
        return _replace_book(self, roles=_set(self.roles, owner, role))

    def with_leader(self, owner: int, leader: int | None) -> "Book":
        return _replace_book(self, leaders=_set(self.leaders, owner, leader))


def _set(pairs, key, value):
    return tuple((k, value if k == key else v) for k, v in pairs)


def _replace_book(b: Book, **kw) -> Book:
    d = dict(roles=b.roles, leaders=b.leaders, decided=b.decided, armed=b.armed, fired=b.fired)
    d.update(kw)
    return Book(**d)


@dataclass(frozen=True)
class AbstractState:
    sys: SystemTerm = field(compare=False)
    book: Book = field(compare=False)
    key: tuple = ()

    def __hash__(self) -> int:
        return hash(self.key)


@dataclass(frozen=True)
class Move:
    """One explorer transition: the reaction class, its sites and the chosen outcome."""

    kind: str
    sites: tuple[tuple[int, int, int], ...]
    choice: str = ""

    def __str__(self) -> str:
        s = ",".join(f"{o}.{i}.{j}" for o, i, j in self.sites)
        return f"{self.kind}[{s}]{'=' + self.choice if self.choice else ''}"


@dataclass
class ExplorationResult:
    states_visited: int
    deadlocks: list[tuple[AbstractState, list[Move]]]
    goal_reached: bool
    truncated: bool
    goal_inevitable: bool | None = None
    goal_trace: list[Move] | None = None
    transitions: int = 0

    def summary(self) -> str:
        goal = "goal reached" if self.goal_reached else "goal not reached"
        text = f"{goal}, {len(self.deadlocks)} deadlocks, {self.states_visited} states"
        if self.truncated:
            text += " (truncated: lower bound only)"
        return text


# ---------------------------------------------------------------- setup


def parse_owners(spec: str) -> list[tuple[int, str]]:
    """``"L,F,F,J"`` -> [(1, Leader), (2, Follower), ...]."""
    out = []
    for k, code in enumerate(c.strip() for c in spec.split(",")):
        if code.upper() not in ROLE_CODES:
            raise ValueError(f"unknown role code {code!r} (use L, F or J)")
        out.append((k + 1, ROLE_CODES[code.upper()]))
    if not out:
        raise ValueError("empty owner spec")
    return out


def initial_state(owners: list[tuple[int, str]], env: Mapping[str, Definition]) -> AbstractState:
    from .protocol import ROLE_ENTRY

    platoon = [o for o, r in owners if r in (LEADER, FOLLOWER)]
    leaders = []
    for o, r in owners:
        if r == FOLLOWER:
            k = platoon.index(o)
            leaders.append((o, platoon[k - 1] if k > 0 else None))
        else:
            leaders.append((o, None))
    sys = make_system([(o, Call(ROLE_ENTRY[r])) for o, r in owners])
    book = Book(tuple(owners), tuple(leaders))
    return Explorer(env, len(owners)).close(sys, book)


def joined_goal(initial: AbstractState) -> Callable[[AbstractState], bool]:
    joiners = [o for o, r in initial.book.roles if r == JOINER]
    return lambda s: all(s.book.role(j) == FOLLOWER for j in joiners)


# ---------------------------------------------------------------- canonical keys


def _fresh_in(t) -> list[Name]:
    return [n for n in free_names_ordered(t) if n.is_fresh]


def canonical_key(sys: SystemTerm, book: Book) -> tuple:
    comps = {o: components(normal_form(t)) for o, t in sys.participants}
    fresh: dict[Name, list] = {}
    for o, cs in comps.items():
        for c in cs:
            names = _fresh_in(c)
            if not names:
                continue
            blind = term_key(substitute(c, {n: _PLACEHOLDER for n in names}))
            for pos, n in enumerate(names):
                fresh.setdefault(n, []).append((o, blind, pos))
    groups: dict[tuple, list[Name]] = {}
    for n, sig in fresh.items():
        groups.setdefault(tuple(sorted(sig)), []).append(n)
    ordered = [groups[k] for k in sorted(groups)]

    best = None
    for perm in itertools.product(*(itertools.permutations(g) for g in ordered)):
        flat = [n for grp in perm for n in grp]
        m = {n: Name(CHANNEL, ("c", i), f"c{i}") for i, n in enumerate(flat)}
        rendered = tuple((o, term_key(normal_form(substitute(t, m)))) for o, t in sys.participants)
        if best is None or rendered < best:
            best = rendered
    if best is None:
        best = tuple((o, term_key(normal_form(t))) for o, t in sys.participants)
    return best, book.roles, book.leaders, tuple(sorted(book.decided)), tuple(sorted(book.armed)), book.fired


# ---------------------------------------------------------------- explorer


def idle_definitions(env: Mapping[str, Definition]) -> frozenset[str]:
    """Definitions of the form ``D() = tau drive . D()`` (any idle label)."""
    out = set()
    for name, d in env.items():
        b = d.body
        if (
            not d.params
            and isinstance(b, Prefix)
            and isinstance(b.action, Unobservable)
            and b.action.label in IDLE_LABELS
            and b.cont == Call(name)
        ):
            out.add(name)
    return frozenset(out)


def component_idle(c, env, idle_defs) -> bool:
    if isinstance(c, Nil):
        return True
    if isinstance(c, Call):
        return c.def_name in idle_defs
    if isinstance(c, Prefix) and isinstance(c.action, Unobservable):
        return c.action.label in IDLE_LABELS
    if isinstance(c, Replicate):
        ops = _expose(c.body, env)
        return all(isinstance(op, Prefix) and isinstance(op.action, (Receive, BroadcastReceive)) for op in ops)
    return False


class Explorer:
    def __init__(self, env: Mapping[str, Definition], n_owners: int, bounds: Bounds = Bounds()):
        self.env = env
        self.bounds = bounds
        self.rep_bound = bounds.replication if bounds.replication is not None else n_owners
        self.idle_defs = idle_definitions(env)

    # internal moves
    def close(self, sys: SystemTerm, book: Book) -> AbstractState:
        while True:
            step = next(
                (
                    st
                    for st in enabled_reactions(sys, self.env)
                    if isinstance(st, MatchStep) or (isinstance(st, UnfoldStep) and st.def_name not in self.idle_defs)
                ),
                None,
            )
            if step is None:
                break
            if isinstance(step, UnfoldStep) and step.def_name == "Follower" and book.role(step.owner) == JOINER:
                book = book.with_role(step.owner, FOLLOWER)
            sys = apply_reaction(sys, step)
        return AbstractState(sys, book, canonical_key(sys, book))

    def is_deadlock(self, state: AbstractState) -> bool:
        return any(
            not component_idle(c, self.env, self.idle_defs)
            for _, t in state.sys.participants
            for c in components(t)
        )

    def _count_replicated(self, sys: SystemTerm, book: Book, sites) -> Book | None:
        fired = dict(book.fired)
        for o, i, _ in sites:
            c = components(sys.term(o))[i]
            if not isinstance(c, Replicate):
                continue
            names = _fresh_in(c)
            k = (o, term_key(substitute(c, {n: _PLACEHOLDER for n in names})))
            fired[k] = fired.get(k, 0) + 1
            if fired[k] > self.rep_bound:
                return None
        return _replace_book(book, fired=tuple(sorted(fired.items())))

    def _interface(self, book: Book, st: UnobservableStep):
        """Possible outcomes: (choice, values, replies, book') or (choice, None, None, book) for reject."""
        o, label, args = st.owner, st.label, st.args
        if label == "get_id":
            return [("", (Name.const(o),), (), book)]
        if label == "get_ldr":
            ldr = book.leader(o)
            if ldr is None:
                return [("reject", None, None, book)]
            return [("", (Name.const(ldr),), (), book)]
        if label == "set_ldr":
            n = args[0] if args else None
            if n is None or not isinstance(n.key, int) or n.key == o:
                return [("reject", None, None, book)]
            return [("", (), (), book.with_leader(o, n.key))]
        if label in ("join_ok", "check_join"):
            outs = []
            for ok in (True, False):
                if ok and o in book.decided:
                    continue
                b = _replace_book(book, decided=book.decided | {o}) if ok else book
                answer = TRUE if ok else FALSE
                if label == "join_ok":
                    outs.append((str(ok), (), (Prefix(Send(args[0], (answer,))),), b))
                else:
                    vals = (answer,) if st.binders else ()
                    outs.append((str(ok), vals, (), b))
            return outs
        if label in ("align_start", "merge_start"):
            tag = label.split("_")[0]
            return [("", (), (), _replace_book(book, armed=book.armed | {(o, tag)}))]
        if label in ("align_done", "merge_done"):
            tag = label.split("_")[0]
            if label == "merge_done" and book.role(o) != JOINER:
                return [("", (), (), book)]  # Follower signalling its automaton
            if (o, tag) not in book.armed:
                return []
            return [("", (), (), _replace_book(book, armed=book.armed - {(o, tag)}))]
        return [("reject", None, None, book)]

    def successors(self, state: AbstractState) -> list[tuple[Move, AbstractState]]:
        sys, book = state.sys, state.book
        out = []
        for st in enabled_reactions(sys, self.env):
            if isinstance(st, (UnfoldStep, MatchStep)):
                continue
            if isinstance(st, UnobservableStep):
                if st.label in IDLE_LABELS:
                    continue
                b0 = self._count_replicated(sys, book, st.sites)
                if b0 is None:
                    continue
                for choice, values, replies, b in self._interface(book, st):
                    b = _replace_book(b, fired=b0.fired)
                    if values is None:
                        nxt = discard_guard(sys, st.sites[0])
                    else:
                        nxt = apply_reaction(sys, st, values, replies)
                    out.append((Move("tau", st.sites, choice), self.close(nxt, b)))
                continue
            b = self._count_replicated(sys, book, st.sites)
            if b is None:
                continue
            kind = "comm" if isinstance(st, Communication) else "bcast"
            out.append((Move(kind, st.sites), self.close(apply_reaction(sys, st), b)))
        return out

    def step(self, state: AbstractState, move: Move) -> AbstractState:
        for mv, nxt in self.successors(state):
            if mv == move:
                return nxt
        raise CorruptTrace(f"move {move} not enabled")


def explore(
    initial: AbstractState,
    env: Mapping[str, Definition],
    goal: Callable[[AbstractState], bool] | None = None,
    bounds: Bounds = Bounds(),
) -> ExplorationResult:
    if bounds.max_states <= 0 or bounds.max_depth <= 0:
        raise ValueError("bounds must be positive")
    n_owners = len(initial.sys.participants)
    ex = Explorer(env, n_owners, bounds)
    goal = goal or (lambda s: False)

    parent: dict[tuple, tuple[tuple, Move] | None] = {initial.key: None}
    states: dict[tuple, AbstractState] = {initial.key: initial}
    edges: dict[tuple, list[tuple]] = {}
    depth = {initial.key: 0}
    frontier = deque([initial.key])
    deadlocks, truncated, n_trans = [], False, 0
    goal_key = initial.key if goal(initial) else None

    def trace_to(key) -> list[Move]:
        moves = []
        while parent[key] is not None:
            key, mv = parent[key]
            moves.append(mv)
        return moves[::-1]

    while frontier:
        key = frontier.popleft()
        s = states[key]
        if depth[key] >= bounds.max_depth:
            truncated = True
            continue
        succ = ex.successors(s)
        n_trans += len(succ)
        edges[key] = []
        if not succ and ex.is_deadlock(s):
            deadlocks.append((s, trace_to(key)))
        for mv, nxt in succ:
            edges[key].append(nxt.key)
            if nxt.key in states:
                continue
            if len(states) >= bounds.max_states:
                truncated = True
                continue
            states[nxt.key] = nxt
            parent[nxt.key] = (key, mv)
            depth[nxt.key] = depth[key] + 1
            if goal_key is None and goal(nxt):
                goal_key = nxt.key
            frontier.append(nxt.key)

    inevitable = None if truncated else _inevitable(initial.key, edges, lambda k: goal(states[k]))
    return ExplorationResult(
        states_visited=len(states),
        deadlocks=deadlocks,
        goal_reached=goal_key is not None,
        truncated=truncated,
        goal_inevitable=inevitable,
        goal_trace=trace_to(goal_key) if goal_key is not None else None,
        transitions=n_trans,
    )


def _inevitable(root, edges, is_goal) -> bool:
    """True iff every maximal path from ``root`` hits a goal state."""
    if is_goal(root):
        return True
    # a goal-free terminal state or a goal-free cycle refutes inevitability
    WHITE, GREY, BLACK = 0, 1, 2
    color: dict = {}
    stack = [(root, iter(edges.get(root, [])))]
    color[root] = GREY
    if not edges.get(root):
        return False
    while stack:
        node, it = stack[-1]
        nxt = next(it, None)
        if nxt is None:
            color[node] = BLACK
            stack.pop()
            continue
        if is_goal(nxt):
            continue
        c = color.get(nxt, WHITE)
        if c == GREY:
            return False
        if c == WHITE:
            if not edges.get(nxt):
                return False
            color[nxt] = GREY
            stack.append((nxt, iter(edges[nxt])))
    return True


def replay(initial: AbstractState, env: Mapping[str, Definition], trace: list[Move], bounds: Bounds = Bounds()) -> list[AbstractState]:
    ex = Explorer(env, len(initial.sys.participants), bounds)
    out = [initial]
    for mv in trace:
        out.append(ex.step(out[-1], mv))
    return out


# ---------------------------------------------------------------- mutation fixtures


def _drop_first_send(t, env, depth: int = 0):
    """Return ``t`` with its first Send prefix removed, inlining calls on the way."""
    if isinstance(t, Prefix):
        if isinstance(t.action, Send):
            return t.cont, True
        cont, done = _drop_first_send(t.cont, env, depth)
        return Prefix(t.action, cont), done
    if isinstance(t, Call) and depth < 4:
        body, done = _drop_first_send(unfold_call(t, env), env, depth + 1)
        return (body, True) if done else (t, False)
    from .calculus import Match

    if isinstance(t, Match):
        branches, done = [], False
        for lbl, b in t.branches:
            if not done:
                b, done = _drop_first_send(b, env, depth)
            branches.append((lbl, b))
        return Match(t.subject, tuple(branches)), done
    return t, False


def delete_reply(env: Mapping[str, Definition], def_name: str = "Respond") -> dict[str, Definition]:
    """Copy of ``env`` where ``def_name`` never sends its reply."""
    d = env[def_name]
    body, done = _drop_first_send(d.body, env)
    if not done:
        raise ValueError(f"{def_name} has no reply to delete")
    out = dict(env)
    out[def_name] = Definition(d.params, body)
    return out


__all__ = [
    "AbstractState",
    "Book",
    "Bounds",
    "CorruptTrace",
    "ExplorationResult",
    "Explorer",
    "Move",
    "canonical_key",
    "delete_reply",
    "explore",
    "initial_state",
    "joined_goal",
    "parse_owners",
    "replay",
]
