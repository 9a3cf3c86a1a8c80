"""Per-sampling-period scheduler for a system of vehicle processes."""

from __future__ import annotations

import random
from collections import Counter
from dataclasses import dataclass, field
from typing import Callable, Mapping, Union

from .calculus import (
    Broadcast,
    BroadcastStep,
    Name,
    Prefix,
    ReactionStep,
    SystemTerm,
    Term,
    UnfoldStep,
    UnobservableStep,
    apply_reaction,
    components,
    discard_guard,
    enabled_reactions,
    guards,
    par,
)

INTERFACE_LABELS = frozenset(
    {
        "get_id",
        "get_ldr",
        "set_ldr",
        "drive",
        "keep_dist",
        "check_join",
        "join_ok",
        "align_start",
        "merge_start",
        "align_done",
        "merge_done",
    }
)


class BudgetExceeded(RuntimeError):
    """An owner took more steps in one tick than the budget allows (livelock)."""


class HandlerMissing(KeyError):
    pass


@dataclass(frozen=True)
class InterfaceRequest:
    owner: int
    label: str
    args: tuple[Name, ...] = ()
    reply_binders: tuple[Name, ...] = ()


@dataclass(frozen=True)
class Completed:
    values: tuple[Name, ...] = ()
    replies: tuple[Term, ...] = ()  # components added to the caller, e.g. an answer on a channel


@dataclass(frozen=True)
class Pending:
    pass


@dataclass(frozen=True)
class Rejected:
    reason: str


InterfaceOutcome = Union[Completed, Pending, Rejected]
Handler = Callable[[InterfaceRequest], InterfaceOutcome]


@dataclass(frozen=True)
class Fired:
    step: ReactionStep
    values: tuple[Name, ...] | None = None
    replies: tuple[Term, ...] = ()
    rejected: bool = False


@dataclass
class TickReport:
    tick_index: int
    steps_taken: list[Fired] = field(default_factory=list)
    pending_requests: list[InterfaceRequest] = field(default_factory=list)
    quiescent: bool = False
    requests: list[tuple[InterfaceRequest, InterfaceOutcome]] = field(default_factory=list)
    start: SystemTerm | None = None  # state after re-broadcasts, before the first step

    def unfolds(self) -> list[tuple[int, str]]:
        return [(f.step.owner, f.step.def_name) for f in self.steps_taken if isinstance(f.step, UnfoldStep)]


def replay_steps(sys: SystemTerm, env, steps: list[Fired]) -> SystemTerm:
    """Re-apply recorded steps from a tick's start state (``TickReport.start``)."""
    for f in steps:
        fresh = next((s for s in enabled_reactions(sys, env) if s == f.step), None)
        if fresh is None:
            raise ValueError(f"step not enabled on replay: {f.step!r}")
        if f.rejected:
            sys = discard_guard(sys, fresh.sites[0])
        else:
            sys = apply_reaction(sys, fresh, f.values, f.replies)
    return sys


class Runtime:
    """Advances a :class:`SystemTerm` one sampling period at a time.

    Within a tick each definition unfolds at most once per owner, interface
    actions go to the owner's handler, and ties between enabled steps are
    broken by a RNG seeded from ``(seed, tick)``.
    """

    def __init__(
        self,
        env: Mapping,
        handlers: Mapping[int, Handler] | Handler,
        seed: int = 0,
        budget: int = 64,
        lossy_broadcast: bool = True,
        rebroadcast: Callable[[int], bool] | None = None,
        rebroadcast_period: int = 10,
    ):
        self.env = env
        self.handlers = handlers
        self.seed = seed
        self.budget = budget
        self.lossy_broadcast = lossy_broadcast
        self.rebroadcast = rebroadcast
        self.rebroadcast_period = rebroadcast_period
        self.tick_index = 0
        self.broadcasts: dict[int, Name] = {}

    def _handler(self, owner: int) -> Handler:
        if callable(self.handlers):
            return self.handlers
        try:
            return self.handlers[owner]
        except KeyError:
            raise HandlerMissing(owner) from None

    def _reissue(self, sys: SystemTerm) -> SystemTerm:
        if self.rebroadcast is None or self.tick_index % self.rebroadcast_period:
            return sys
        for owner, payload in self.broadcasts.items():
            if not self.rebroadcast(owner):
                continue
            term = sys.term(owner)
            if any(isinstance(c, Prefix) and isinstance(c.action, Broadcast) for c in components(term)):
                continue
            sys = sys.replace(owner, par(term, Prefix(Broadcast(payload))))
        return sys

    def tick(self, sys: SystemTerm, in_range=None) -> tuple[SystemTerm, TickReport]:
        report = TickReport(self.tick_index)
        rng = random.Random(self.seed * 1_000_003 + self.tick_index)
        if self.tick_index > 0:
            sys = self._reissue(sys)
        report.start = sys
        unfolded: set[tuple[int, str]] = set()
        blocked: set[tuple] = set()
        per_owner: Counter = Counter()

        while True:
            cands = []
            for st in enabled_reactions(sys, self.env, in_range):
                if isinstance(st, UnfoldStep) and (st.owner, st.def_name) in unfolded:
                    continue
                if isinstance(st, UnobservableStep) and (st.owner, st.label, st.args, st.binders) in blocked:
                    continue
                if isinstance(st, BroadcastStep) and not st.receiver_owners and not self.lossy_broadcast:
                    continue
                cands.append(st)
            if not cands:
                report.quiescent = True
                break
            st = cands[rng.randrange(len(cands))]
            for o in st.owners:
                per_owner[o] += 1
                if per_owner[o] > self.budget:
                    raise BudgetExceeded(f"owner {o} exceeded {self.budget} steps in tick {self.tick_index}")

            if isinstance(st, UnobservableStep):
                req = InterfaceRequest(st.owner, st.label, st.args, st.binders)
                outcome = self._handler(st.owner)(req)
                report.requests.append((req, outcome))
                if isinstance(outcome, Pending):
                    blocked.add((st.owner, st.label, st.args, st.binders))
                    report.pending_requests.append(req)
                    per_owner[st.owner] -= 1
                    continue
                if isinstance(outcome, Rejected):
                    sys = discard_guard(sys, st.sites[0])
                    report.steps_taken.append(Fired(st, rejected=True))
                    continue
                if len(outcome.values) != len(st.binders):
                    raise ValueError(f"{st.label}: handler returned {len(outcome.values)} values for {len(st.binders)} binders")
                sys = apply_reaction(sys, st, outcome.values, outcome.replies)
                report.steps_taken.append(Fired(st, outcome.values, outcome.replies))
                continue

            if isinstance(st, UnfoldStep):
                unfolded.add((st.owner, st.def_name))
            elif isinstance(st, BroadcastStep):
                self.broadcasts[st.sender_owner] = st.payload
            sys = apply_reaction(sys, st)
            report.steps_taken.append(Fired(st))

        self.tick_index += 1
        return sys, report


def tick(sys, env, interfaces, range_relation=None, seed: int = 0, tick_index: int = 0, budget: int = 64):
    """Single-tick convenience wrapper around :class:`Runtime`."""
    rt = Runtime(env, interfaces, seed=seed, budget=budget)
    rt.tick_index = tick_index
    return rt.tick(sys, range_relation)
