"""Pi-calculus terms with omega-style broadcast, and their reduction semantics.

Terms are immutable dataclasses.  A running system is a :class:`SystemTerm`
holding one term per owner (vehicle).  Restrictions that reach an active
position are lifted out of the owner's term and replaced by a globally fresh
name, so after settling two prefixes can talk exactly when they mention the
same :class:`Name`.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Callable, Iterable, Iterator, Mapping, Union

CHANNEL = "channel"
VALUE = "value"
CONSTANT = "constant"


class CalculusError(Exception):
    pass


class UnresolvedCall(CalculusError):
    """A Call names a definition missing from the environment, or has the wrong arity."""


class StaleStep(CalculusError):
    """The step is not enabled in the system it was applied to."""


@dataclass(frozen=True)
class Name:
    kind: str
    key: object
    display: str = field(default="", compare=False)

    @classmethod
    def chan(cls, label: str) -> "Name":
        return cls(CHANNEL, label, label)

    @classmethod
    def const(cls, value: object, display: str | None = None) -> "Name":
        return cls(CONSTANT, value, display if display is not None else str(value))

    @property
    def is_fresh(self) -> bool:
        return isinstance(self.key, tuple) and len(self.key) == 3 and self.key[0] == "#"

    @property
    def creator(self) -> int | None:
        """Owner whose restriction produced this fresh name."""
        return self.key[2] if self.is_fresh else None

    def __str__(self) -> str:
        return self.display or str(self.key)

    def __repr__(self) -> str:
        return f"Name({self})"


TRUE = Name.const("True")
FALSE = Name.const("False")


def bound_name(level: int) -> Name:
    return Name(CHANNEL, ("^", level), f"b{level}")


# ---------------------------------------------------------------- actions


@dataclass(frozen=True)
class Send:
    chan: Name
    payload: tuple[Name, ...] = ()


@dataclass(frozen=True)
class Receive:
    chan: Name
    binders: tuple[Name, ...] = ()


@dataclass(frozen=True)
class Broadcast:
    payload: Name


@dataclass(frozen=True)
class BroadcastReceive:
    binder: Name


@dataclass(frozen=True)
class Unobservable:
    label: str
    args: tuple[Name, ...] = ()
    binders: tuple[Name, ...] = ()


Action = Union[Send, Receive, Broadcast, BroadcastReceive, Unobservable]


def action_binders(a: Action) -> tuple[Name, ...]:
    if isinstance(a, (Receive, Unobservable)):
        return a.binders
    if isinstance(a, BroadcastReceive):
        return (a.binder,)
    return ()


def action_uses(a: Action) -> tuple[Name, ...]:
    """Names an action mentions free (channel, payload, arguments)."""
    if isinstance(a, Send):
        return (a.chan, *a.payload)
    if isinstance(a, Receive):
        return (a.chan,)
    if isinstance(a, Broadcast):
        return (a.payload,)
    if isinstance(a, Unobservable):
        return a.args
    return ()


def _map_action(a: Action, m: Callable[[Name], Name], binders: tuple[Name, ...] | None = None) -> Action:
    if isinstance(a, Send):
        return Send(m(a.chan), tuple(map(m, a.payload)))
    if isinstance(a, Receive):
        return Receive(m(a.chan), a.binders if binders is None else binders)
    if isinstance(a, Broadcast):
        return Broadcast(m(a.payload))
    if isinstance(a, BroadcastReceive):
        return a if binders is None else BroadcastReceive(binders[0])
    return Unobservable(a.label, tuple(map(m, a.args)), a.binders if binders is None else binders)


# ---------------------------------------------------------------- terms


@dataclass(frozen=True)
class Nil:
    pass


@dataclass(frozen=True)
class Prefix:
    action: Action
    cont: "Term" = Nil()


@dataclass(frozen=True)
class Parallel:
    left: "Term"
    right: "Term"


@dataclass(frozen=True)
class Choice:
    left: "Term"
    right: "Term"


@dataclass(frozen=True)
class Replicate:
    body: "Term"


@dataclass(frozen=True)
class Restrict:
    name: Name
    body: "Term"


@dataclass(frozen=True)
class Match:
    subject: Name
    branches: tuple[tuple[Name, "Term"], ...]


@dataclass(frozen=True)
class Call:
    def_name: str
    args: tuple[Name, ...] = ()


Term = Union[Nil, Prefix, Parallel, Choice, Replicate, Restrict, Match, Call]
NIL = Nil()


@dataclass(frozen=True)
class Definition:
    params: tuple[Name, ...]
    body: Term


DefinitionEnv = dict  # str -> Definition


def par(*terms: Term) -> Term:
    """Right-nested parallel composition, dropping 0 operands."""
    parts = [t for t in terms if not isinstance(t, Nil)]
    if not parts:
        return NIL
    out = parts[-1]
    for t in reversed(parts[:-1]):
        out = Parallel(t, out)
    return out


def components(t: Term) -> list[Term]:
    if isinstance(t, Parallel):
        return components(t.left) + components(t.right)
    return [t]


def choice_operands(t: Term) -> list[Term]:
    if isinstance(t, Choice):
        return choice_operands(t.left) + choice_operands(t.right)
    return [t]


def choice(*terms: Term) -> Term:
    out = terms[-1]
    for t in reversed(terms[:-1]):
        out = Choice(t, out)
    return out


# ---------------------------------------------------------------- names


def free_names(t: Term) -> set[Name]:
    return set(_free_iter(t))


def free_names_ordered(t: Term) -> list[Name]:
    """Free names in first-occurrence order (deterministic)."""
    return list(dict.fromkeys(_free_iter(t)))


def _free_iter(t: Term) -> Iterator[Name]:
    if isinstance(t, Prefix):
        yield from action_uses(t.action)
        bs = action_binders(t.action)
        yield from (n for n in _free_iter(t.cont) if n not in bs)
    elif isinstance(t, (Parallel, Choice)):
        yield from _free_iter(t.left)
        yield from _free_iter(t.right)
    elif isinstance(t, Replicate):
        yield from _free_iter(t.body)
    elif isinstance(t, Restrict):
        yield from (n for n in _free_iter(t.body) if n != t.name)
    elif isinstance(t, Match):
        yield t.subject
        for label, body in t.branches:
            yield label
            yield from _free_iter(body)
    elif isinstance(t, Call):
        yield from t.args


def all_names(t: Term) -> set[Name]:
    out: set[Name] = set()
    _collect_all(t, out)
    return out


def _collect_all(t: Term, out: set[Name]) -> None:
    if isinstance(t, Prefix):
        out.update(action_uses(t.action))
        out.update(action_binders(t.action))
        _collect_all(t.cont, out)
    elif isinstance(t, (Parallel, Choice)):
        _collect_all(t.left, out)
        _collect_all(t.right, out)
    elif isinstance(t, Replicate):
        _collect_all(t.body, out)
    elif isinstance(t, Restrict):
        out.add(t.name)
        _collect_all(t.body, out)
    elif isinstance(t, Match):
        out.add(t.subject)
        for label, body in t.branches:
            out.add(label)
            _collect_all(body, out)
    elif isinstance(t, Call):
        out.update(t.args)


def _variant(base: Name, avoid: set[Name]) -> Name:
    k = 1
    while True:
        cand = Name(base.kind, ("'", base.key, k), str(base) + "'" * k)
        if cand not in avoid:
            return cand
        k += 1


def substitute(t: Term, mapping: Mapping[Name, Name]) -> Term:
    """Capture-avoiding simultaneous substitution of free names."""
    m = {k: v for k, v in mapping.items() if k != v}
    if not m:
        return t
    return _subst(t, m)


def _rebind(binders: tuple[Name, ...], body: Term, m: dict[Name, Name]) -> tuple[tuple[Name, ...], dict[Name, Name]]:
    inner = {k: v for k, v in m.items() if k not in binders}
    fn = free_names(body)
    live = {k: v for k, v in inner.items() if k in fn}
    targets = set(live.values())
    if not targets.intersection(binders):
        return binders, live
    avoid = all_names(body) | targets | set(live) | set(binders)
    new = []
    for b in binders:
        if b in targets:
            nb = _variant(b, avoid)
            avoid.add(nb)
            live[b] = nb
            new.append(nb)
        else:
            new.append(b)
    return tuple(new), live


def _subst(t: Term, m: dict[Name, Name]) -> Term:
    f = lambda n: m.get(n, n)  # noqa: E731
    if isinstance(t, Nil):
        return t
    if isinstance(t, Prefix):
        bs = action_binders(t.action)
        if not bs:
            return Prefix(_map_action(t.action, f), _subst(t.cont, m))
        new_bs, inner = _rebind(bs, t.cont, m)
        cont = _subst(t.cont, inner) if inner else t.cont
        return Prefix(_map_action(t.action, f, new_bs), cont)
    if isinstance(t, Parallel):
        return Parallel(_subst(t.left, m), _subst(t.right, m))
    if isinstance(t, Choice):
        return Choice(_subst(t.left, m), _subst(t.right, m))
    if isinstance(t, Replicate):
        return Replicate(_subst(t.body, m))
    if isinstance(t, Restrict):
        (nb,), inner = _rebind((t.name,), t.body, m)
        return Restrict(nb, _subst(t.body, inner) if inner else t.body)
    if isinstance(t, Match):
        return Match(f(t.subject), tuple((f(lbl), _subst(b, m)) for lbl, b in t.branches))
    if isinstance(t, Call):
        return Call(t.def_name, tuple(map(f, t.args)))
    raise TypeError(t)


def alpha_normalize(t: Term, level: int = 0) -> Term:
    """Rename every binder to a canonical name given by its binding depth."""
    if isinstance(t, Prefix):
        bs = action_binders(t.action)
        if not bs:
            return Prefix(t.action, alpha_normalize(t.cont, level))
        new = tuple(bound_name(level + i) for i in range(len(bs)))
        cont = substitute(t.cont, dict(zip(bs, new)))
        return Prefix(_map_action(t.action, lambda n: n, new), alpha_normalize(cont, level + len(bs)))
    if isinstance(t, Parallel):
        return Parallel(alpha_normalize(t.left, level), alpha_normalize(t.right, level))
    if isinstance(t, Choice):
        return Choice(alpha_normalize(t.left, level), alpha_normalize(t.right, level))
    if isinstance(t, Replicate):
        return Replicate(alpha_normalize(t.body, level))
    if isinstance(t, Restrict):
        nb = bound_name(level)
        return Restrict(nb, alpha_normalize(substitute(t.body, {t.name: nb}), level + 1))
    if isinstance(t, Match):
        return Match(t.subject, tuple((lbl, alpha_normalize(b, level)) for lbl, b in t.branches))
    return t


# ---------------------------------------------------------------- printing


def _name_key(n: Name) -> str:
    return f"{n.kind[0]}:{n.key!r}"


def format_action(a: Action, name: Callable[[Name], str] = str) -> str:
    if isinstance(a, Send):
        return f"{name(a.chan)}<{', '.join(map(name, a.payload))}>"
    if isinstance(a, Receive):
        return f"{name(a.chan)}({', '.join(map(name, a.binders))})"
    if isinstance(a, Broadcast):
        return f"bcast<{name(a.payload)}>"
    if isinstance(a, BroadcastReceive):
        return f"recv({name(a.binder)})"
    out = f"tau {a.label}"
    if a.args:
        out += f"({', '.join(map(name, a.args))})"
    if a.binders:
        out += f" -> ({', '.join(map(name, a.binders))})"
    return out


def format_term(t: Term, name: Callable[[Name], str] = str) -> str:
    """Render a term in the textual process syntax."""
    return _fmt(t, name, 0)


# precedence levels: 0 parallel, 1 choice, 2 unary
def _fmt(t: Term, name: Callable[[Name], str], ctx: int) -> str:
    if isinstance(t, Nil):
        return "0"
    if isinstance(t, Parallel):
        s = " | ".join(_fmt(c, name, 1) for c in components(t))
        return f"({s})" if ctx > 0 else s
    if isinstance(t, Choice):
        s = " + ".join(_fmt(c, name, 2) for c in choice_operands(t))
        return f"({s})" if ctx > 1 else s
    if isinstance(t, Prefix):
        head = format_action(t.action, name)
        if isinstance(t.cont, Nil) and not isinstance(t.action, Receive):
            return head
        return f"{head} . {_fmt(t.cont, name, 2)}"
    if isinstance(t, Replicate):
        return "!" + _fmt(t.body, name, 2)
    if isinstance(t, Restrict):
        return f"new {name(t.name)} in {_fmt(t.body, name, 2)}"
    if isinstance(t, Match):
        arms = ", ".join(f"{name(lbl)} => {_fmt(b, name, 0)}" for lbl, b in t.branches)
        return f"{name(t.subject)}:[{arms}]"
    if isinstance(t, Call):
        return f"{t.def_name}({', '.join(map(name, t.args))})"
    raise TypeError(t)


def term_key(t: Term) -> str:
    """Total, name-exact textual key used for sorting and hashing."""
    return format_term(t, _name_key)


# ---------------------------------------------------------------- congruence


def normal_form(t: Term) -> Term:
    """Canonical representative under the structural congruence laws.

    Covers alpha-equivalence, unit/commutativity/associativity of ``|``,
    commutativity/associativity of ``+``, absorption of copies by a
    replication (``!P == P | !P``) and minimal restriction scope.
    """
    return _nf(t, 0)


def _nf(t: Term, lvl: int) -> Term:
    if isinstance(t, Nil) or isinstance(t, Call):
        return t
    if isinstance(t, Prefix):
        bs = action_binders(t.action)
        if not bs:
            return Prefix(t.action, _nf(t.cont, lvl))
        new = tuple(bound_name(lvl + i) for i in range(len(bs)))
        cont = substitute(t.cont, dict(zip(bs, new)))
        return Prefix(_map_action(t.action, lambda n: n, new), _nf(cont, lvl + len(bs)))
    if isinstance(t, Parallel):
        return _mk_par([_nf(c, lvl) for c in components(t)], lvl)
    if isinstance(t, Choice):
        ops = []
        for c in choice_operands(t):
            ops.extend(choice_operands(_nf(c, lvl)))
        ops.sort(key=term_key)
        return choice(*ops)
    if isinstance(t, Replicate):
        return Replicate(_nf(t.body, lvl))
    if isinstance(t, Restrict):
        nb = bound_name(lvl)
        body = _nf(substitute(t.body, {t.name: nb}), lvl + 1)
        inside, outside = [], []
        for c in components(body):
            (inside if nb in free_names(c) else outside).append(c)
        # components not mentioning the restricted name are renumbered one level up
        outside = [_nf(alpha_normalize(c, lvl), lvl) for c in outside]
        parts = outside
        if inside:
            parts = parts + [Restrict(nb, _mk_par(inside, lvl + 1))]
        return _mk_par(parts, lvl)
    if isinstance(t, Match):
        return Match(t.subject, tuple((lbl, _nf(b, lvl)) for lbl, b in t.branches))
    raise TypeError(t)


def _mk_par(parts: list[Term], lvl: int) -> Term:
    flat: list[Term] = []
    for p in parts:
        flat.extend(c for c in components(p) if not isinstance(c, Nil))
    # a copy of a replicated body may be spread over several components
    bodies = {c.body for c in flat if isinstance(c, Replicate)}
    for body in sorted(bodies, key=term_key):
        copy = [c for c in components(body) if not isinstance(c, Nil)]
        while copy:
            rest = list(flat)
            try:
                for c in copy:
                    rest.remove(c)
            except ValueError:
                break
            flat = rest
    flat.sort(key=term_key)
    return par(*flat)


def structurally_congruent(p: Term, q: Term) -> bool:
    return normal_form(p) == normal_form(q)


# ---------------------------------------------------------------- systems


@dataclass(frozen=True)
class SystemTerm:
    participants: tuple[tuple[int, Term], ...]
    shared: tuple[Name, ...] = ()
    next_fresh: int = 0

    def term(self, owner: int) -> Term:
        for o, t in self.participants:
            if o == owner:
                return t
        raise KeyError(owner)

    @property
    def owners(self) -> list[int]:
        return [o for o, _ in self.participants]

    def replace(self, owner: int, term: Term) -> "SystemTerm":
        return SystemTerm(
            tuple((o, term if o == owner else t) for o, t in self.participants),
            self.shared,
            self.next_fresh,
        )


def make_system(participants: Iterable[tuple[int, Term]], shared: Iterable[Name] = ()) -> SystemTerm:
    parts = tuple(sorted(participants, key=lambda p: p[0]))
    if len({o for o, _ in parts}) != len(parts):
        raise ValueError("owner ids must be distinct")
    return settle(SystemTerm(parts, tuple(shared), 0))


def settle(sys: SystemTerm) -> SystemTerm:
    """Lift active restrictions to fresh names and drop dead components."""
    counter = sys.next_fresh
    shared = list(sys.shared)
    out = []
    changed = False

    def lift(r: Restrict, owner: int) -> Term:
        nonlocal counter
        fresh = Name(CHANNEL, ("#", counter, owner), f"{r.name}#{counter}")
        counter += 1
        shared.append(fresh)
        return substitute(r.body, {r.name: fresh})

    def lift_choice(t: Term, owner: int) -> Term:
        if isinstance(t, Restrict):
            return lift_choice(lift(t, owner), owner)
        if isinstance(t, Choice):
            return Choice(lift_choice(t.left, owner), lift_choice(t.right, owner))
        return t

    for owner, term in sys.participants:
        todo = components(term)
        comps: list[Term] = []
        dirty = False
        while todo:
            c = todo.pop(0)
            if isinstance(c, Nil):
                dirty = True
            elif isinstance(c, Parallel):
                todo[:0] = components(c)
                dirty = True
            elif isinstance(c, Restrict):
                todo.insert(0, lift(c, owner))
                dirty = True
            elif isinstance(c, Match) and not any(lbl == c.subject for lbl, _ in c.branches):
                dirty = True  # stuck match behaves as 0
            elif isinstance(c, Choice):
                nc = lift_choice(c, owner)
                dirty |= nc is not c
                comps.append(nc)
            else:
                comps.append(c)
        if dirty:
            changed = True
            out.append((owner, par(*comps)))
        else:
            out.append((owner, term))
    if not changed and counter == sys.next_fresh:
        return sys
    return SystemTerm(tuple(out), tuple(shared), counter)


# ---------------------------------------------------------------- reactions


@dataclass(frozen=True)
class Guard:
    """An action prefix at an active position of some owner's term."""

    owner: int
    comp: int
    branch: int  # choice operand index, 0 when not under a choice
    replicated: bool
    prefix: Prefix

    @property
    def site(self) -> tuple[int, int, int]:
        return (self.owner, self.comp, self.branch)


def _expose(t: Term, env: Mapping[str, Definition]) -> list[Term]:
    """Choice operands of a replicated body, expanding one head Call."""
    if isinstance(t, Call):
        t = unfold_call(t, env)
    return choice_operands(t)


def unfold_call(c: Call, env: Mapping[str, Definition]) -> Term:
    d = env.get(c.def_name)
    if d is None:
        raise UnresolvedCall(f"no definition named {c.def_name!r}")
    if len(d.params) != len(c.args):
        raise UnresolvedCall(f"{c.def_name} expects {len(d.params)} arguments, got {len(c.args)}")
    return substitute(d.body, dict(zip(d.params, c.args)))


def guards(sys: SystemTerm, env: Mapping[str, Definition]) -> list[Guard]:
    out = []
    for owner, term in sys.participants:
        for i, c in enumerate(components(term)):
            rep = isinstance(c, Replicate)
            ops = _expose(c.body, env) if rep else choice_operands(c)
            for j, op in enumerate(ops):
                if isinstance(op, Prefix):
                    out.append(Guard(owner, i, j, rep, op))
    return out


@dataclass(frozen=True)
class ReactionStep:
    sites: tuple[tuple[int, int, int], ...]
    _pre: SystemTerm = field(compare=False, repr=False)
    _env: Mapping = field(compare=False, repr=False)

    @cached_property
    def result(self) -> SystemTerm:
        return _fire(self._pre, self._env, self)

    @property
    def owners(self) -> tuple[int, ...]:
        return tuple(dict.fromkeys(s[0] for s in self.sites))


@dataclass(frozen=True)
class Communication(ReactionStep):
    sender_owner: int = 0
    receiver_owner: int = 0
    chan: Name | None = None
    payload: tuple[Name, ...] = ()


@dataclass(frozen=True)
class BroadcastStep(ReactionStep):
    sender_owner: int = 0
    receiver_owners: tuple[int, ...] = ()
    payload: Name | None = None


@dataclass(frozen=True)
class MatchStep(ReactionStep):
    owner: int = 0
    branch: int = 0


@dataclass(frozen=True)
class UnobservableStep(ReactionStep):
    owner: int = 0
    label: str = ""
    args: tuple[Name, ...] = ()
    binders: tuple[Name, ...] = ()


@dataclass(frozen=True)
class UnfoldStep(ReactionStep):
    owner: int = 0
    def_name: str = ""


def _as_relation(in_range) -> Callable[[int, int], bool]:
    if in_range is None:
        return lambda a, b: True
    if callable(in_range):
        return in_range
    pairs = set(in_range)
    return lambda a, b: a == b or (a, b) in pairs or (b, a) in pairs


def enabled_reactions(sys: SystemTerm, env: Mapping[str, Definition], in_range=None) -> list[ReactionStep]:
    """Every step enabled in ``sys``, ordered by (owner, syntactic position)."""
    sys = settle(sys)
    rel = _as_relation(in_range)
    gs = guards(sys, env)
    steps: list[ReactionStep] = []

    senders = [g for g in gs if isinstance(g.prefix.action, Send)]
    receivers = [g for g in gs if isinstance(g.prefix.action, Receive)]
    for s in senders:
        a = s.prefix.action
        for r in receivers:
            b = r.prefix.action
            if b.chan != a.chan or len(b.binders) != len(a.payload):
                continue
            if (s.owner, s.comp) == (r.owner, r.comp):
                continue
            steps.append(Communication((s.site, r.site), sys, env, s.owner, r.owner, a.chan, a.payload))

    brecv = [g for g in gs if isinstance(g.prefix.action, BroadcastReceive)]
    for s in gs:
        if not isinstance(s.prefix.action, Broadcast):
            continue
        chosen: dict[int, Guard] = {}
        for r in brecv:
            if r.owner in chosen or (r.owner, r.comp) == (s.owner, s.comp):
                continue
            if rel(s.owner, r.owner):
                chosen[r.owner] = r
        recv = tuple(chosen.values())
        steps.append(
            BroadcastStep(
                (s.site, *(r.site for r in recv)), sys, env, s.owner, tuple(r.owner for r in recv), s.prefix.action.payload
            )
        )

    for g in gs:
        a = g.prefix.action
        if isinstance(a, Unobservable):
            steps.append(UnobservableStep((g.site,), sys, env, g.owner, a.label, a.args, a.binders))

    for owner, term in sys.participants:
        for i, c in enumerate(components(term)):
            if isinstance(c, Call):
                if c.def_name not in env:
                    raise UnresolvedCall(f"no definition named {c.def_name!r}")
                steps.append(UnfoldStep(((owner, i, 0),), sys, env, owner, c.def_name))
            elif isinstance(c, Match):
                for k, (lbl, _) in enumerate(c.branches):
                    if lbl == c.subject:
                        steps.append(MatchStep(((owner, i, k),), sys, env, owner, k))
                        break
            elif isinstance(c, Replicate):
                _expose(c.body, env)  # surfaces UnresolvedCall early

    steps.sort(key=lambda st: st.sites)
    return steps


def apply_reaction(
    sys: SystemTerm,
    step: ReactionStep,
    values: tuple[Name, ...] | None = None,
    extra: Iterable[Term] = (),
) -> SystemTerm:
    """Fire ``step`` in ``sys``.

    ``values`` fills the binders of an unobservable step (defaults to leaving
    them as they are); ``extra`` adds components to the acting owner, which is
    how interface replies enter the system.
    """
    extra = tuple(extra)
    if step._pre is not sys:
        if step not in enabled_reactions(sys, step._env):
            raise StaleStep(repr(step))
        return _fire(settle(sys), step._env, step, values, extra)
    if values is None and not extra:
        return step.result
    return _fire(sys, step._env, step, values, extra)


def _fire(sys: SystemTerm, env, step: ReactionStep, values=None, extra=()) -> SystemTerm:
    comps = {o: components(t) for o, t in sys.participants}
    replaced: dict[tuple[int, int], Term] = {}

    def operand(site):
        o, i, j = site
        c = comps[o][i]
        if isinstance(c, Replicate):
            return _expose(c.body, env)[j], True
        return choice_operands(c)[j], False

    def put(site, term):
        o, i, _ = site
        _, rep = operand(site)
        replaced[(o, i)] = par(term, comps[o][i]) if rep else term

    if isinstance(step, Communication):
        (s_site, r_site) = step.sites
        s, _ = operand(s_site)
        r, _ = operand(r_site)
        put(s_site, s.cont)
        put(r_site, substitute(r.cont, dict(zip(r.action.binders, step.payload))))
    elif isinstance(step, BroadcastStep):
        s, _ = operand(step.sites[0])
        put(step.sites[0], s.cont)
        for site in step.sites[1:]:
            r, _ = operand(site)
            put(site, substitute(r.cont, {r.action.binder: step.payload}))
    elif isinstance(step, UnobservableStep):
        (site,) = step.sites
        g, _ = operand(site)
        cont = g.cont
        if values is not None:
            if len(values) != len(g.action.binders):
                raise ValueError(f"{step.label}: expected {len(g.action.binders)} values, got {len(values)}")
            cont = substitute(cont, dict(zip(g.action.binders, values)))
        put(site, par(cont, *extra))
        extra = ()
    elif isinstance(step, UnfoldStep):
        (o, i, _), = step.sites
        replaced[(o, i)] = unfold_call(comps[o][i], env)
    elif isinstance(step, MatchStep):
        (o, i, k), = step.sites
        replaced[(o, i)] = comps[o][i].branches[k][1]
    else:
        raise TypeError(step)

    parts = []
    for o, cs in comps.items():
        new = [replaced.get((o, i), c) for i, c in enumerate(cs)]
        if extra and o == step.owners[0]:
            new.extend(extra)
        parts.append((o, par(*new)))
    return settle(SystemTerm(tuple(parts), sys.shared, sys.next_fresh))


def consumed_prefixes(step: ReactionStep) -> int:
    if isinstance(step, Communication):
        return 2
    if isinstance(step, BroadcastStep):
        return len(step.sites)
    return 1


# ---------------------------------------------------------------- topology


def restricted_names(sys: SystemTerm) -> set[Name]:
    out = set(sys.shared)
    for _, t in sys.participants:
        out.update(n for n in free_names(t) if n.is_fresh)
    return out


def channel_topology(sys: SystemTerm) -> dict[frozenset, set[Name]]:
    """Undirected edges between owners linked by a private channel.

    A fresh name links its creator with every other owner holding it free.
    Names restricted explicitly across owners (no known creator) link every
    pair of holders.
    """
    holders: dict[Name, list[int]] = {}
    for owner, t in sys.participants:
        for n in free_names_ordered(t):
            holders.setdefault(n, []).append(owner)
    restricted = restricted_names(sys)
    edges: dict[frozenset, set[Name]] = {}
    for n, owners in holders.items():
        if n not in restricted:
            continue
        creator = n.creator
        if creator is not None:
            pairs = [(creator, o) for o in owners if o != creator]
        else:
            pairs = [(a, b) for k, a in enumerate(owners) for b in owners[k + 1:]]
        for a, b in pairs:
            edges.setdefault(frozenset((a, b)), set()).add(n)
    return edges


def discard_guard(sys: SystemTerm, site: tuple[int, int, int]) -> SystemTerm:
    """Drop the component holding the guard at ``site`` (kept if replicated)."""
    owner, i, _ = site
    comps = components(sys.term(owner))
    if isinstance(comps[i], Replicate):
        return sys
    del comps[i]
    return settle(sys.replace(owner, par(*comps)))
