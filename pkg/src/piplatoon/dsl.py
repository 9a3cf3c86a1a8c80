"""Text syntax for process definitions (``.pic`` files).

Grammar::

    program := (def | owner)*
    def     := IDENT "(" params? ")" "=" proc
    owner   := "owner" INT ":" IDENT "(" args? ")"
    proc    := choice ("|" choice)*
    choice  := unary ("+" unary)*
    unary   := "!" unary | "new" IDENT "in" unary | prefix ("." unary)? | atom
    atom    := "0" | IDENT "(" args? ")" | IDENT ":" "[" branch ("," branch)* "]" | "(" proc ")"
    branch  := IDENT "=>" proc
    prefix  := "tau" IDENT ("(" args ")")? ("->" "(" binders ")")?
             | IDENT "<" args? ">" | IDENT "(" binders? ")" "."
             | "bcast" "<" IDENT ">" | "recv" "(" IDENT ")"

``IDENT(...)`` followed by ``.`` is a receive, otherwise a call.  ``True``,
``False`` and integer literals are constants.  ``#`` starts a line comment.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from .calculus import (
    NIL,
    Broadcast,
    BroadcastReceive,
    Call,
    Choice,
    Definition,
    Match,
    Name,
    Parallel,
    Prefix,
    Receive,
    Replicate,
    Restrict,
    Send,
    Term,
    Unobservable,
    format_term,
)

KEYWORDS = {"tau", "new", "in", "bcast", "recv", "owner"}

_TOKEN = re.compile(
    r"(?P<ws>[ \t\r]+)|(?P<nl>\n)|(?P<comment>#[^\n]*)"
    r"|(?P<arrow>->)|(?P<fat>=>)"
    r"|(?P<int>\d+)|(?P<ident>[A-Za-z_][A-Za-z0-9_']*)"
    r"|(?P<sym>[()<>,.|+!:\[\]=])"
)


@dataclass(frozen=True)
class ParseDiagnostic:
    severity: str
    message: str
    line: int
    column: int

    def __str__(self) -> str:
        return f"{self.line}:{self.column}: {self.severity}: {self.message}"


class ParseError(Exception):
    def __init__(self, diagnostics: list[ParseDiagnostic]):
        super().__init__("\n".join(map(str, diagnostics)))
        self.diagnostics = diagnostics


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    line: int
    column: int
    offset: int


@dataclass
class SourceProgram:
    env: dict[str, Definition] = field(default_factory=dict)
    entries: list[tuple[int, Call]] = field(default_factory=list)
    spans: dict[str, tuple[int, int]] = field(default_factory=dict)


def tokenize(text: str) -> list[Token]:
    out = []
    line, col_base, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise ParseError([ParseDiagnostic("error", f"unexpected character {text[pos]!r}", line, pos - col_base + 1)])
        kind = m.lastgroup
        if kind == "nl":
            line += 1
            col_base = m.end()
        elif kind not in ("ws", "comment"):
            tok = m.group()
            if kind == "ident" and tok in KEYWORDS:
                kind = tok
            out.append(Token(kind, tok, line, pos - col_base + 1, pos))
        pos = m.end()
    out.append(Token("eof", "", line, pos - col_base + 1, pos))
    return out


def _name(text: str) -> Name:
    if text in ("True", "False"):
        return Name.const(text)
    if text.isdigit():
        return Name.const(int(text))
    return Name.chan(text)


class _Parser:
    def __init__(self, text: str):
        self.text = text
        self.toks = tokenize(text)
        self.i = 0

    @property
    def tok(self) -> Token:
        return self.toks[self.i]

    def peek(self, k: int = 1) -> Token:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def error(self, msg: str, tok: Token | None = None):
        tok = tok or self.tok
        raise ParseError([ParseDiagnostic("error", msg, tok.line, tok.column)])

    def eat(self, text: str) -> Token:
        if self.tok.text != text or self.tok.kind == "eof":
            self.error(f"expected {text!r}, found {self.tok.text or 'end of input'!r}")
        tok = self.tok
        self.i += 1
        return tok

    def at(self, text: str) -> bool:
        return self.tok.text == text and self.tok.kind != "eof"

    def ident(self) -> Token:
        if self.tok.kind not in ("ident", "int"):
            self.error(f"expected a name, found {self.tok.text or 'end of input'!r}")
        tok = self.tok
        self.i += 1
        return tok

    def names(self, close: str) -> tuple[Name, ...]:
        out = []
        if not self.at(close):
            out.append(_name(self.ident().text))
            while self.at(","):
                self.eat(",")
                out.append(_name(self.ident().text))
        return tuple(out)

    # -- program

    def program(self) -> tuple[SourceProgram, list[tuple[Call, Token]]]:
        prog = SourceProgram()
        calls: list[tuple[Call, Token]] = []
        self.calls = calls
        diags = []
        while self.tok.kind != "eof":
            if self.tok.kind == "owner":
                self.eat("owner")
                if self.tok.kind != "int":
                    self.error("expected an owner id")
                oid = int(self.ident().text)
                self.eat(":")
                head = self.tok
                name = self.ident().text
                self.eat("(")
                args = self.names(")")
                self.eat(")")
                call = Call(name, args)
                calls.append((call, head))
                prog.entries.append((oid, call))
                continue
            head = self.tok
            if head.kind != "ident":
                self.error(f"expected a definition, found {head.text!r}")
            name = self.ident().text
            self.eat("(")
            params = self.names(")")
            self.eat(")")
            self.eat("=")
            body = self.proc()
            if name in prog.env:
                diags.append(ParseDiagnostic("error", f"duplicate definition {name!r}", head.line, head.column))
            if len(set(params)) != len(params):
                diags.append(ParseDiagnostic("error", f"repeated parameter in {name!r}", head.line, head.column))
            prog.env[name] = Definition(params, body)
            prog.spans[name] = (head.offset, self.toks[self.i - 1].offset + len(self.toks[self.i - 1].text))
        return prog, diags

    # -- processes

    def proc(self) -> Term:
        parts = [self.choice()]
        while self.at("|"):
            self.eat("|")
            parts.append(self.choice())
        out = parts[-1]
        for p in reversed(parts[:-1]):
            out = Parallel(p, out)
        return out

    def choice(self) -> Term:
        parts = [self.unary()]
        while self.at("+"):
            self.eat("+")
            parts.append(self.unary())
        out = parts[-1]
        for p in reversed(parts[:-1]):
            out = Choice(p, out)
        return out

    def unary(self) -> Term:
        tok = self.tok
        if self.at("!"):
            self.eat("!")
            return Replicate(self.unary())
        if tok.kind == "new":
            self.eat("new")
            n = _name(self.ident().text)
            if self.tok.kind != "in":
                self.error("expected 'in'")
            self.eat("in")
            return Restrict(n, self.unary())
        action = self.prefix()
        if action is None:
            return self.atom()
        if self.at("."):
            self.eat(".")
            return Prefix(action, self.unary())
        return Prefix(action, NIL)

    def prefix(self):
        tok = self.tok
        if tok.kind == "tau":
            self.eat("tau")
            label = self.ident().text
            args: tuple[Name, ...] = ()
            binders: tuple[Name, ...] = ()
            if self.at("("):
                self.eat("(")
                args = self.names(")")
                self.eat(")")
            if self.tok.kind == "arrow":
                self.i += 1
                self.eat("(")
                binders = self.names(")")
                self.eat(")")
            return Unobservable(label, args, binders)
        if tok.kind == "bcast":
            self.eat("bcast")
            self.eat("<")
            n = _name(self.ident().text)
            self.eat(">")
            return Broadcast(n)
        if tok.kind == "recv":
            self.eat("recv")
            self.eat("(")
            n = _name(self.ident().text)
            self.eat(")")
            return BroadcastReceive(n)
        if tok.kind == "ident" and self.peek().text == "<":
            chan = _name(self.ident().text)
            self.eat("<")
            payload = self.names(">")
            self.eat(">")
            return Send(chan, payload)
        if tok.kind == "ident" and self.peek().text == "(":
            # receive only when the closing paren is followed by '.'
            depth, k = 0, self.i + 1
            while True:
                t = self.toks[k]
                if t.kind == "eof":
                    break
                if t.text == "(":
                    depth += 1
                elif t.text == ")":
                    depth -= 1
                    if depth == 0:
                        break
                k += 1
            if self.toks[min(k + 1, len(self.toks) - 1)].text == ".":
                chan = _name(self.ident().text)
                self.eat("(")
                binders = self.names(")")
                self.eat(")")
                return Receive(chan, binders)
        return None

    def atom(self) -> Term:
        tok = self.tok
        if tok.kind == "int" and tok.text == "0":
            self.i += 1
            return NIL
        if self.at("("):
            self.eat("(")
            t = self.proc()
            self.eat(")")
            return t
        if tok.kind == "ident" and self.peek().text == ":":
            subject = _name(self.ident().text)
            self.eat(":")
            self.eat("[")
            branches = [self.branch()]
            while self.at(","):
                self.eat(",")
                branches.append(self.branch())
            self.eat("]")
            return Match(subject, tuple(branches))
        if tok.kind == "ident" and self.peek().text == "(":
            name = self.ident().text
            self.eat("(")
            args = self.names(")")
            self.eat(")")
            call = Call(name, args)
            self.calls.append((call, tok))
            return call
        self.error(f"expected a process, found {tok.text or 'end of input'!r}")

    def branch(self) -> tuple[Name, Term]:
        label = _name(self.ident().text)
        if self.tok.kind != "fat":
            self.error("expected '=>'")
        self.i += 1
        return label, self.proc()


def _resolve(prog: SourceProgram, calls, base: dict[str, Definition]) -> list[ParseDiagnostic]:
    diags = []
    for call, tok in calls:
        d = prog.env.get(call.def_name) or base.get(call.def_name)
        if d is None:
            diags.append(ParseDiagnostic("error", f"unknown definition {call.def_name!r}", tok.line, tok.column))
        elif len(d.params) != len(call.args):
            diags.append(
                ParseDiagnostic(
                    "error",
                    f"{call.def_name} expects {len(d.params)} argument(s), got {len(call.args)}",
                    tok.line,
                    tok.column,
                )
            )
    return diags


def check(text: str, base: dict[str, Definition] | None = None) -> list[ParseDiagnostic]:
    """All diagnostics for ``text``; empty when it parses and resolves."""
    p = _Parser.__new__(_Parser)
    try:
        p.__init__(text)
        prog, diags = p.program()
    except ParseError as e:
        return e.diagnostics
    return diags + _resolve(prog, p.calls, base or {})


def parse_program(text: str, base: dict[str, Definition] | None = None) -> SourceProgram:
    p = _Parser(text)
    prog, diags = p.program()
    diags += _resolve(prog, p.calls, base or {})
    if diags:
        raise ParseError(diags)
    return prog


def parse(text: str, base: dict[str, Definition] | None = None) -> tuple[dict[str, Definition], list[tuple[int, Call]]]:
    """Parse a program into its definitions and owner entry points.

    Calls may refer to definitions in ``base``; the returned env holds only
    the definitions written in ``text``.
    """
    prog = parse_program(text, base)
    return prog.env, prog.entries


def parse_term(text: str) -> Term:
    p = _Parser(text)
    p.calls = []
    t = p.proc()
    if p.tok.kind != "eof":
        p.error(f"unexpected {p.tok.text!r}")
    return t


def format_definition(name: str, d: Definition) -> str:
    return f"{name}({', '.join(map(str, d.params))}) = {format_term(d.body)}"


def pretty_print(env: dict[str, Definition], entries: list[tuple[int, Call]] = ()) -> str:
    lines = [format_definition(name, d) for name, d in env.items()]
    lines += [f"owner {oid}: {format_term(call)}" for oid, call in entries]
    return "\n".join(lines) + ("\n" if lines else "")
