"""Text syntax for choreographies and endpoint programs.

Choreography files hold one instruction per line (``;`` also separates)::

    process warehouse payment
    init warehouse.order = 7
    transaction charge fail_above 10

    warehouse.stock := reserve(order)
    warehouse.order -> payment.order
    if payment.lt(order, 5) {
      payment -> warehouse[SMALL]
    } else {
      payment -> warehouse[LARGE]
    }

``process``, ``init`` and ``transaction`` lines are directives shared with
endpoint files, which wrap each program in ``process NAME { ... }``.
A call ``p.x := f(e)`` is a transaction unless ``f`` is a registered
function.  Transactions without a ``transaction`` line commit their input
unchanged, except names starting with ``fail``, which always fail.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field

from . import chor as C_
from . import net as N_
from .state import Env, builtin_transaction, make_store
from .values import (
    DEFAULT_FUNCTIONS,
    UNIT,
    Call,
    Lit,
    Var,
    format_expr,
    format_value,
)


class DSLSyntaxError(Exception):
    def __init__(self, msg: str, filename: str = "<string>", line: int = 0, col: int = 0):
        self.msg, self.filename, self.line, self.col = msg, filename, line, col
        super().__init__(f"{filename}:{line}:{col}: {msg}")


_TOKEN = re.compile(
    r"""
    (?P<ws>[ \t\r]+)
  | (?P<comment>(?:\#|//)[^\n]*)
  | (?P<nl>\n)
  | (?P<string>"(?:[^"\\\n]|\\.)*")
  | (?P<int>-?\d+)
  | (?P<ident>[A-Za-z_][A-Za-z0-9_]*)
  | (?P<op>\(\+\)|->|:=|[{}()\[\],.:;!?&=])
    """,
    re.VERBOSE,
)


@dataclass(frozen=True, slots=True)
class Tok:
    kind: str  # ident | int | string | op | nl | eof
    text: str
    line: int
    col: int


def tokenize(text: str, filename: str = "<string>") -> list[Tok]:
    out = []
    line, line_start, pos = 1, 0, 0
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if m is None:
            raise DSLSyntaxError(f"unexpected character {text[pos]!r}", filename, line, pos - line_start + 1)
        kind = m.lastgroup
        col = pos - line_start + 1
        if kind == "nl":
            out.append(Tok("nl", "\n", line, col))
            line += 1
            line_start = m.end()
        elif kind not in ("ws", "comment"):
            out.append(Tok(kind, m.group(), line, col))
        pos = m.end()
    out.append(Tok("eof", "", line, pos - line_start + 1))
    return out


class _Parser:
    def __init__(self, text, filename, functions):
        self.toks = tokenize(text, filename)
        self.i = 0
        self.filename = filename
        self.functions = functions
        self.processes: list[str] = []
        self.init: dict = {}
        self.tdefs: dict = {}

    # -- token helpers
    def peek(self, k=0) -> Tok:
        return self.toks[min(self.i + k, len(self.toks) - 1)]

    def next(self) -> Tok:
        t = self.toks[self.i]
        self.i += 1
        return t

    def error(self, msg, tok=None):
        tok = tok or self.peek()
        raise DSLSyntaxError(msg, self.filename, tok.line, tok.col)

    def at(self, text) -> bool:
        t = self.peek()
        return t.kind == "op" and t.text == text

    def expect(self, text) -> Tok:
        if not self.at(text):
            t = self.peek()
            self.error(f"expected {text!r}, found {t.text or t.kind!r}")
        return self.next()

    def ident(self, what="name") -> str:
        t = self.peek()
        if t.kind != "ident":
            self.error(f"expected {what}, found {t.text or t.kind!r}")
        return self.next().text

    def skip_separators(self):
        while self.peek().kind == "nl" or self.at(";"):
            self.next()

    def end_of_statement(self):
        if self.peek().kind in ("nl", "eof") or self.at(";") or self.at("}"):
            return
        self.error(f"unexpected {self.peek().text!r} after statement")

    # -- expressions
    def expr(self):
        t = self.peek()
        if t.kind == "int":
            self.next()
            return Lit(int(t.text))
        if t.kind == "string":
            self.next()
            return Lit(_unescape(t.text[1:-1]))
        if t.kind == "ident":
            self.next()
            if t.text == "true":
                return Lit(True)
            if t.text == "false":
                return Lit(False)
            if self.at("("):
                self.next()
                args = []
                if not self.at(")"):
                    args.append(self.expr())
                    while self.at(","):
                        self.next()
                        args.append(self.expr())
                self.expect(")")
                return Call(t.text, tuple(args))
            return Var(t.text)
        if self.at("("):
            self.next()
            self.expect(")")
            return Lit(UNIT)
        self.error(f"expected expression, found {t.text or t.kind!r}")

    def is_transaction(self, e) -> bool:
        if type(e) is not Call:
            return False
        if e.fn in self.tdefs:
            return True
        return e.fn not in self.functions

    def literal(self):
        tok = self.peek()
        e = self.expr()
        if type(e) is not Lit:
            self.error("expected a literal value", tok)
        return e.value

    # -- directives
    def directive(self) -> bool:
        t = self.peek()
        if t.kind != "ident" or self.peek(1).kind == "op" and self.peek(1).text in (".", "!", "?", "(+)", "&", ":=", "->", "{"):
            return False
        if t.text in ("process", "processes"):
            self.next()
            while self.peek().kind == "ident":
                self.processes.append(self.next().text)
                if self.at(","):
                    self.next()
            return True
        if t.text == "init":
            self.next()
            p = self.ident("process")
            self.expect(".")
            x = self.ident("variable")
            self.expect("=")
            self.init.setdefault(p, {})[x] = self.literal()
            return True
        if t.text == "transaction":
            self.next()
            name = self.ident("transaction name")
            kind = self.ident("transaction kind")
            arg = None
            if self.peek().kind == "int":
                arg = int(self.next().text)
            try:
                self.tdefs[name] = builtin_transaction(name, kind, arg)
            except ValueError as exc:
                self.error(str(exc), t)
            return True
        return False

    def env(self, used_processes, used_transactions) -> Env:
        procs = set(self.processes) | set(used_processes) | set(self.init)
        tdefs = dict(self.tdefs)
        for name in used_transactions:
            if name not in tdefs:
                tdefs[name] = builtin_transaction(name, "fail" if name.startswith("fail") else "ok")
        return Env(tuple(procs), self.functions, tdefs, make_store(self.init))

    # -- choreographies
    def chor_block(self, closing: bool) -> tuple:
        out = []
        while True:
            self.skip_separators()
            t = self.peek()
            if t.kind == "eof":
                if closing:
                    self.error("unexpected end of input, missing '}'")
                return tuple(out)
            if closing and self.at("}"):
                self.next()
                return tuple(out)
            if not closing and self.directive():
                self.end_of_statement()
                continue
            out.append(self.chor_instr())
            self.end_of_statement()

    def chor_instr(self):
        start = self.peek()
        if start.kind == "ident" and start.text == "if" and self.peek(1).kind == "ident" and self.peek(2).kind == "op" and self.peek(2).text == ".":
            self.next()
            p = self.ident("process")
            self.expect(".")
            e = self.expr()
            self.expect("{")
            then = self.chor_block(True)
            orelse = ()
            if self.peek().kind == "ident" and self.peek().text == "else":
                self.next()
                self.expect("{")
                orelse = self.chor_block(True)
            return C_.Cond(p, e, then, orelse)
        p = self.ident("process")
        if self.at("->"):
            self.next()
            q = self.ident("process")
            self.expect("[")
            label = self.ident("label")
            self.expect("]")
            self._no_self(p, q, start)
            return C_.SelSend(p, q, label)
        self.expect(".")
        e = self.expr()
        if self.at(":="):
            if type(e) is not Var:
                self.error("left side of ':=' must be a variable", start)
            self.next()
            rhs = self.expr()
            if self.is_transaction(rhs):
                if len(rhs.args) != 1:
                    self.error(f"transaction {rhs.fn} takes exactly one argument", start)
                return C_.Trans(p, e.name, rhs.fn, rhs.args[0])
            return C_.Assign(p, e.name, rhs)
        self.expect("->")
        q = self.ident("process")
        self.expect(".")
        x = self.ident("variable")
        self._no_self(p, q, start)
        return C_.Send(p, e, q, x)

    def _no_self(self, p, q, tok):
        if p == q:
            self.error(f"process {p} communicates with itself", tok)

    # -- endpoint programs
    def net_file(self) -> dict:
        programs = {}
        while True:
            self.skip_separators()
            t = self.peek()
            if t.kind == "eof":
                return programs
            if t.kind == "ident" and t.text == "process" and self.peek(1).kind == "ident" and self.peek(2).kind == "op" and self.peek(2).text == "{":
                self.next()
                name = self.ident("process")
                if name in programs:
                    self.error(f"duplicate program for {name}", t)
                self.expect("{")
                programs[name] = self.proc_block(name)
                continue
            if self.directive():
                self.end_of_statement()
                continue
            self.error(f"expected 'process NAME {{' or a directive, found {t.text!r}")

    def proc_block(self, me) -> tuple:
        out = []
        while True:
            self.skip_separators()
            if self.peek().kind == "eof":
                self.error("unexpected end of input, missing '}'")
            if self.at("}"):
                self.next()
                return tuple(out)
            out.append(self.proc_instr(me))
            self.end_of_statement()

    def proc_instr(self, me):
        start = self.peek()
        if start.kind == "ident" and start.text == "if" and not (self.peek(1).kind == "op" and self.peek(1).text in ("!", "?", "(+)", "&", ":=")):
            self.next()
            e = self.expr()
            self.expect("{")
            then = self.proc_block(me)
            orelse = ()
            if self.peek().kind == "ident" and self.peek().text == "else":
                self.next()
                self.expect("{")
                orelse = self.proc_block(me)
            return N_.Cond(e, then, orelse)
        name = self.ident("process or variable")
        if self.at("!"):
            self.next()
            self._no_self(me, name, start)
            return N_.SendTo(name, self.expr())
        if self.at("?"):
            self.next()
            self._no_self(me, name, start)
            return N_.RecvFrom(name, self.ident("variable"))
        if self.at("(+)"):
            self.next()
            self._no_self(me, name, start)
            return N_.Select(name, self.ident("label"))
        if self.at("&"):
            self.next()
            self._no_self(me, name, start)
            self.expect("{")
            branches = []
            while True:
                self.skip_separators()
                if self.at("}"):
                    self.next()
                    break
                lab_tok = self.peek()
                lab = self.ident("label")
                self.expect(":")
                self.expect("{")
                if any(lab == b for b, _ in branches):
                    self.error(f"duplicate branch label {lab}", lab_tok)
                branches.append((lab, self.proc_block(me)))
                if self.at(","):
                    self.next()
            if not branches:
                self.error("branch needs at least one label", start)
            return N_.Branch(name, tuple(branches))
        if self.at(":="):
            self.next()
            rhs = self.expr()
            if self.is_transaction(rhs):
                if len(rhs.args) != 1:
                    self.error(f"transaction {rhs.fn} takes exactly one argument", start)
                return N_.Trans(name, rhs.fn, rhs.args[0])
            return N_.Assign(name, rhs)
        self.error(f"expected '!', '?', '(+)', '&' or ':=' after {name!r}")


def _unescape(s: str) -> str:
    return re.sub(r"\\(.)", lambda m: {"n": "\n", "t": "\t"}.get(m.group(1), m.group(1)), s)


# -- entry points ------------------------------------------------------------------------


def parse_chor(text: str, filename: str = "<string>", functions=DEFAULT_FUNCTIONS) -> C_.Saga:
    ps = _Parser(text, filename, functions)
    chor = ps.chor_block(False)
    used_t = [t for _, t in C_.transactions_of(chor)]
    return C_.Saga(chor, ps.env(C_.processes_of(chor), used_t))


@dataclass(frozen=True)
class NetSource:
    programs: dict
    env: Env = field(repr=False)

    def initial(self) -> N_.NetConfig:
        return N_.make_network(self.programs, self.env)


def _program_peers_and_transactions(P, peers, trans):
    for i in P:
        t = type(i)
        if t is N_.SendTo or t is N_.Select:
            peers.add(i.q)
        elif t is N_.RecvFrom:
            peers.add(i.p)
        elif t is N_.Branch:
            peers.add(i.p)
            for _, sub in i.branches:
                _program_peers_and_transactions(sub, peers, trans)
        elif t is N_.Cond:
            _program_peers_and_transactions(i.then, peers, trans)
            _program_peers_and_transactions(i.orelse, peers, trans)
        elif t is N_.Trans:
            trans.append(i.t)


def parse_network(text: str, filename: str = "<string>", functions=DEFAULT_FUNCTIONS) -> NetSource:
    ps = _Parser(text, filename, functions)
    programs = ps.net_file()
    peers, trans = set(programs), []
    for P in programs.values():
        _program_peers_and_transactions(P, peers, trans)
    return NetSource(programs, ps.env(peers, trans))


def parse_program(text: str, me: str, filename: str = "<string>", functions=DEFAULT_FUNCTIONS) -> tuple:
    """Parse a bare instruction list for process ``me`` (no ``process`` wrapper)."""
    ps = _Parser(text + "\n}", filename, functions)
    return ps.proc_block(me)


# -- printers -------------------------------------------------------------------------------


def _directives(env: Env, used_processes) -> list[str]:
    lines = [f"process {' '.join(env.processes)}"] if env.processes else []
    for (p, x), v in sorted(env.sigma_start.items()):
        lines.append(f"init {p}.{x} = {format_value(v)}")
    for name in sorted(env.transactions):
        spec = env.transactions[name].spec
        if spec is not None:
            lines.append(f"transaction {name} {' '.join(str(s) for s in spec)}")
    return lines


def format_saga(saga: C_.Saga) -> str:
    head = _directives(saga.env, C_.processes_of(saga.chor))
    body = C_.format_chor(saga.chor)
    return "\n".join(head + ([""] if head else []) + ([body] if body else [])) + "\n"


def format_network(programs: dict, env: Env | None = None) -> str:
    lines = _directives(env, programs) + [""] if env is not None else []
    for p in sorted(programs):
        lines.append(f"process {p} {{")
        body = N_.format_program(programs[p], 1)
        if body:
            lines.append(body)
        lines.append("}")
    return "\n".join(lines) + "\n"


__all__ = [
    "DSLSyntaxError", "tokenize", "parse_chor", "parse_network", "parse_program",
    "NetSource", "format_saga", "format_network", "format_expr",
]
