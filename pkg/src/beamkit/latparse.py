"""Parser and executor for the MAD-X-flavored lattice and job language.

Statements terminate with ``;``.  Supported forms:

    name = expr;                    immediate assignment
    name := expr;                   deferred assignment (re-evaluated on read)
    name: kind, attr=expr, ...;     element definition (or clone of an element)
    name: line = (items);           beam line, items may repeat: 2*(a, b)
    name: sequence, refer="entry", l=expr;  ...placements...  endsequence;
    command, attr=expr, ...;        command dispatch (survey, twiss, ...)
    call, file="other.seq";         include with cycle detection
    send(expr, ...);                emit values through the active send hook

Expressions use + - * / ^ ( ), numbers, names (case-insensitive, dots
allowed), strings, brace lists, and the builtins sqrt, sin, cos, pi.
Precedence is ^ above unary minus above * / above + -, so -3^2 = -9; this
is fixed here, not claimed MAD-X compatible.  The parser is pure; execute
mutates a single Env.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

from . import tpsa as tp
from .lattice import (BLine, Beam, Deferred, Element, Env, LatticeError,
                      Repeat, build_sequence, ELEMENT_KINDS)
from .mtable import MTable
from .tpsa import Tpsa

__all__ = ["parse", "unparse", "execute", "eval_expr", "ParseError", "LatError"]


class ParseError(ValueError):
    def __init__(self, msg: str, line: int, col: int):
        super().__init__(f"{line}:{col}: {msg}")
        self.line = line
        self.col = col


class LatError(ValueError):
    """Execution-time error (unknown command, bad attribute, ...)."""


# -- lexer --------------------------------------------------------------------

_PUNCT = ("(", ")", "{", "}", ",", ";", "=", "+", "-", "*", "/", "^", ":")


@dataclass(frozen=True)
class Tok:
    kind: str  # name num str op end
    val: object
    line: int
    col: int


def _lex(src: str) -> list[Tok]:
    toks: list[Tok] = []
    i, line, col = 0, 1, 1
    n = len(src)
    while i < n:
        c = src[i]
        if c == "\n":
            i += 1
            line += 1
            col = 1
            continue
        if c.isspace():
            i += 1
            col += 1
            continue
        if c == "!" or src.startswith("//", i):
            while i < n and src[i] != "\n":
                i += 1
            continue
        if c == '"' or c == "'":
            j = src.find(c, i + 1)
            if j < 0:
                raise ParseError("unterminated string", line, col)
            toks.append(Tok("str", src[i + 1:j], line, col))
            col += j - i + 1
            i = j + 1
            continue
        if c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            seen_e = False
            while j < n and (src[j].isdigit() or src[j] == "." or
                             (src[j] in "eE" and not seen_e and j + 1 < n and
                              (src[j + 1].isdigit() or src[j + 1] in "+-")) or
                             (src[j] in "+-" and j > i and src[j - 1] in "eE")):
                if src[j] in "eE":
                    seen_e = True
                j += 1
            try:
                v = float(src[i:j])
            except ValueError:
                raise ParseError(f"bad number {src[i:j]!r}", line, col) from None
            toks.append(Tok("num", v, line, col))
            col += j - i
            i = j
            continue
        if c.isalpha() or c == "_" or c == "$":
            j = i
            while j < n and (src[j].isalnum() or src[j] in "._$"):
                j += 1
            toks.append(Tok("name", src[i:j].lower(), line, col))
            col += j - i
            i = j
            continue
        if src.startswith(":=", i):
            toks.append(Tok("op", ":=", line, col))
            i += 2
            col += 2
            continue
        if c in _PUNCT:
            toks.append(Tok("op", c, line, col))
            i += 1
            col += 1
            continue
        raise ParseError(f"unexpected character {c!r}", line, col)
    toks.append(Tok("end", None, line, col))
    return toks


# -- AST -----------------------------------------------------------------------

@dataclass(frozen=True)
class Num:
    v: float


@dataclass(frozen=True)
class Str:
    v: str


@dataclass(frozen=True)
class Name:
    v: str


@dataclass(frozen=True)
class Bin:
    op: str
    l: object
    r: object


@dataclass(frozen=True)
class Un:
    op: str
    v: object


@dataclass(frozen=True)
class Call:
    fn: str
    args: tuple


@dataclass(frozen=True)
class ListExpr:
    items: tuple


@dataclass(frozen=True)
class Attr:
    name: str
    expr: object
    deferred: bool = False


@dataclass(frozen=True)
class Assign:
    name: str
    expr: object
    deferred: bool


@dataclass(frozen=True)
class ElemDef:
    name: str
    parent: str
    attrs: tuple


@dataclass(frozen=True)
class LineItem:
    count: int | None  # None = bare item
    item: object       # str name or tuple of LineItems


@dataclass(frozen=True)
class LineDef:
    name: str
    items: tuple


@dataclass(frozen=True)
class Placement:
    name: str
    attrs: tuple


@dataclass(frozen=True)
class SeqDef:
    name: str
    attrs: tuple
    placements: tuple


@dataclass(frozen=True)
class Command:
    name: str
    attrs: tuple


@dataclass(frozen=True)
class CallStmt:
    fn: str
    args: tuple


# -- parser -----------------------------------------------------------------------

class _Parser:
    def __init__(self, toks: list[Tok]):
        self.toks = toks
        self.i = 0

    def peek(self, ahead: int = 0) -> Tok:
        return self.toks[min(self.i + ahead, len(self.toks) - 1)]

    def next(self) -> Tok:
        t = self.toks[self.i]
        if t.kind != "end":
            self.i += 1
        return t

    def err(self, msg: str, tok: Tok | None = None):
        t = tok or self.peek()
        raise ParseError(msg, t.line, t.col)

    def expect_op(self, op: str) -> Tok:
        t = self.next()
        if t.kind != "op" or t.val != op:
            self.err(f"expected {op!r}, got {t.val!r}", t)
        return t

    def expect_name(self) -> str:
        t = self.next()
        if t.kind != "name":
            self.err(f"expected a name, got {t.val!r}", t)
        return t.val

    # expressions -------------------------------------------------------

    def expr(self):
        node = self.term()
        while self.peek().kind == "op" and self.peek().val in "+-":
            op = self.next().val
            node = Bin(op, node, self.term())
        return node

    def term(self):
        node = self.factor()
        while self.peek().kind == "op" and self.peek().val in "*/":
            op = self.next().val
            node = Bin(op, node, self.factor())
        return node

    def factor(self):
        t = self.peek()
        if t.kind == "op" and t.val in "+-":
            self.next()
            return Un(t.val, self.factor())
        return self.power()

    def power(self):
        base = self.atom()
        if self.peek().kind == "op" and self.peek().val == "^":
            self.next()
            return Bin("^", base, self.factor())
        return base

    def atom(self):
        t = self.next()
        if t.kind == "num":
            return Num(t.val)
        if t.kind == "str":
            return Str(t.val)
        if t.kind == "name":
            if self.peek().kind == "op" and self.peek().val == "(":
                self.next()
                args = []
                if not (self.peek().kind == "op" and self.peek().val == ")"):
                    args.append(self.expr())
                    while self.peek().kind == "op" and self.peek().val == ",":
                        self.next()
                        args.append(self.expr())
                self.expect_op(")")
                return Call(t.val, tuple(args))
            return Name(t.val)
        if t.kind == "op" and t.val == "(":
            node = self.expr()
            self.expect_op(")")
            return node
        if t.kind == "op" and t.val == "{":
            items = []
            if not (self.peek().kind == "op" and self.peek().val == "}"):
                items.append(self.expr())
                while self.peek().kind == "op" and self.peek().val == ",":
                    self.next()
                    items.append(self.expr())
            self.expect_op("}")
            return ListExpr(tuple(items))
        self.err(f"expected an expression, got {t.val!r}", t)

    # statements ---------------------------------------------------------

    def attr_list(self) -> tuple:
        attrs = []
        while self.peek().kind == "op" and self.peek().val == ",":
            self.next()
            name = self.expect_name()
            t = self.next()
            if t.kind != "op" or t.val not in ("=", ":="):
                self.err(f"expected = or := after attribute {name!r}", t)
            attrs.append(Attr(name, self.expr(), t.val == ":="))
        return tuple(attrs)

    def line_items(self) -> tuple:
        self.expect_op("(")
        items = []
        while True:
            items.append(self.line_item())
            t = self.next()
            if t.kind == "op" and t.val == ",":
                continue
            if t.kind == "op" and t.val == ")":
                break
            self.err("expected ',' or ')' in line definition", t)
        return tuple(items)

    def line_item(self) -> LineItem:
        t = self.peek()
        if t.kind == "num":
            self.next()
            if not float(t.val).is_integer():
                self.err("repetition count must be an integer", t)
            self.expect_op("*")
            inner = self.line_item()
            return LineItem(int(t.val), inner.item if inner.count is None else inner)
        if t.kind == "op" and t.val == "(":
            return LineItem(None, self.line_items())
        if t.kind == "name":
            self.next()
            return LineItem(None, t.val)
        self.err("expected a line item", t)

    def statement(self):
        t = self.peek()
        if t.kind == "end":
            return None
        name = self.expect_name()
        t = self.next()
        if t.kind == "op" and t.val == "(":
            args = []
            if not (self.peek().kind == "op" and self.peek().val == ")"):
                args.append(self.expr())
                while self.peek().kind == "op" and self.peek().val == ",":
                    self.next()
                    args.append(self.expr())
            self.expect_op(")")
            self.expect_op(";")
            return CallStmt(name, tuple(args))
        if t.kind == "op" and t.val in ("=", ":="):
            e = self.expr()
            self.expect_op(";")
            return Assign(name, e, t.val == ":=")
        if t.kind == "op" and t.val == ":":
            parent = self.expect_name()
            if parent == "line":
                self.expect_op("=")
                items = self.line_items()
                self.expect_op(";")
                return LineDef(name, items)
            if parent == "sequence":
                attrs = self.attr_list()
                self.expect_op(";")
                placements = []
                while True:
                    t2 = self.peek()
                    if t2.kind == "end":
                        self.err(f"sequence {name!r} missing endsequence", t2)
                    pname = self.expect_name()
                    if pname == "endsequence":
                        self.expect_op(";")
                        break
                    pattrs = self.attr_list()
                    self.expect_op(";")
                    placements.append(Placement(pname, pattrs))
                return SeqDef(name, attrs, tuple(placements))
            attrs = self.attr_list()
            self.expect_op(";")
            return ElemDef(name, parent, attrs)
        if t.kind == "op" and t.val in (",", ";"):
            attrs = ()
            if t.val == ",":
                self.i -= 1
                attrs = self.attr_list()
                self.expect_op(";")
            return Command(name, attrs)
        self.err(f"cannot parse statement starting at {name!r}", t)

    def all_statements(self) -> list:
        out = []
        while True:
            s = self.statement()
            if s is None:
                return out
            out.append(s)


def parse(src: str) -> list:
    """Tokenize and parse a job/lattice script into statements."""
    return _Parser(_lex(src)).all_statements()


# -- unparse ---------------------------------------------------------------------

def _fmt_expr(e) -> str:
    if isinstance(e, Num):
        v = e.v
        return repr(int(v)) if float(v).is_integer() and abs(v) < 1e15 else repr(v)
    if isinstance(e, Str):
        return f'"{e.v}"'
    if isinstance(e, Name):
        return e.v
    if isinstance(e, Un):
        return f"{e.op}({_fmt_expr(e.v)})"
    if isinstance(e, Bin):
        return f"({_fmt_expr(e.l)} {e.op} {_fmt_expr(e.r)})"
    if isinstance(e, Call):
        return f"{e.fn}({', '.join(_fmt_expr(a) for a in e.args)})"
    if isinstance(e, ListExpr):
        return "{" + ", ".join(_fmt_expr(a) for a in e.items) + "}"
    raise TypeError(e)


def _fmt_attrs(attrs) -> str:
    return "".join(f", {a.name} {':=' if a.deferred else '='} {_fmt_expr(a.expr)}"
                   for a in attrs)


def _fmt_item(it: LineItem) -> str:
    if isinstance(it.item, tuple):
        inner = "(" + ", ".join(_fmt_item(x) for x in it.item) + ")"
    elif isinstance(it.item, LineItem):
        inner = _fmt_item(it.item)
    else:
        inner = it.item
    return inner if it.count is None else f"{it.count}*{inner}"


def unparse(stmts) -> str:
    """Regenerate canonical source; parse(unparse(parse(s))) == parse(s)."""
    out = []
    for s in stmts:
        if isinstance(s, Assign):
            out.append(f"{s.name} {':=' if s.deferred else '='} {_fmt_expr(s.expr)};")
        elif isinstance(s, ElemDef):
            out.append(f"{s.name}: {s.parent}{_fmt_attrs(s.attrs)};")
        elif isinstance(s, LineDef):
            out.append(f"{s.name}: line = ({', '.join(_fmt_item(i) for i in s.items)});")
        elif isinstance(s, SeqDef):
            out.append(f"{s.name}: sequence{_fmt_attrs(s.attrs)};")
            for p in s.placements:
                out.append(f"  {p.name}{_fmt_attrs(p.attrs)};")
            out.append("endsequence;")
        elif isinstance(s, Command):
            out.append(f"{s.name}{_fmt_attrs(s.attrs)};")
        elif isinstance(s, CallStmt):
            out.append(f"{s.fn}({', '.join(_fmt_expr(a) for a in s.args)});")
        else:
            raise TypeError(s)
    return "\n".join(out) + "\n"


# -- evaluation --------------------------------------------------------------------

_BUILTIN_FUNCS = {"sqrt": tp.sqrt, "sin": tp.sin, "cos": tp.cos}


def _member(obj, attr: str):
    if isinstance(obj, MTable):
        if attr in obj:
            return obj.col(attr)
        if attr in obj.header:
            return obj.header[attr]
        raise LatError(f"table {obj.name!r} has no column or header {attr!r}")
    if isinstance(obj, Element):
        return obj.get(attr)
    if isinstance(obj, Beam):
        return getattr(obj, attr)
    if isinstance(obj, Env):
        return obj[attr]
    raise LatError(f"cannot read member {attr!r} of {type(obj).__name__}")


def _resolve_name(name: str, env: Env):
    if env.defined(name):
        return env[name]
    if "." in name:
        # longest defined prefix, remaining segments as member lookups
        parts = name.split(".")
        for cut in range(len(parts) - 1, 0, -1):
            prefix = ".".join(parts[:cut])
            if env.defined(prefix):
                obj = env[prefix]
                for attr in parts[cut:]:
                    obj = _member(obj, attr)
                return obj
    if name == "pi":
        return math.pi
    return env[name]  # auto-create as zero


def eval_expr(node, env: Env):
    if isinstance(node, Num):
        return node.v
    if isinstance(node, Str):
        return node.v
    if isinstance(node, Name):
        return _resolve_name(node.v, env)
    if isinstance(node, Un):
        v = eval_expr(node.v, env)
        return -v if node.op == "-" else v
    if isinstance(node, Bin):
        a = eval_expr(node.l, env)
        b = eval_expr(node.r, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            return a / b
        if node.op == "^":
            if isinstance(a, Tpsa):
                return a ** int(b)
            return a ** b
        raise LatError(f"unknown operator {node.op!r}")
    if isinstance(node, Call):
        fn = _BUILTIN_FUNCS.get(node.fn)
        if fn is None:
            raise LatError(f"unknown function {node.fn!r}")
        args = [eval_expr(a, env) for a in node.args]
        return fn(*args)
    if isinstance(node, ListExpr):
        return [eval_expr(a, env) for a in node.items]
    raise TypeError(node)


def _attr_value(a: Attr, env: Env):
    if a.deferred:
        return Deferred(lambda node=a.expr: eval_expr(node, env), _fmt_expr(a.expr))
    return eval_expr(a.expr, env)


def _item_to_obj(it, env: Env):
    if isinstance(it, LineItem):
        if it.count is not None:
            return Repeat(it.count, _item_to_obj(it.item, env))
        return _item_to_obj(it.item, env)
    if isinstance(it, tuple):
        return BLine([_item_to_obj(x, env) for x in it])
    v = env[it]
    if not isinstance(v, (Element, BLine)):
        raise LatError(f"line item {it!r} is not an element or line")
    return v


def _line_to_items(items, env: Env):
    return [_item_to_obj(it, env) for it in items]


def execute(stmts, env: Env, commands=None, cwd: str = ".") -> None:
    """Run statements against an env, dispatching commands to a registry."""
    if commands is None:
        from .jobs import default_commands
        commands = default_commands()
    for s in stmts:
        _exec_one(s, env, commands, cwd)


def _exec_one(s, env: Env, commands, cwd: str) -> None:
    if isinstance(s, Assign):
        if s.deferred:
            env[s.name] = Deferred(lambda node=s.expr: eval_expr(node, env),
                                   _fmt_expr(s.expr))
        else:
            env[s.name] = eval_expr(s.expr, env)
        return
    if isinstance(s, ElemDef):
        attrs = {a.name: _attr_value(a, env) for a in s.attrs}
        if s.parent in ELEMENT_KINDS:
            env[s.name] = Element(s.name, s.parent, **attrs)
        else:
            parent = env[s.parent] if env.defined(s.parent) else None
            if not isinstance(parent, Element):
                raise LatError(f"unknown element kind or parent {s.parent!r} "
                               f"in definition of {s.name!r}")
            env[s.name] = parent.clone(s.name, **attrs)
        return
    if isinstance(s, LineDef):
        env[s.name] = BLine(_line_to_items(s.items, env), s.name)
        return
    if isinstance(s, SeqDef):
        attrs = {a.name: _attr_value(a, env) for a in s.attrs}
        refer = attrs.pop("refer", "centre")
        ltot = attrs.pop("l", None)
        line = attrs.pop("line", None)
        if line is not None:
            # sequence assembled from a beam line (elements carry at= offsets)
            if s.placements:
                raise LatError(f"sequence {s.name!r} takes line= or placements, not both")
            if not isinstance(line, BLine):
                raise LatError(f"sequence {s.name!r}: line= must name a line")
            from .lattice import seq_from_line
            env[s.name] = seq_from_line(s.name, line.items, refer=refer,
                                        l=None if ltot is None else float(ltot))
            return
        placements = []
        for p in s.placements:
            pv = env[p.name] if env.defined(p.name) else None
            pattrs = {a.name: _attr_value(a, env) for a in p.attrs}
            at = pattrs.pop("at", None)
            if at is None:
                raise LatError(f"placement {p.name!r} in sequence {s.name!r} needs at=")
            if isinstance(pv, Element):
                elem = pv.clone(p.name, **pattrs) if pattrs else pv
                placements.append((elem, float(at)))
            elif isinstance(pv, BLine):
                raise LatError(f"cannot place line {p.name!r} inside a sequence block")
            else:
                raise LatError(f"placement {p.name!r} is not a defined element")
        env[s.name] = build_sequence(s.name, placements, refer=refer,
                                     l=None if ltot is None else float(ltot))
        return
    if isinstance(s, Command):
        if s.name == "call":
            attrs = {a.name: _attr_value(a, env) for a in s.attrs}
            _do_call(attrs, env, commands, cwd)
            return
        handler = commands.get(s.name)
        if handler is None:
            raise LatError(f"unknown command {s.name!r}")
        attrs = {}
        for a in s.attrs:
            # tbl= names the env slot receiving the result, start= an element
            if a.name in ("tbl", "start") and isinstance(a.expr, Name):
                attrs[a.name] = a.expr.v
            else:
                attrs[a.name] = _attr_value(a, env)
        handler(env, attrs)
        return
    if isinstance(s, CallStmt):
        handler = commands.get(s.fn)
        if handler is None:
            raise LatError(f"unknown command {s.fn!r}")
        handler(env, {"_args": [eval_expr(a, env) for a in s.args]})
        return
    raise TypeError(s)


def _do_call(attrs, env, commands, cwd):
    path = attrs.get("file")
    if not isinstance(path, str):
        raise LatError("call needs file=\"...\"")
    full = os.path.normpath(os.path.join(cwd, path))
    stack = env.raw("_call_stack") or []
    if full in stack:
        raise LatError(f"recursive call of {full!r}")
    with open(full) as f:
        sub = parse(f.read())
    env["_call_stack"] = stack + [full]
    try:
        for st in sub:
            _exec_one(st, env, commands, os.path.dirname(full) or ".")
    finally:
        env["_call_stack"] = stack


def load_file(path: str, env: Env, commands=None) -> None:
    """Parse and execute one file (used by the CLI and the pipe server)."""
    with open(path) as f:
        stmts = parse(f.read())
    execute(stmts, env, commands, cwd=os.path.dirname(os.path.abspath(path)))
