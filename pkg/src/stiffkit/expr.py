"""Arithmetic expression language for problem files.

Grammar (whitespace-insensitive)::

    expr   := term (('+' | '-') term)*
    term   := unary (('*' | '/') unary)*
    unary  := ('-' | '+') unary | power
    power  := atom ('^' unary)?
    atom   := NUMBER | NAME | NAME '(' expr ')' | '(' expr ')'

``^`` binds tighter than unary minus, so ``-y1^2`` is ``-(y1^2)``, and it is
right associative.  Names are ``t``, ``y1``..``ym``, problem parameters and the
constant ``pi``.  Functions take exactly one argument.

Expressions evaluate in IEEE double precision and never raise: overflow,
division by zero and domain errors produce ``inf``/``nan``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "sinh", "cosh", "tanh", "abs")
CONSTANTS = {"pi": math.pi}

_STATE_RE = re.compile(r"y([1-9][0-9]*)$")


class ExprError(ValueError):
    """Parse error carrying the byte offset into the source text."""

    def __init__(self, message: str, offset: int, source: str = ""):
        self.message = message
        self.offset = offset
        self.source = source
        before = source.encode("utf-8")[:offset].decode("utf-8", errors="ignore")
        self.line = before.count("\n") + 1
        self.col = len(before) - (before.rfind("\n") + 1) + 1
        super().__init__(f"{self.line}:{self.col}: {message}")


# --------------------------------------------------------------------------
# AST


class Node:
    __slots__ = ()


@dataclass(frozen=True)
class Const(Node):
    value: float


@dataclass(frozen=True)
class Var(Node):
    name: str


@dataclass(frozen=True)
class Neg(Node):
    arg: Node


@dataclass(frozen=True)
class BinOp(Node):
    op: str
    left: Node
    right: Node


@dataclass(frozen=True)
class Call(Node):
    func: str
    arg: Node


# --------------------------------------------------------------------------
# lexer / parser

_TOKEN_RE = re.compile(
    r"""
    (?P<ws>\s+)
  | (?P<num>(?:[0-9]+\.?[0-9]*|\.[0-9]+)(?:[eE][+-]?[0-9]+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
    """,
    re.VERBOSE,
)


def _tokenize(source: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    raw = source.encode("utf-8")
    while pos < len(source):
        m = _TOKEN_RE.match(source, pos)
        if m is None:
            offset = len(source[:pos].encode("utf-8"))
            raise ExprError(f"unexpected character {source[pos]!r}", offset, source)
        kind = m.lastgroup
        if kind != "ws":
            tokens.append((kind, m.group(), len(source[:pos].encode("utf-8"))))
        pos = m.end()
    tokens.append(("end", "", len(raw)))
    return tokens


class _Parser:
    def __init__(self, source: str, dim: int | None, params: Iterable[str] | None):
        self.source = source
        self.tokens = _tokenize(source)
        self.i = 0
        self.dim = dim
        self.params = None if params is None else set(params)

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def error(self, message: str, offset: int):
        raise ExprError(message, offset, self.source)

    def expect(self, text: str):
        kind, value, offset = self.take()
        if value != text:
            if text == ")":
                self.error("unbalanced parentheses: expected ')'", offset)
            self.error(f"expected {text!r}", offset)

    def parse(self) -> Node:
        if self.peek()[0] == "end":
            self.error("empty expression", 0)
        node = self.expr()
        kind, value, offset = self.peek()
        if kind != "end":
            if value == ")":
                self.error("unbalanced parentheses: unexpected ')'", offset)
            self.error(f"unexpected token {value!r}", offset)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self) -> Node:
        kind, value, _ = self.peek()
        if kind == "op" and value == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and value == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self) -> Node:
        base = self.atom()
        if self.peek()[1] == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self) -> Node:
        kind, value, offset = self.take()
        if kind == "num":
            return Const(float(value))
        if kind == "name":
            if self.peek()[1] == "(":
                if value not in FUNCTIONS:
                    self.error(f"unknown function {value!r}", offset)
                self.take()
                arg = self.expr()
                if self.peek()[1] == ",":
                    self.error(f"arity mismatch: {value}() takes exactly one argument",
                               self.peek()[2])
                self.expect(")")
                return Call(value, arg)
            if value in FUNCTIONS:
                self.error(f"function {value!r} used without argument", offset)
            return self.name(value, offset)
        if kind == "op" and value == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "end":
            self.error("unexpected end of input", offset)
        if value == ")":
            self.error("unbalanced parentheses: unexpected ')'", offset)
        self.error(f"unexpected token {value!r}", offset)

    def name(self, value: str, offset: int) -> Node:
        if value in CONSTANTS:
            return Const(CONSTANTS[value])
        if value == "t":
            return Var("t")
        m = _STATE_RE.match(value)
        if m:
            if self.dim is not None and int(m.group(1)) > self.dim:
                self.error(f"unknown identifier {value!r} (dimension is {self.dim})", offset)
            return Var(value)
        if self.params is None or value in self.params:
            return Var(value)
        self.error(f"unknown identifier {value!r}", offset)


def parse(source: str, dim: int | None = None, params: Iterable[str] | None = None) -> Node:
    """Parse ``source`` into an AST.

    ``dim`` bounds the admissible state variables ``y1..y{dim}``.  When
    ``params`` is given, any other identifier must be one of those names;
    when it is None every identifier is accepted as a parameter.
    """
    return _Parser(source, dim, params).parse()


# --------------------------------------------------------------------------
# evaluation

_NP_FUNCS: dict[str, Callable] = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "exp": np.exp, "log": np.log,
    "sqrt": np.sqrt, "sinh": np.sinh, "cosh": np.cosh, "tanh": np.tanh, "abs": np.abs,
}


def _lookup(name: str, t, y, params):
    if name == "t":
        return np.float64(t)
    m = _STATE_RE.match(name)
    if m:
        return np.float64(y[int(m.group(1)) - 1])
    return np.float64(params[name])


def evaluate(node: Node, t: float, y: Sequence[float], params: Mapping[str, float] | None = None) -> float:
    """Evaluate by walking the tree; non-finite results propagate."""
    params = params or {}
    with np.errstate(all="ignore"):
        return float(_eval(node, t, y, params))


def _eval(node, t, y, params):
    if isinstance(node, Const):
        return np.float64(node.value)
    if isinstance(node, Var):
        return _lookup(node.name, t, y, params)
    if isinstance(node, Neg):
        return -_eval(node.arg, t, y, params)
    if isinstance(node, Call):
        return _NP_FUNCS[node.func](_eval(node.arg, t, y, params))
    a = _eval(node.left, t, y, params)
    b = _eval(node.right, t, y, params)
    if node.op == "+":
        return a + b
    if node.op == "-":
        return a - b
    if node.op == "*":
        return a * b
    if node.op == "/":
        return a / b
    return np.power(a, b)


# --------------------------------------------------------------------------
# serialization

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2}


def serialize(node: Node) -> str:
    """Render ``node`` as source text that parses back to an equal tree."""
    if isinstance(node, Const):
        return repr(float(node.value))
    if isinstance(node, Var):
        return node.name
    if isinstance(node, Neg):
        return f"-({serialize(node.arg)})"
    if isinstance(node, Call):
        return f"{node.func}({serialize(node.arg)})"
    return f"({serialize(node.left)} {node.op} {serialize(node.right)})"


def variables(node: Node) -> set[str]:
    if isinstance(node, Var):
        return {node.name}
    if isinstance(node, Const):
        return set()
    if isinstance(node, (Neg, Call)):
        return variables(node.arg)
    return variables(node.left) | variables(node.right)


# --------------------------------------------------------------------------
# symbolic differentiation
#
# The smart constructors fold constants and identities.  They never create a
# negative or non-finite Const so that serialize/parse round-trips hold.

ZERO = Const(0.0)
ONE = Const(1.0)


def _const(value: float) -> Node:
    if value < 0:
        return Neg(Const(-value))
    return Const(value)


def _is_const(node: Node, value: float | None = None) -> bool:
    if isinstance(node, Const):
        return value is None or node.value == value
    return False


def add(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return b
    if _is_const(b, 0.0):
        return a
    if isinstance(b, Neg):
        return sub(a, b.arg)
    if _is_const(a) and _is_const(b) and math.isfinite(a.value + b.value):
        return _const(a.value + b.value)
    return BinOp("+", a, b)


def sub(a: Node, b: Node) -> Node:
    if _is_const(b, 0.0):
        return a
    if _is_const(a, 0.0):
        return neg(b)
    if isinstance(b, Neg):
        return add(a, b.arg)
    if _is_const(a) and _is_const(b):
        return _const(a.value - b.value)
    return BinOp("-", a, b)


def neg(a: Node) -> Node:
    if _is_const(a, 0.0):
        return ZERO
    if isinstance(a, Neg):
        return a.arg
    return Neg(a)


def mul(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0) or _is_const(b, 0.0):
        return ZERO
    if _is_const(a, 1.0):
        return b
    if _is_const(b, 1.0):
        return a
    if isinstance(a, Neg):
        return neg(mul(a.arg, b))
    if isinstance(b, Neg):
        return neg(mul(a, b.arg))
    if _is_const(a) and _is_const(b) and math.isfinite(a.value * b.value):
        return _const(a.value * b.value)
    return BinOp("*", a, b)


def div(a: Node, b: Node) -> Node:
    if _is_const(a, 0.0):
        return ZERO
    if _is_const(b, 1.0):
        return a
    if isinstance(a, Neg):
        return neg(div(a.arg, b))
    return BinOp("/", a, b)


def power(a: Node, b: Node) -> Node:
    if _is_const(b, 1.0):
        return a
    if _is_const(b, 0.0):
        return ONE
    return BinOp("^", a, b)


def _dcall(func: str, u: Node) -> Node:
    """Derivative of func at u with respect to u."""
    if func == "sin":
        return Call("cos", u)
    if func == "cos":
        return neg(Call("sin", u))
    if func == "tan":
        return div(ONE, power(Call("cos", u), Const(2.0)))
    if func == "exp":
        return Call("exp", u)
    if func == "log":
        return div(ONE, u)
    if func == "sqrt":
        return div(ONE, mul(Const(2.0), Call("sqrt", u)))
    if func == "sinh":
        return Call("cosh", u)
    if func == "cosh":
        return Call("sinh", u)
    if func == "tanh":
        return sub(ONE, power(Call("tanh", u), Const(2.0)))
    if func == "abs":
        return div(u, Call("abs", u))
    raise ValueError(f"unknown function {func!r}")


def differentiate(node: Node, wrt: str) -> Node:
    """Exact derivative of ``node`` with respect to the variable ``wrt``."""
    if isinstance(node, Const):
        return ZERO
    if isinstance(node, Var):
        return ONE if node.name == wrt else ZERO
    if isinstance(node, Neg):
        return neg(differentiate(node.arg, wrt))
    if isinstance(node, Call):
        du = differentiate(node.arg, wrt)
        if _is_const(du, 0.0):
            return ZERO
        return mul(_dcall(node.func, node.arg), du)
    a, b = node.left, node.right
    da, db = differentiate(a, wrt), differentiate(b, wrt)
    if node.op == "+":
        return add(da, db)
    if node.op == "-":
        return sub(da, db)
    if node.op == "*":
        return add(mul(da, b), mul(a, db))
    if node.op == "/":
        return sub(div(da, b), div(mul(a, db), power(b, Const(2.0))))
    # a ^ b
    if wrt not in variables(b):
        if _is_const(da, 0.0):
            return ZERO
        if _is_const(b):
            exponent = _const(b.value - 1.0)
        else:
            exponent = sub(b, ONE)
        return mul(mul(b, power(a, exponent)), da)
    # general case: a^b * (db*log(a) + b*da/a)
    return mul(node, add(mul(db, Call("log", a)), div(mul(b, da), a)))


# --------------------------------------------------------------------------
# compilation to Python callables


def _codegen(node: Node, consts: list, state_index: Callable[[str], str]) -> str:
    if isinstance(node, Const):
        consts.append(np.float64(node.value))
        return f"_c{len(consts) - 1}"
    if isinstance(node, Var):
        return state_index(node.name)
    if isinstance(node, Neg):
        return f"(-{_codegen(node.arg, consts, state_index)})"
    if isinstance(node, Call):
        return f"_{node.func}({_codegen(node.arg, consts, state_index)})"
    left = _codegen(node.left, consts, state_index)
    right = _codegen(node.right, consts, state_index)
    if node.op == "^":
        return f"_pow({left}, {right})"
    return f"({left} {node.op} {right})"


def compile_nodes(nodes: Sequence[Node], shape: tuple[int, ...] | None = None) -> Callable:
    """Compile a sequence of ASTs into ``fn(t, y, params) -> ndarray``.

    The result has ``shape`` (default ``(len(nodes),)``).  Evaluation is in
    float64 with floating point warnings suppressed.
    """
    consts: list = []

    def state_index(name: str) -> str:
        if name == "t":
            return "_t"
        m = _STATE_RE.match(name)
        if m:
            return f"_y[{int(m.group(1)) - 1}]"
        return f"_p[{name!r}]"

    body = ", ".join(_codegen(n, consts, state_index) for n in nodes)
    namespace = {f"_{k}": v for k, v in _NP_FUNCS.items()}
    namespace["_pow"] = np.power
    namespace.update({f"_c{i}": c for i, c in enumerate(consts)})
    src = f"def _fn(_t, _y, _p):\n    _t = _f64(_t)\n    return [{body}]\n"
    namespace["_f64"] = np.float64
    exec(compile(src, "<stiffkit-expr>", "exec"), namespace)
    raw = namespace["_fn"]
    out_shape = shape or (len(nodes),)

    def fn(t, y, params=None):
        with np.errstate(all="ignore"):
            values = raw(t, np.asarray(y, dtype=float), params or {})
        return np.array(values, dtype=float).reshape(out_shape)

    return fn
