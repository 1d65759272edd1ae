"""Small arithmetic-expression language for user-defined metric coefficients.

Grammar (``^`` and ``**`` are both exponentiation, right associative)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := ('+' | '-') unary | power
    power   := primary (('^' | '**') unary)?
    primary := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Names are either declared variables, the constant ``pi``, or one of the
functions ``exp``, ``sin``, ``cos``, ``pow``.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Mapping, Sequence, Union

import numpy as np
import sympy as sp

from .errors import ExpressionSyntaxError, UnknownIdentifierError

FUNCTIONS = {"exp": 1, "sin": 1, "cos": 1, "pow": 2}
CONSTANTS = {"pi": math.pi}

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.\d*|\.\d+|\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>\*\*|[-+*/^(),]))"
)


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: "Node"


@dataclass(frozen=True)
class Binary:
    op: str
    left: "Node"
    right: "Node"


@dataclass(frozen=True)
class Call:
    func: str
    args: tuple


Node = Union[Num, Var, Unary, Binary, Call]


def _tokenize(source):
    tokens = []
    pos = 0
    while pos < len(source):
        if source[pos:].strip() == "":
            break
        m = _TOKEN.match(source, pos)
        if m is None or m.end() == pos:
            bad = pos + len(source[pos:]) - len(source[pos:].lstrip())
            raise ExpressionSyntaxError(f"unexpected character {source[bad]!r}", bad)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(source)))
    return tokens


class _Parser:
    def __init__(self, source, variables):
        self.source = source
        self.variables = set(variables)
        self.tokens = _tokenize(source)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, text, pos = self.take()
        if text != value or kind == "end":
            what = "end of input" if kind == "end" else repr(text)
            raise ExpressionSyntaxError(f"expected {value!r}, found {what}", pos)

    def parse(self):
        node = self.expr()
        kind, text, pos = self.peek()
        if kind != "end":
            raise ExpressionSyntaxError(f"unexpected token {text!r}", pos)
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = Binary(op, node, self.unary())
        return node

    def unary(self):
        kind, text, _ = self.peek()
        if kind == "op" and text in ("+", "-"):
            self.take()
            return Unary(text, self.unary())
        return self.power()

    def power(self):
        base = self.primary()
        kind, text, _ = self.peek()
        if kind == "op" and text in ("^", "**"):
            self.take()
            return Binary("^", base, self.unary())
        return base

    def primary(self):
        kind, text, pos = self.take()
        if kind == "num":
            return Num(float(text))
        if kind == "name":
            if text in FUNCTIONS:
                self.expect("(")
                args = [self.expr()]
                while self.peek()[1] == ",":
                    self.take()
                    args.append(self.expr())
                self.expect(")")
                if len(args) != FUNCTIONS[text]:
                    raise ExpressionSyntaxError(
                        f"{text}() takes {FUNCTIONS[text]} argument(s), got {len(args)}", pos)
                return Call(text, tuple(args))
            if text in self.variables:
                return Var(text)
            if text in CONSTANTS:
                return Var(text)
            raise UnknownIdentifierError(text, pos)
        if kind == "op" and text == "(":
            node = self.expr()
            self.expect(")")
            return node
        what = "end of input" if kind == "end" else repr(text)
        raise ExpressionSyntaxError(f"unexpected {what}", pos)


@dataclass(frozen=True)
class MetricExpression:
    """A parsed scalar expression over a declared set of variables."""

    source: str
    ast: Node
    variables: tuple

    def __call__(self, *args, **kwargs):
        env = dict(zip(self.variables, args))
        env.update(kwargs)
        return evaluate(self.ast, env)

    def to_sympy(self, symbols: Mapping[str, sp.Symbol] | None = None):
        if symbols is None:
            symbols = {name: sp.Symbol(name, real=True) for name in self.variables}
        return to_sympy(self.ast, symbols)

    def __str__(self):
        return to_source(self.ast)


def parse_metric_expression(source: str, variables: Sequence[str]) -> MetricExpression:
    """Parse ``source`` allowing only the names in ``variables`` as free variables."""
    variables = tuple(variables)
    for name in variables:
        if name in FUNCTIONS or name in CONSTANTS:
            raise ValueError(f"variable name {name!r} is reserved")
    ast = _Parser(source, variables).parse()
    return MetricExpression(source, ast, variables)


def evaluate(node: Node, env: Mapping[str, object]):
    """Evaluate ``node`` with numpy semantics (arrays broadcast elementwise)."""
    if isinstance(node, Num):
        return node.value
    if isinstance(node, Var):
        if node.name in env:
            return env[node.name]
        return CONSTANTS[node.name]
    if isinstance(node, Unary):
        value = evaluate(node.operand, env)
        return -value if node.op == "-" else +value
    if isinstance(node, Binary):
        a = evaluate(node.left, env)
        b = evaluate(node.right, env)
        if node.op == "+":
            return a + b
        if node.op == "-":
            return a - b
        if node.op == "*":
            return a * b
        if node.op == "/":
            return np.divide(a, b) if isinstance(a, np.ndarray) or isinstance(b, np.ndarray) else a / b
        return np.power(a, b)
    if isinstance(node, Call):
        args = [evaluate(arg, env) for arg in node.args]
        if node.func == "pow":
            return np.power(args[0], args[1])
        return getattr(np, node.func)(args[0])
    raise TypeError(f"not an expression node: {node!r}")


def to_sympy(node: Node, symbols: Mapping[str, sp.Symbol]):
    if isinstance(node, Num):
        value = node.value
        return sp.Integer(int(value)) if value.is_integer() else sp.Float(value)
    if isinstance(node, Var):
        if node.name in symbols:
            return symbols[node.name]
        return sp.pi
    if isinstance(node, Unary):
        value = to_sympy(node.operand, symbols)
        return -value if node.op == "-" else value
    if isinstance(node, Binary):
        a = to_sympy(node.left, symbols)
        b = to_sympy(node.right, symbols)
        return {"+": lambda: a + b, "-": lambda: a - b, "*": lambda: a * b,
                "/": lambda: a / b, "^": lambda: a ** b}[node.op]()
    if isinstance(node, Call):
        args = [to_sympy(arg, symbols) for arg in node.args]
        if node.func == "pow":
            return args[0] ** args[1]
        return getattr(sp, node.func)(args[0])
    raise TypeError(f"not an expression node: {node!r}")


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "u": 3, "^": 4}


def to_source(node: Node) -> str:
    """Print ``node`` so that parsing the result gives back an equal tree."""
    return _emit(node)[0]


def _emit(node):
    if isinstance(node, Num):
        return repr(node.value), 5
    if isinstance(node, Var):
        return node.name, 5
    if isinstance(node, Call):
        return f"{node.func}({', '.join(_emit(a)[0] for a in node.args)})", 5
    if isinstance(node, Unary):
        text, prec = _emit(node.operand)
        # unary binds looser than '^' but tighter than '*'
        if prec < _PREC["u"]:
            text = f"({text})"
        return f"{node.op}{text}", _PREC["u"]
    prec = _PREC[node.op]
    left, lp = _emit(node.left)
    right, rp = _emit(node.right)
    if node.op == "^":
        if lp <= prec:
            left = f"({left})"
        if rp < _PREC["u"]:
            right = f"({right})"
        return f"{left}^{right}", prec
    if lp < prec:
        left = f"({left})"
    if rp <= prec:
        right = f"({right})"
    return f"{left} {node.op} {right}", prec
