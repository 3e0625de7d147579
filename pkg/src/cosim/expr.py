"""Comparison expressions used by constraints and test criteria.

Grammar::

    expr       := conj ("or" conj)*
    conj       := atom ("and" atom)*
    atom       := "(" expr ")" | comparison
    comparison := operand op literal
    operand    := NAME | AGG "(" NAME ")"        AGG in {min, max, final}
    op         := "<" | "<=" | "≤" | "=" | "==" | ">=" | "≥" | ">"
    literal    := NUMBER | "quoted string" | true | false

Aggregates are only accepted when parsing with ``aggregates=True``.
"""
from __future__ import annotations

import operator
import re
from dataclasses import dataclass
from typing import Any, Callable, Union

from cosim.errors import ExpressionError

AGGREGATES = ("min", "max", "final")

_OPS: dict[str, Callable[[Any, Any], bool]] = {
    "<": operator.lt,
    "<=": operator.le,
    "=": operator.eq,
    ">=": operator.ge,
    ">": operator.gt,
}
_ALIASES = {"≤": "<=", "≥": ">=", "==": "="}

_TOKEN = re.compile(
    r"""\s*(?:
        (?P<num>[-+]?(?:\d+\.\d*|\.\d+|\d+)(?:[eE][-+]?\d+)?)
      | (?P<str>"[^"]*"|'[^']*')
      | (?P<op><=|>=|==|≤|≥|<|>|=)
      | (?P<name>[A-Za-z_][A-Za-z0-9_.]*)
      | (?P<punct>[()])
    )""",
    re.VERBOSE,
)


@dataclass(frozen=True)
class Operand:
    name: str
    aggregate: str | None = None

    def __str__(self) -> str:
        return f"{self.aggregate}({self.name})" if self.aggregate else self.name


@dataclass(frozen=True)
class Comparison:
    left: Operand
    op: str
    right: Any


@dataclass(frozen=True)
class BoolOp:
    op: str  # "and" | "or"
    items: tuple


Expr = Union[Comparison, BoolOp]


def _tokenize(text: str) -> list[tuple[str, str]]:
    tokens, pos = [], 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN.match(text, pos)
        if not m or m.end() == pos:
            raise ExpressionError(f"unexpected input at column {pos}: {text[pos:]!r}")
        kind = m.lastgroup
        tokens.append((kind, m.group(kind)))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, text: str, aggregates: bool):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.aggregates = aggregates

    def peek(self):
        return self.tokens[self.i] if self.i < len(self.tokens) else (None, None)

    def take(self, kind=None, value=None):
        tok = self.peek()
        if tok[0] is None or (kind and tok[0] != kind) or (value and tok[1] != value):
            want = value or kind or "token"
            raise ExpressionError(f"expected {want} in {self.text!r}, got {tok[1]!r}")
        self.i += 1
        return tok

    def parse(self) -> Expr:
        node = self.expr()
        if self.i != len(self.tokens):
            raise ExpressionError(f"trailing input in {self.text!r}: {self.peek()[1]!r}")
        return node

    def expr(self) -> Expr:
        items = [self.conj()]
        while self.peek() == ("name", "or"):
            self.take()
            items.append(self.conj())
        return items[0] if len(items) == 1 else BoolOp("or", tuple(items))

    def conj(self) -> Expr:
        items = [self.atom()]
        while self.peek() == ("name", "and"):
            self.take()
            items.append(self.atom())
        return items[0] if len(items) == 1 else BoolOp("and", tuple(items))

    def atom(self) -> Expr:
        if self.peek() == ("punct", "("):
            self.take()
            node = self.expr()
            self.take("punct", ")")
            return node
        left = self.operand()
        op = self.take("op")[1]
        return Comparison(left, _ALIASES.get(op, op), self.literal())

    def operand(self) -> Operand:
        _, name = self.take("name")
        if name in ("and", "or", "true", "false"):
            raise ExpressionError(f"keyword {name!r} used as operand in {self.text!r}")
        if self.peek() == ("punct", "("):
            if not self.aggregates or name not in AGGREGATES:
                raise ExpressionError(f"function {name!r} not allowed in {self.text!r}")
            self.take()
            _, inner = self.take("name")
            self.take("punct", ")")
            return Operand(inner, name)
        return Operand(name)

    def literal(self) -> Any:
        kind, val = self.take()
        if kind == "num":
            f = float(val)
            return int(f) if re.fullmatch(r"[-+]?\d+", val) else f
        if kind == "str":
            return val[1:-1]
        if kind == "name" and val in ("true", "false"):
            return val == "true"
        raise ExpressionError(f"expected a literal in {self.text!r}, got {val!r}")


def parse(text: str, aggregates: bool = False) -> Expr:
    return _Parser(text, aggregates).parse()


def operands(node: Expr) -> list[Operand]:
    if isinstance(node, Comparison):
        return [node.left]
    out: list[Operand] = []
    for item in node.items:
        out.extend(operands(item))
    return out


def evaluate(node: Expr, lookup: Callable[[Operand], Any]) -> bool:
    """Evaluate ``node``; ``lookup`` resolves each operand to a value."""
    if isinstance(node, Comparison):
        value = lookup(node.left)
        try:
            return bool(_OPS[node.op](value, node.right))
        except TypeError as exc:
            raise ExpressionError(f"cannot compare {node.left} = {value!r} with {node.right!r}") from exc
    results = (evaluate(item, lookup) for item in node.items)
    return all(results) if node.op == "and" else any(results)


def comparisons(node: Expr) -> list[Comparison]:
    if isinstance(node, Comparison):
        return [node]
    out: list[Comparison] = []
    for item in node.items:
        out.extend(comparisons(item))
    return out
