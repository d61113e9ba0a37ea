"""
Arithmetic expression language for coefficient functions.

Problem files declare drift, volatility, payoffs, discount rates, hazard rates and
transition weights as small formulas in one variable (`x` for the state, `t` for the
age). This module tokenizes, parses and evaluates them. Evaluation is vectorised over
numpy arrays so a whole grid is evaluated in one call.

Grammar (highest binding first):
    primary  := number | variable | name '(' args ')' | '(' expr ')'
    power    := primary ['^' unary]        right-associative
    unary    := '-' unary | power
    term     := unary (('*' | '/') unary)*
    expr     := term (('+' | '-') term)*
"""

import re
from dataclasses import dataclass
from typing import Dict, List, Optional, Tuple, Union

import numpy as np

Number = Union[float, np.ndarray]

VARIABLES = frozenset({'x', 't'})
FUNCTIONS = {
    'min': (2, None),
    'max': (2, None),
    'exp': (1, 1),
    'log': (1, 1),
    'sqrt': (1, 1),
    'abs': (1, 1),
    'pow': (2, 2),
}

_TOKEN_RE = re.compile(r"""
    (?P<ws>\s+)
  | (?P<number>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)
  | (?P<name>[A-Za-z_][A-Za-z_0-9]*)
  | (?P<op>[-+*/^(),])
""", re.VERBOSE)


class ExpressionError(ValueError):
    """Base class for expression failures; `position` is a byte offset into the source."""

    def __init__(self, message: str, position: int):
        super().__init__(f"{message} (at offset {position})")
        self.position = position


class ExpressionSyntaxError(ExpressionError):
    pass


class UnknownIdentifierError(ExpressionError):
    pass


class ExpressionEvaluationError(ExpressionError):
    pass


@dataclass(frozen=True)
class Token:
    kind: str
    text: str
    position: int


def tokenize(source: str) -> List[Token]:
    """Split source text into tokens with byte offsets."""
    tokens = []
    index = 0
    while index < len(source):
        match = _TOKEN_RE.match(source, index)
        if not match:
            raise ExpressionSyntaxError(f"unexpected character {source[index]!r}", _byte_offset(source, index))
        kind = match.lastgroup
        if kind != 'ws':
            tokens.append(Token(kind, match.group(), _byte_offset(source, index)))
        index = match.end()
    tokens.append(Token('end', '', _byte_offset(source, len(source))))
    return tokens


def _byte_offset(source: str, index: int) -> int:
    return len(source[:index].encode('utf-8'))


# Syntax tree

class Node:
    position: int = 0

    def evaluate(self, env: Dict[str, Number]) -> Number:
        raise NotImplementedError

    def to_source(self) -> str:
        raise NotImplementedError

    def variables(self) -> frozenset:
        return frozenset()


@dataclass(frozen=True)
class Literal(Node):
    value: float
    position: int = 0

    def evaluate(self, env):
        return self.value

    def to_source(self):
        return repr(float(self.value))


@dataclass(frozen=True)
class Variable(Node):
    name: str
    position: int = 0

    def evaluate(self, env):
        if self.name not in env or env[self.name] is None:
            raise ExpressionEvaluationError(f"variable '{self.name}' is not bound", self.position)
        return env[self.name]

    def to_source(self):
        return self.name

    def variables(self):
        return frozenset({self.name})


@dataclass(frozen=True)
class Negate(Node):
    operand: Node
    position: int = 0

    def evaluate(self, env):
        return -self.operand.evaluate(env)

    def to_source(self):
        return f"(-{self.operand.to_source()})"

    def variables(self):
        return self.operand.variables()


@dataclass(frozen=True)
class BinaryOp(Node):
    op: str
    left: Node
    right: Node
    position: int = 0

    def evaluate(self, env):
        a = self.left.evaluate(env)
        b = self.right.evaluate(env)
        if self.op == '+':
            return a + b
        if self.op == '-':
            return a - b
        if self.op == '*':
            return a * b
        if self.op == '/':
            if np.any(np.asarray(b) == 0):
                raise ExpressionEvaluationError("division by zero", self.position)
            return a / b
        return _power(a, b, self.position)

    def to_source(self):
        return f"({self.left.to_source()} {self.op} {self.right.to_source()})"

    def variables(self):
        return self.left.variables() | self.right.variables()


@dataclass(frozen=True)
class Call(Node):
    name: str
    args: Tuple[Node, ...]
    position: int = 0

    def evaluate(self, env):
        values = [arg.evaluate(env) for arg in self.args]
        if self.name == 'min':
            return _reduce(np.minimum, values)
        if self.name == 'max':
            return _reduce(np.maximum, values)
        if self.name == 'exp':
            return np.exp(values[0])
        if self.name == 'log':
            if np.any(np.asarray(values[0]) <= 0):
                raise ExpressionEvaluationError("log of a nonpositive value", self.position)
            return np.log(values[0])
        if self.name == 'sqrt':
            if np.any(np.asarray(values[0]) < 0):
                raise ExpressionEvaluationError("sqrt of a negative value", self.position)
            return np.sqrt(values[0])
        if self.name == 'abs':
            return np.abs(values[0])
        return _power(values[0], values[1], self.position)

    def to_source(self):
        return f"{self.name}({', '.join(arg.to_source() for arg in self.args)})"

    def variables(self):
        names = frozenset()
        for arg in self.args:
            names |= arg.variables()
        return names


def _reduce(func, values):
    result = values[0]
    for value in values[1:]:
        result = func(result, value)
    return result


def _power(base, exponent, position):
    base_arr = np.asarray(base, dtype=float)
    exp_arr = np.asarray(exponent, dtype=float)
    if np.any((base_arr == 0) & (exp_arr < 0)):
        raise ExpressionEvaluationError("division by zero in power", position)
    if np.any((base_arr < 0) & (exp_arr != np.round(exp_arr))):
        raise ExpressionEvaluationError("fractional power of a negative value", position)
    result = np.power(base_arr, exp_arr)
    return float(result) if result.ndim == 0 else result


class _Parser:
    def __init__(self, source: str):
        self.source = source
        self.tokens = tokenize(source)
        self.index = 0

    @property
    def current(self) -> Token:
        return self.tokens[self.index]

    def advance(self) -> Token:
        token = self.tokens[self.index]
        self.index += 1
        return token

    def expect(self, text: str) -> Token:
        if self.current.text != text:
            found = self.current.text or 'end of input'
            raise ExpressionSyntaxError(f"expected '{text}' but found '{found}'", self.current.position)
        return self.advance()

    def parse(self) -> Node:
        if self.current.kind == 'end':
            raise ExpressionSyntaxError("empty expression", self.current.position)
        node = self.expr()
        if self.current.kind != 'end':
            raise ExpressionSyntaxError(f"unexpected '{self.current.text}'", self.current.position)
        return node

    def expr(self) -> Node:
        node = self.term()
        while self.current.text in ('+', '-'):
            token = self.advance()
            node = BinaryOp(token.text, node, self.term(), token.position)
        return node

    def term(self) -> Node:
        node = self.unary()
        while self.current.text in ('*', '/'):
            token = self.advance()
            node = BinaryOp(token.text, node, self.unary(), token.position)
        return node

    def unary(self) -> Node:
        if self.current.text == '-':
            token = self.advance()
            return Negate(self.unary(), token.position)
        return self.power()

    def power(self) -> Node:
        node = self.primary()
        if self.current.text == '^':
            token = self.advance()
            node = BinaryOp('^', node, self.unary(), token.position)
        return node

    def primary(self) -> Node:
        token = self.current
        if token.kind == 'number':
            self.advance()
            return Literal(float(token.text), token.position)
        if token.kind == 'name':
            self.advance()
            if self.current.text == '(':
                return self.call(token)
            if token.text in VARIABLES:
                return Variable(token.text, token.position)
            raise UnknownIdentifierError(f"unknown identifier '{token.text}'", token.position)
        if token.text == '(':
            self.advance()
            node = self.expr()
            self.expect(')')
            return node
        found = token.text or 'end of input'
        raise ExpressionSyntaxError(f"unexpected '{found}'", token.position)

    def call(self, name: Token) -> Node:
        if name.text not in FUNCTIONS:
            raise UnknownIdentifierError(f"unknown function '{name.text}'", name.position)
        self.expect('(')
        args = [self.expr()]
        while self.current.text == ',':
            self.advance()
            args.append(self.expr())
        self.expect(')')
        lo, hi = FUNCTIONS[name.text]
        if len(args) < lo or (hi is not None and len(args) > hi):
            raise ExpressionSyntaxError(f"wrong number of arguments to '{name.text}'", name.position)
        return Call(name.text, tuple(args), name.position)


class Expression:
    """A parsed coefficient formula."""

    def __init__(self, source: str, root: Node):
        self.source = source
        self.root = root
        self.variables = root.variables()

    @property
    def is_constant(self) -> bool:
        return not self.variables

    def evaluate(self, x: Optional[Number] = None, t: Optional[Number] = None) -> Number:
        """Evaluate at scalar or array arguments; constants broadcast to the argument shape."""
        env = {'x': x, 't': t}
        value = self.root.evaluate(env)
        shape = np.broadcast_shapes(*(np.shape(v) for v in (x, t) if v is not None))
        if shape:
            return np.broadcast_to(np.asarray(value, dtype=float), shape).astype(float)
        return float(value)

    __call__ = evaluate

    def constant_value(self) -> float:
        if not self.is_constant:
            raise ExpressionEvaluationError(f"expression '{self.source}' is not constant", 0)
        return float(self.root.evaluate({}))

    def to_source(self) -> str:
        """Fully parenthesised source that re-parses to an equivalent tree."""
        return self.root.to_source()

    def __repr__(self):
        return f"Expression({self.source!r})"


def parse_expression(source: str) -> Expression:
    """Parse expression text into an Expression."""
    return Expression(source, _Parser(source).parse())
