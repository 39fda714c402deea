"""A small arithmetic expression language over ``t``, ``q1..qn`` and ``z1..zr``.

Expressions are immutable trees.  They can be evaluated directly, compiled to
plain Python callables for speed, and differentiated symbolically (with
constant folding) to any order.

Grammar, loosest binding first::

    expr   := term (('+' | '-') term)*
    term   := neg  (('*' | '/') neg)*
    neg    := '-' neg | power
    power  := atom ('^' neg)?          # right associative, constant exponent
    atom   := number | 'pi' | variable | func '(' expr ')' | '(' expr ')'
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass
from typing import Callable, Sequence

UNARY_OPS = ("neg", "sin", "cos", "tan", "exp", "log", "sqrt", "abs")
BINARY_OPS = ("+", "-", "*", "/", "^")
FUNCTIONS = ("sin", "cos", "tan", "exp", "log", "sqrt", "abs")


class ExprError(ValueError):
    """Base class for parse-time problems."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, position: int, text: str = ""):
        self.position = position
        self.text = text
        super().__init__(f"{message} at position {position}")


class UnknownIdentifierError(ExprError):
    pass


class IndexOutOfRangeError(ExprError):
    pass


class DomainError(ArithmeticError):
    """Evaluation hit an analytic singularity (log of non-positive, 1/0, ...)."""


# ---------------------------------------------------------------------------
# tree nodes


class Expr:
    __slots__ = ()

    def __str__(self) -> str:
        return render(self)


@dataclass(frozen=True)
class Const(Expr):
    value: float


@dataclass(frozen=True)
class Var(Expr):
    kind: str  # 't', 'q' or 'z'
    index: int = 0  # 1-based for q and z, 0 for t


@dataclass(frozen=True)
class Unary(Expr):
    op: str
    arg: Expr


@dataclass(frozen=True)
class Binary(Expr):
    op: str
    left: Expr
    right: Expr


ZERO = Const(0.0)
ONE = Const(1.0)
T = Var("t", 0)


def variables(e: Expr) -> set[Var]:
    if isinstance(e, Var):
        return {e}
    if isinstance(e, Unary):
        return variables(e.arg)
    if isinstance(e, Binary):
        return variables(e.left) | variables(e.right)
    return set()


# ---------------------------------------------------------------------------
# folding constructors


def _is(e: Expr, value: float) -> bool:
    return isinstance(e, Const) and e.value == value


def add(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value + b.value)
    if _is(a, 0.0):
        return b
    if _is(b, 0.0):
        return a
    return Binary("+", a, b)


def sub(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value - b.value)
    if _is(b, 0.0):
        return a
    if _is(a, 0.0):
        return neg(b)
    return Binary("-", a, b)


def mul(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const):
        return Const(a.value * b.value)
    if _is(a, 0.0) or _is(b, 0.0):
        return ZERO
    if _is(a, 1.0):
        return b
    if _is(b, 1.0):
        return a
    if _is(a, -1.0):
        return neg(b)
    if _is(b, -1.0):
        return neg(a)
    return Binary("*", a, b)


def div(a: Expr, b: Expr) -> Expr:
    if isinstance(a, Const) and isinstance(b, Const) and b.value != 0.0:
        return Const(a.value / b.value)
    if _is(b, 1.0):
        return a
    if _is(a, 0.0) and not _is(b, 0.0):
        return ZERO
    return Binary("/", a, b)


def power(a: Expr, c: Expr) -> Expr:
    if not isinstance(c, Const):
        raise ExprError("exponent of '^' must be a constant expression")
    if c.value == 0.0:
        return ONE
    if c.value == 1.0:
        return a
    if isinstance(a, Const):
        try:
            return Const(_pow(a.value, c.value))
        except DomainError:
            pass
    return Binary("^", a, c)


def neg(a: Expr) -> Expr:
    if isinstance(a, Const):
        return Const(-a.value)
    if isinstance(a, Unary) and a.op == "neg":
        return a.arg
    return Unary("neg", a)


def func(op: str, a: Expr) -> Expr:
    if op == "neg":
        return neg(a)
    if isinstance(a, Const):
        try:
            return Const(_UNARY_FN[op](a.value))
        except DomainError:
            pass
    return Unary(op, a)


# ---------------------------------------------------------------------------
# scalar semantics shared by evaluate() and compiled code


def _pow(x: float, c: float) -> float:
    if c == int(c):
        k = int(c)
        if x == 0.0 and k < 0:
            raise DomainError("zero raised to a negative power")
        return x**k
    if x < 0.0:
        raise DomainError(f"negative base {x!r} with non-integer exponent {c!r}")
    if x == 0.0 and c < 0:
        raise DomainError("zero raised to a negative power")
    return x**c


def _div(a: float, b: float) -> float:
    if b == 0.0:
        raise DomainError("division by zero")
    return a / b


def _log(x: float) -> float:
    if x <= 0.0:
        raise DomainError(f"log of non-positive value {x!r}")
    return math.log(x)


def _sqrt(x: float) -> float:
    if x < 0.0:
        raise DomainError(f"sqrt of negative value {x!r}")
    return math.sqrt(x)


def _tan(x: float) -> float:
    if math.cos(x) == 0.0:
        raise DomainError("tan at a pole")
    return math.tan(x)


def _exp(x: float) -> float:
    try:
        return math.exp(x)
    except OverflowError as exc:
        raise DomainError(f"exp overflow at {x!r}") from exc


_UNARY_FN: dict[str, Callable[[float], float]] = {
    "neg": lambda x: -x,
    "sin": math.sin,
    "cos": math.cos,
    "tan": _tan,
    "exp": _exp,
    "log": _log,
    "sqrt": _sqrt,
    "abs": abs,
}


# ---------------------------------------------------------------------------
# parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<id>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)
_VAR = re.compile(r"([qz])(\d+)$")


def _tokenize(text: str) -> list[tuple[str, str, int]]:
    tokens = []
    pos = 0
    while pos < len(text):
        if text[pos:].strip() == "":
            break
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            bad = pos + len(text[pos:]) - len(text[pos:].lstrip())
            raise ExprSyntaxError(f"unexpected character {text[bad]!r}", bad, text)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text: str, n: int, r: int):
        self.text = text
        self.n = n
        self.r = r
        self.tokens = _tokenize(text)
        self.i = 0

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value: str):
        kind, val, pos = self.take()
        if val != value or kind != "op":
            found = val if kind != "end" else "end of input"
            raise ExprSyntaxError(f"expected {value!r}, found {found!r}", pos, self.text)

    def parse(self) -> Expr:
        e = self.expr()
        kind, val, pos = self.peek()
        if kind != "end":
            raise ExprSyntaxError(f"unexpected token {val!r}", pos, self.text)
        return e

    def expr(self) -> Expr:
        e = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.term()
            e = add(e, rhs) if op == "+" else sub(e, rhs)
        return e

    def term(self) -> Expr:
        e = self.negation()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            rhs = self.negation()
            e = mul(e, rhs) if op == "*" else div(e, rhs)
        return e

    def negation(self) -> Expr:
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return neg(self.negation())
        if kind == "op" and val == "+":
            self.take()
            return self.negation()
        return self.power()

    def power(self) -> Expr:
        base = self.atom()
        kind, val, pos = self.peek()
        if kind == "op" and val == "^":
            self.take()
            exponent = self.negation()
            if not isinstance(exponent, Const):
                raise ExprSyntaxError("exponent of '^' must be a constant", pos, self.text)
            return power(base, exponent)
        return base

    def atom(self) -> Expr:
        kind, val, pos = self.take()
        if kind == "num":
            return Const(float(val))
        if kind == "op" and val == "(":
            e = self.expr()
            self.expect(")")
            return e
        if kind == "id":
            if val in FUNCTIONS:
                self.expect("(")
                arg = self.expr()
                self.expect(")")
                return func(val, arg)
            if val == "t":
                return T
            if val == "pi":
                return Const(math.pi)
            m = _VAR.match(val)
            if m:
                letter, idx = m.group(1), int(m.group(2))
                limit = self.n if letter == "q" else self.r
                if not 1 <= idx <= limit:
                    raise IndexOutOfRangeError(
                        f"variable {val!r} out of range: {letter}1..{letter}{limit} declared "
                        f"(position {pos})"
                    )
                return Var(letter, idx)
            raise UnknownIdentifierError(f"unknown identifier {val!r} at position {pos}")
        found = val if kind != "end" else "end of input"
        raise ExprSyntaxError(f"unexpected {found!r}", pos, self.text)


def parse(text: str, n: int, r: int) -> Expr:
    """Parse ``text`` in a context with ``n`` configuration and ``r`` control variables."""
    if n < 1 or r < 1:
        raise ValueError(f"context dimensions must be positive, got n={n}, r={r}")
    if not text or not text.strip():
        raise ExprSyntaxError("empty expression", 0, text)
    return _Parser(text, n, r).parse()


# ---------------------------------------------------------------------------
# evaluation


def evaluate(e: Expr, t: float, q: Sequence[float], z: Sequence[float]) -> float:
    """Tree-walking evaluation; the reference semantics for :func:`compile_expr`."""
    if isinstance(e, Const):
        return e.value
    if isinstance(e, Var):
        if e.kind == "t":
            return float(t)
        vec = q if e.kind == "q" else z
        if e.index > len(vec):
            raise IndexOutOfRangeError(f"{e.kind}{e.index} not available in a vector of length {len(vec)}")
        return float(vec[e.index - 1])
    if isinstance(e, Unary):
        return _UNARY_FN[e.op](evaluate(e.arg, t, q, z))
    if isinstance(e, Binary):
        a = evaluate(e.left, t, q, z)
        b = evaluate(e.right, t, q, z)
        if e.op == "+":
            return a + b
        if e.op == "-":
            return a - b
        if e.op == "*":
            return a * b
        if e.op == "/":
            return _div(a, b)
        return _pow(a, b)
    raise TypeError(f"not an expression node: {e!r}")


def _source(e: Expr) -> str:
    if isinstance(e, Const):
        return repr(e.value)
    if isinstance(e, Var):
        if e.kind == "t":
            return "t"
        return f"{e.kind}[{e.index - 1}]"
    if isinstance(e, Unary):
        a = _source(e.arg)
        if e.op == "neg":
            return f"(-{a})"
        if e.op == "abs":
            return f"abs({a})"
        return f"_{e.op}({a})"
    if isinstance(e, Binary):
        a, b = _source(e.left), _source(e.right)
        if e.op in "+-*":
            return f"({a} {e.op} {b})"
        if e.op == "/":
            return f"_div({a}, {b})"
        c = e.right.value  # type: ignore[union-attr]
        if c == int(c) and 0 < c <= 4:
            return f"({a})**{int(c)}"
        return f"_pow({a}, {b})"
    raise TypeError(f"not an expression node: {e!r}")


_NAMESPACE = {
    "_sin": math.sin,
    "_cos": math.cos,
    "_tan": _tan,
    "_exp": _exp,
    "_log": _log,
    "_sqrt": _sqrt,
    "_div": _div,
    "_pow": _pow,
}


def compile_block(exprs: Sequence[Expr]) -> Callable[[float, Sequence[float], Sequence[float]], list]:
    """Compile several expressions into one callable ``f(t, q, z) -> list``.

    Float overflow and zero division inside the generated code surface as
    :class:`DomainError`, as they do in :func:`evaluate`.
    """
    body = ", ".join(_source(e) for e in exprs)
    src = f"def _block(t, q, z):\n    return [{body}]\n"
    ns = dict(_NAMESPACE)
    exec(compile(src, "<exprdsl>", "exec"), ns)
    raw = ns["_block"]

    def block(t, q, z):
        try:
            return raw(t, q, z)
        except (ZeroDivisionError, OverflowError, ValueError) as exc:
            raise DomainError(str(exc)) from exc

    block.source = src  # type: ignore[attr-defined]
    return block


def compile_expr(e: Expr) -> Callable[[float, Sequence[float], Sequence[float]], float]:
    block = compile_block([e])
    return lambda t, q, z: block(t, q, z)[0]


# ---------------------------------------------------------------------------
# differentiation


def differentiate(e: Expr, v: Var) -> Expr:
    """Symbolic partial derivative of ``e`` with respect to variable ``v``."""
    if isinstance(e, Const):
        return ZERO
    if isinstance(e, Var):
        return ONE if e == v else ZERO
    if isinstance(e, Unary):
        u = e.arg
        du = differentiate(u, v)
        if _is(du, 0.0):
            return ZERO
        op = e.op
        if op == "neg":
            return neg(du)
        if op == "sin":
            return mul(func("cos", u), du)
        if op == "cos":
            return neg(mul(func("sin", u), du))
        if op == "tan":
            return div(du, power(func("cos", u), Const(2.0)))
        if op == "exp":
            return mul(e, du)
        if op == "log":
            return div(du, u)
        if op == "sqrt":
            return div(du, mul(Const(2.0), e))
        if op == "abs":
            return mul(div(u, e), du)
        raise ValueError(f"unknown unary op {op!r}")
    if isinstance(e, Binary):
        a, b = e.left, e.right
        if e.op == "^":
            da = differentiate(a, v)
            c = b.value  # type: ignore[union-attr]
            return mul(mul(Const(c), power(a, Const(c - 1.0))), da)
        da = differentiate(a, v)
        db = differentiate(b, v)
        if e.op == "+":
            return add(da, db)
        if e.op == "-":
            return sub(da, db)
        if e.op == "*":
            return add(mul(da, b), mul(a, db))
        if e.op == "/":
            if _is(db, 0.0):
                return div(da, b)
            return div(sub(mul(da, b), mul(a, db)), power(b, Const(2.0)))
    raise TypeError(f"not an expression node: {e!r}")


# ---------------------------------------------------------------------------
# rendering (re-parseable)

_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _fmt_const(x: float) -> str:
    if x == math.pi:
        return "pi"
    s = repr(float(x))
    if s in ("inf", "-inf", "nan"):
        raise ValueError(f"cannot render non-finite constant {s}")
    return s


def render(e: Expr) -> str:
    """Infix text that :func:`parse` maps back to an equal tree."""
    return _render(e, 0)


def _render(e: Expr, outer: int) -> str:
    if isinstance(e, Const):
        s = _fmt_const(e.value)
        return f"({s})" if e.value < 0 else s
    if isinstance(e, Var):
        return "t" if e.kind == "t" else f"{e.kind}{e.index}"
    if isinstance(e, Unary):
        if e.op == "neg":
            s = "-" + _render(e.arg, _PREC["neg"])
            return f"({s})" if outer >= _PREC["neg"] else s
        return f"{e.op}({_render(e.arg, 0)})"
    if isinstance(e, Binary):
        p = _PREC[e.op]
        if e.op == "^":
            s = f"{_render(e.left, p + 1)}^{_render(e.right, p + 1)}"
        else:
            # left-associative: right operand needs strictly tighter binding
            s = f"{_render(e.left, p)} {e.op} {_render(e.right, p + 1)}"
        return f"({s})" if outer > p else s
    raise TypeError(f"not an expression node: {e!r}")
