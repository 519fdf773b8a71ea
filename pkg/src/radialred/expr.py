"""Scalar expressions: parsing, evaluation and symbolic differentiation.

Expressions describe the nonlinearity ``f(r, y)``, coefficient functions such
as ``b(r)``, majorants ``L1(s)``, ``L2(s)``, ``h(r, y)`` and user supplied
orbit volumes ``A(r)``.  The grammar is the usual infix one::

    expr  := term (('+' | '-') term)*
    term  := unary (('*' | '/') unary)*
    unary := ('-' | '+') unary | power
    power := atom ('^' unary)?          # right associative
    atom  := NUMBER | NAME | NAME '(' expr (',' expr)* ')' | '(' expr ')'

Evaluation works on Python floats and on numpy arrays alike.  Domain
violations never leak out as ``nan``/``inf``; they raise :class:`DomainError`
carrying the offending subexpression.
"""

from __future__ import annotations

import functools
import math
import re
from dataclasses import dataclass
from typing import Mapping

import numpy as np

DEFAULT_VARIABLES = frozenset({"r", "y", "s", "t"})
CONSTANTS = {"pi": math.pi, "e": math.e}

# name -> arity; sign/sign0/ifle/iflt are produced by differentiation but are
# accepted by the parser so that printed derivatives re-parse.
FUNCTIONS = {
    "sin": 1, "cos": 1, "tan": 1, "sinh": 1, "cosh": 1, "exp": 1, "log": 1,
    "sqrt": 1, "abs": 1, "min": 2, "max": 2, "pow": 2,
    "sign": 1, "sign0": 1, "ifle": 4, "iflt": 4,
}


class ExprError(Exception):
    """Base class for expression errors."""


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, text: str, position: int):
        super().__init__(f"{message} at position {position} in {text!r}")
        self.text = text
        self.position = position


class UnknownIdentifierError(ExprError):
    def __init__(self, name: str, position: int):
        super().__init__(f"unknown identifier {name!r} at position {position}")
        self.name = name
        self.position = position


class UnboundVariableError(ExprError):
    def __init__(self, name: str):
        super().__init__(f"variable {name!r} is not bound")
        self.name = name


class DomainError(ExprError):
    """Evaluation left the domain of a primitive (log of x<=0, 1/0, ...).

    ``index`` is the flat index of the first offending element when the
    evaluation was vectorised, else ``None``.
    """

    def __init__(self, message: str, subexpr: "Expr", index: int | None = None):
        super().__init__(f"{message} in '{subexpr}'")
        self.subexpr = subexpr
        self.index = index


class NonDifferentiableError(DomainError):
    """A derivative was evaluated at a kink (e.g. of ``abs`` at 0)."""


def _first(mask) -> int | None:
    mask = np.asarray(mask)
    if mask.ndim == 0:
        return None
    return int(np.flatnonzero(mask)[0])


def _check(bad, message, node, cls=DomainError):
    if np.any(bad):
        raise cls(message, node, _first(bad))


# ---------------------------------------------------------------------------
# AST


class Expr:
    """Base node.  Nodes are immutable and hashable."""

    __slots__ = ()
    precedence = 5

    def evaluate(self, bindings: Mapping[str, object] | None = None, **kw):
        env = dict(bindings or {})
        env.update(kw)
        with np.errstate(all="ignore"):
            out = self._eval(env)
        if np.any(~np.isfinite(out)):
            raise DomainError("non-finite result", self, _first(~np.isfinite(out)))
        return out

    __call__ = evaluate

    def scalar(self, **kw) -> float:
        """Fast evaluation at a single point (floats only, same domain rules)."""
        out = _compile(self)(kw)
        if not math.isfinite(out):
            raise DomainError("non-finite result", self)
        return out

    def free_vars(self) -> frozenset[str]:
        return frozenset().union(*(c.free_vars() for c in self.children()))

    def children(self) -> tuple["Expr", ...]:
        return ()

    def is_constant(self) -> bool:
        return not self.free_vars()

    def diff(self, var: str) -> "Expr":
        return differentiate(self, var)

    def _eval(self, env):  # pragma: no cover - abstract
        raise NotImplementedError

    def __str__(self) -> str:
        return to_text(self)


@dataclass(frozen=True, repr=False)
class Num(Expr):
    value: float

    @property
    def precedence(self):
        return 3 if self.value < 0 else 5

    def _eval(self, env):
        return self.value

    def __repr__(self):
        return f"Num({self.value!r})"


@dataclass(frozen=True, repr=False)
class Const(Expr):
    """Named constant (``pi``, ``e``) or a parameter bound at load time."""

    name: str
    value: float

    def _eval(self, env):
        return self.value

    def __repr__(self):
        return f"Const({self.name!r}, {self.value!r})"


@dataclass(frozen=True, repr=False)
class Var(Expr):
    name: str

    def free_vars(self):
        return frozenset({self.name})

    def _eval(self, env):
        try:
            return env[self.name]
        except KeyError:
            raise UnboundVariableError(self.name) from None

    def __repr__(self):
        return f"Var({self.name!r})"


@dataclass(frozen=True, repr=False)
class Neg(Expr):
    operand: Expr
    precedence = 3

    def children(self):
        return (self.operand,)

    def _eval(self, env):
        return -self.operand._eval(env)

    def __repr__(self):
        return f"Neg({self.operand!r})"


@dataclass(frozen=True, repr=False)
class BinOp(Expr):
    op: str
    left: Expr
    right: Expr

    @property
    def precedence(self):
        return {"+": 1, "-": 1, "*": 2, "/": 2, "^": 4}[self.op]

    def children(self):
        return (self.left, self.right)

    def _eval(self, env):
        a = self.left._eval(env)
        b = self.right._eval(env)
        op = self.op
        if op == "+":
            return a + b
        if op == "-":
            return a - b
        if op == "*":
            return a * b
        if op == "/":
            _check(np.asarray(b) == 0, "division by zero", self)
            return np.true_divide(a, b)
        return _power(a, b, self)

    def __repr__(self):
        return f"BinOp({self.op!r}, {self.left!r}, {self.right!r})"


def _power(a, b, node):
    a_arr = np.asarray(a, dtype=float)
    b_arr = np.asarray(b, dtype=float)
    _check((a_arr == 0) & (b_arr < 0), "zero raised to a negative power", node)
    _check((a_arr < 0) & (b_arr != np.round(b_arr)),
           "negative base with non-integer exponent", node)
    out = np.power(a_arr, b_arr)
    return out if out.ndim else float(out)


@dataclass(frozen=True, repr=False)
class Call(Expr):
    name: str
    args: tuple[Expr, ...]

    def children(self):
        return self.args

    def _eval(self, env):
        vals = [a._eval(env) for a in self.args]
        name = self.name
        if name in _UNARY:
            x = vals[0]
            if name == "log":
                _check(np.asarray(x) <= 0, "log of non-positive value", self)
            elif name == "sqrt":
                _check(np.asarray(x) < 0, "sqrt of negative value", self)
            elif name == "sign":
                _check(np.asarray(x) == 0, "derivative of abs at its kink",
                       self, NonDifferentiableError)
            return _UNARY[name](x)
        if name == "min":
            return np.minimum(vals[0], vals[1])
        if name == "max":
            return np.maximum(vals[0], vals[1])
        if name == "pow":
            return _power(vals[0], vals[1], self)
        a, b, x, y = vals
        cond = np.asarray(a) <= b if name == "ifle" else np.asarray(a) < b
        out = np.where(cond, x, y)
        return out if out.ndim else float(out)

    def __repr__(self):
        return f"Call({self.name!r}, {self.args!r})"


_UNARY = {
    "sin": np.sin, "cos": np.cos, "tan": np.tan, "sinh": np.sinh,
    "cosh": np.cosh, "exp": np.exp, "log": np.log, "sqrt": np.sqrt,
    "abs": np.abs, "sign": np.sign, "sign0": np.sign,
}


# ---------------------------------------------------------------------------
# Scalar closures.  The numpy path above carries per-call array overhead that
# dominates inside ODE right-hand sides; these closures work on floats.


def _scalar_power(a, b, node):
    if a == 0 and b < 0:
        raise DomainError("zero raised to a negative power", node)
    if a < 0 and b != round(b):
        raise DomainError("negative base with non-integer exponent", node)
    try:
        return float(a ** b)
    except OverflowError:
        raise DomainError("non-finite result", node) from None


def _guarded(fn, bad, message, node, cls=None):
    cls = cls or DomainError

    def run(x):
        if bad(x):
            raise cls(message, node)
        try:
            return fn(x)
        except OverflowError:
            raise DomainError("non-finite result", node) from None
    return run


def _sign0(x):
    return (x > 0) - (x < 0)


@functools.lru_cache(maxsize=1024)
def _compile(node: Expr):
    if isinstance(node, (Num, Const)):
        v = float(node.value)
        return lambda env: v
    if isinstance(node, Var):
        name = node.name

        def var(env):
            try:
                return float(env[name])
            except KeyError:
                raise UnboundVariableError(name) from None
        return var
    if isinstance(node, Neg):
        g = _compile(node.operand)
        return lambda env: -g(env)
    if isinstance(node, BinOp):
        a, b = _compile(node.left), _compile(node.right)
        op = node.op
        if op == "+":
            return lambda env: a(env) + b(env)
        if op == "-":
            return lambda env: a(env) - b(env)
        if op == "*":
            return lambda env: a(env) * b(env)
        if op == "/":
            def div(env):
                d = b(env)
                if d == 0:
                    raise DomainError("division by zero", node)
                return a(env) / d
            return div
        return lambda env: _scalar_power(a(env), b(env), node)
    if isinstance(node, Call):
        args = [_compile(x) for x in node.args]
        name = node.name
        if name in _SCALAR_UNARY:
            fn = _SCALAR_UNARY[name]
            if name == "log":
                fn = _guarded(fn, lambda x: x <= 0, "log of non-positive value", node)
            elif name == "sqrt":
                fn = _guarded(fn, lambda x: x < 0, "sqrt of negative value", node)
            elif name == "sign":
                fn = _guarded(fn, lambda x: x == 0, "derivative of abs at its kink", node,
                              NonDifferentiableError)
            else:
                fn = _guarded(fn, lambda x: False, "", node)
            g = args[0]
            return lambda env: fn(g(env))
        if name == "min":
            return lambda env: min(args[0](env), args[1](env))
        if name == "max":
            return lambda env: max(args[0](env), args[1](env))
        if name == "pow":
            return lambda env: _scalar_power(args[0](env), args[1](env), node)
        a, b, x, y = args
        if name == "ifle":
            return lambda env: x(env) if a(env) <= b(env) else y(env)
        return lambda env: x(env) if a(env) < b(env) else y(env)
    raise TypeError(f"cannot compile {node!r}")


_SCALAR_UNARY = {
    "sin": math.sin, "cos": math.cos, "tan": math.tan, "sinh": math.sinh,
    "cosh": math.cosh, "exp": math.exp, "log": math.log, "sqrt": math.sqrt,
    "abs": abs, "sign": _sign0, "sign0": _sign0,
}


# ---------------------------------------------------------------------------
# Parsing

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^(),]))"
)


def _tokenize(text: str):
    tokens = []
    pos = 0
    n = len(text)
    while pos < n:
        if text[pos].isspace():
            pos += 1
            continue
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", text, pos)
        kind = m.lastgroup
        start = m.start(kind)
        tokens.append((kind, m.group(kind), start))
        pos = m.end()
    tokens.append(("end", "", len(text)))
    return tokens


class _Parser:
    def __init__(self, text, params, variables):
        self.text = text
        self.tokens = _tokenize(text)
        self.i = 0
        self.params = params
        self.variables = variables

    def peek(self):
        return self.tokens[self.i]

    def take(self):
        tok = self.tokens[self.i]
        self.i += 1
        return tok

    def expect(self, value):
        kind, val, pos = self.take()
        if val != value or kind != "op":
            what = "end of input" if kind == "end" else repr(val)
            raise ExprSyntaxError(f"expected {value!r}, found {what}", self.text, pos)

    def error(self, tok, what="expression"):
        kind, val, pos = tok
        found = "end of input" if kind == "end" else repr(val)
        return ExprSyntaxError(f"expected {what}, found {found}", self.text, pos)

    def parse(self):
        node = self.expr()
        tok = self.peek()
        if tok[0] != "end":
            raise self.error(tok, "operator or end of input")
        return node

    def expr(self):
        node = self.term()
        while self.peek()[1] in ("+", "-") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.term())
        return node

    def term(self):
        node = self.unary()
        while self.peek()[1] in ("*", "/") and self.peek()[0] == "op":
            op = self.take()[1]
            node = BinOp(op, node, self.unary())
        return node

    def unary(self):
        kind, val, _ = self.peek()
        if kind == "op" and val == "-":
            self.take()
            return Neg(self.unary())
        if kind == "op" and val == "+":
            self.take()
            return self.unary()
        return self.power()

    def power(self):
        base = self.atom()
        kind, val, _ = self.peek()
        if kind == "op" and val == "^":
            self.take()
            return BinOp("^", base, self.unary())
        return base

    def atom(self):
        tok = self.take()
        kind, val, pos = tok
        if kind == "num":
            return Num(float(val))
        if kind == "op" and val == "(":
            node = self.expr()
            self.expect(")")
            return node
        if kind == "name":
            if self.peek()[1] == "(" and self.peek()[0] == "op":
                return self.call(val, pos)
            if val in self.variables:
                return Var(val)
            if val in self.params:
                return Const(val, float(self.params[val]))
            if val in CONSTANTS:
                return Const(val, CONSTANTS[val])
            raise UnknownIdentifierError(val, pos)
        raise self.error(tok)

    def call(self, name, pos):
        if name not in FUNCTIONS:
            raise UnknownIdentifierError(name, pos)
        self.take()  # '('
        args = [self.expr()]
        while self.peek()[1] == "," and self.peek()[0] == "op":
            self.take()
            args.append(self.expr())
        self.expect(")")
        if len(args) != FUNCTIONS[name]:
            raise ExprSyntaxError(
                f"{name} takes {FUNCTIONS[name]} argument(s), got {len(args)}",
                self.text, pos)
        return Call(name, tuple(args))


def parse(text: str, params: Mapping[str, float] | None = None,
          variables=DEFAULT_VARIABLES) -> Expr:
    """Parse ``text`` into an expression tree.

    Parameters
    ----------
    text : str
        Infix expression, e.g. ``"y - abs(y)^(p-1)*y"``.
    params : mapping, optional
        Named parameters bound at load time (``{"p": 3}``).
    variables : iterable of str
        Names treated as free variables.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExprSyntaxError("empty expression", str(text), 0)
    return _Parser(text, dict(params or {}), frozenset(variables)).parse()


def evaluate(e: Expr, bindings: Mapping[str, object] | None = None, **kw):
    return e.evaluate(bindings, **kw)


# ---------------------------------------------------------------------------
# Printing


def to_text(e: Expr) -> str:
    if isinstance(e, Num):
        return repr(float(e.value))
    if isinstance(e, (Const, Var)):
        return e.name
    if isinstance(e, Neg):
        inner = to_text(e.operand)
        if e.operand.precedence < 3:
            inner = f"({inner})"
        return f"-{inner}"
    if isinstance(e, Call):
        return f"{e.name}({', '.join(to_text(a) for a in e.args)})"
    p = e.precedence
    left, right = to_text(e.left), to_text(e.right)
    if e.op == "^":
        if e.left.precedence <= 4:
            left = f"({left})"
        if e.right.precedence < 3:
            right = f"({right})"
        return f"{left}^{right}"
    if e.left.precedence < p:
        left = f"({left})"
    if e.right.precedence < p or (e.right.precedence == p and e.op in "-/"):
        right = f"({right})"
    return f"{left} {e.op} {right}"


# ---------------------------------------------------------------------------
# Differentiation with light constant folding

ZERO = Num(0.0)
ONE = Num(1.0)


def _num(e):
    return e.value if isinstance(e, Num) else None


def add(a, b):
    if _num(a) == 0:
        return b
    if _num(b) == 0:
        return a
    if _num(a) is not None and _num(b) is not None:
        return Num(a.value + b.value)
    return BinOp("+", a, b)


def sub(a, b):
    if _num(b) == 0:
        return a
    if _num(a) == 0:
        return neg(b)
    if _num(a) is not None and _num(b) is not None:
        return Num(a.value - b.value)
    return BinOp("-", a, b)


def neg(a):
    if _num(a) is not None:
        return Num(-a.value)
    if isinstance(a, Neg):
        return a.operand
    return Neg(a)


def mul(a, b):
    if _num(a) == 0 or _num(b) == 0:
        return ZERO
    if _num(a) == 1:
        return b
    if _num(b) == 1:
        return a
    if _num(a) is not None and _num(b) is not None:
        return Num(a.value * b.value)
    return BinOp("*", a, b)


def div(a, b):
    if _num(a) == 0:
        return ZERO
    if _num(b) == 1:
        return a
    return BinOp("/", a, b)


def power(a, b):
    if _num(b) == 1:
        return a
    if _num(b) == 0:
        return ONE
    return BinOp("^", a, b)


def call(name, *args):
    return Call(name, tuple(args))


def differentiate(e: Expr, var: str) -> Expr:
    """Symbolic derivative of ``e`` with respect to ``var``.

    ``abs`` differentiates to ``sign``, which raises
    :class:`NonDifferentiableError` when evaluated at 0.  ``min``/``max``
    differentiate piecewise; on ties the derivative of the first argument is
    used.
    """
    if var not in e.free_vars():
        return ZERO
    if isinstance(e, Var):
        return ONE
    if isinstance(e, Neg):
        return neg(differentiate(e.operand, var))
    if isinstance(e, BinOp):
        a, b = e.left, e.right
        if e.op == "+":
            return add(differentiate(a, var), differentiate(b, var))
        if e.op == "-":
            return sub(differentiate(a, var), differentiate(b, var))
        if e.op == "*":
            return add(mul(differentiate(a, var), b), mul(a, differentiate(b, var)))
        if e.op == "/":
            da, db = differentiate(a, var), differentiate(b, var)
            return div(sub(mul(da, b), mul(a, db)), power(b, Num(2.0)))
        return _diff_power(a, b, var)
    assert isinstance(e, Call)
    name, args = e.name, e.args
    if name == "pow":
        return _diff_power(args[0], args[1], var)
    if name in ("min", "max"):
        a, b = args
        da, db = differentiate(a, var), differentiate(b, var)
        if name == "min":
            return call("ifle", a, b, da, db)
        return call("iflt", a, b, db, da)
    if name in ("ifle", "iflt"):
        a, b, x, y = args
        return call(name, a, b, differentiate(x, var), differentiate(y, var))
    u = args[0]
    du = differentiate(u, var)
    if name == "sin":
        outer = call("cos", u)
    elif name == "cos":
        outer = neg(call("sin", u))
    elif name == "tan":
        outer = div(ONE, power(call("cos", u), Num(2.0)))
    elif name == "sinh":
        outer = call("cosh", u)
    elif name == "cosh":
        outer = call("sinh", u)
    elif name == "exp":
        outer = e
    elif name == "log":
        outer = div(ONE, u)
    elif name == "sqrt":
        outer = div(Num(0.5), e)
    elif name == "abs":
        outer = call("sign", u)
    else:  # sign, sign0: piecewise constant
        return ZERO
    return mul(outer, du)


def _diff_power(a, b, var):
    da = differentiate(a, var)
    if b.is_constant():
        c = float(b.evaluate())
        if c == 0:
            return ZERO
        # d|w|^c = c |w|^(c-1) sign(w) w'; for c > 1 the derivative exists at
        # w = 0 and equals 0, hence sign0 instead of the strict sign.
        if isinstance(a, Call) and a.name == "abs" and c > 1:
            w = a.args[0]
            return mul(mul(mul(b, power(a, Num(c - 1.0))), call("sign0", w)),
                       differentiate(w, var))
        return mul(mul(b, power(a, Num(c - 1.0))), da)
    db = differentiate(b, var)
    base = BinOp("^", a, b)
    return mul(base, add(mul(db, call("log", a)), div(mul(b, da), a)))
