"""Tiny expression language for drift declarations.

Drift components are written as strings in the state variables ``x1..xk``,
e.g. ``"-x1 - 0.4*x1^3 - x2"``.  Expressions are parsed into small trees that
evaluate vectorized over batches of states and differentiate symbolically, so
user-declared models get exact Jacobians (and Hessians, needed by the
anticipative divergence) without dynamic code loading.

Grammar:  expr   := term (('+'|'-') term)*
          term   := factor (('*'|'/') factor)*
          factor := unary ('^' integer)?
          unary  := '-' unary | atom
          atom   := number | variable | function '(' expr ')' | '(' expr ')'

Supported functions: sin, cos, exp, tanh, sqrt, log.
"""

from __future__ import annotations

import re

import numpy as np

__all__ = ["Expr", "parse_expr", "DriftExpr"]

_FUNCS = {
    "sin": (np.sin, "cos"),
    "cos": (np.cos, "-sin"),
    "exp": (np.exp, "exp"),
    "tanh": (np.tanh, "dtanh"),
    "sqrt": (np.sqrt, "dsqrt"),
    "log": (np.log, "dlog"),
}

_TOKEN_RE = re.compile(
    r"\s*(?:(?P<num>\d+\.\d*(?:[eE][+-]?\d+)?|\.\d+(?:[eE][+-]?\d+)?|\d+(?:[eE][+-]?\d+)?)"
    r"|(?P<name>[A-Za-z_][A-Za-z_0-9]*)"
    r"|(?P<op>[-+*/^()]))"
)


class Expr:
    """Expression tree node. Immutable; hashable by structure string."""

    __slots__ = ("kind", "value", "args")

    def __init__(self, kind, value=None, args=()):
        self.kind = kind          # 'const' | 'var' | '+' | '*' | '/' | 'pow' | 'neg' | 'call'
        self.value = value        # float for const, index for var, name for call, exponent for pow
        self.args = tuple(args)

    # -- constructors with light simplification ---------------------------

    @staticmethod
    def const(v):
        return Expr("const", float(v))

    @staticmethod
    def var(i):
        return Expr("var", int(i))

    @staticmethod
    def add(a, b):
        if a.kind == "const" and b.kind == "const":
            return Expr.const(a.value + b.value)
        if a.kind == "const" and a.value == 0.0:
            return b
        if b.kind == "const" and b.value == 0.0:
            return a
        return Expr("+", None, (a, b))

    @staticmethod
    def mul(a, b):
        if a.kind == "const" and b.kind == "const":
            return Expr.const(a.value * b.value)
        for u, v in ((a, b), (b, a)):
            if u.kind == "const":
                if u.value == 0.0:
                    return Expr.const(0.0)
                if u.value == 1.0:
                    return v
        return Expr("*", None, (a, b))

    @staticmethod
    def div(a, b):
        if b.kind == "const":
            if b.value == 0.0:
                raise ZeroDivisionError("division by constant zero in drift expression")
            return Expr.mul(a, Expr.const(1.0 / b.value))
        if a.kind == "const" and a.value == 0.0:
            return Expr.const(0.0)
        return Expr("/", None, (a, b))

    @staticmethod
    def neg(a):
        if a.kind == "const":
            return Expr.const(-a.value)
        return Expr("neg", None, (a,))

    @staticmethod
    def pow(a, n):
        n = int(n)
        if n == 0:
            return Expr.const(1.0)
        if n == 1:
            return a
        if a.kind == "const":
            return Expr.const(a.value ** n)
        return Expr("pow", n, (a,))

    @staticmethod
    def call(name, a):
        if name not in _FUNCS:
            raise ValueError(f"unknown function {name!r} in drift expression")
        if a.kind == "const":
            return Expr.const(float(_FUNCS[name][0](a.value)))
        return Expr("call", name, (a,))

    # -- evaluation --------------------------------------------------------

    def __call__(self, x):
        """Evaluate on states ``x`` of shape (..., k); returns shape (...)."""
        x = np.asarray(x, dtype=float)
        if self.kind == "const":
            return np.full(x.shape[:-1], self.value)
        if self.kind == "var":
            return x[..., self.value]
        if self.kind == "+":
            return self.args[0](x) + self.args[1](x)
        if self.kind == "*":
            return self.args[0](x) * self.args[1](x)
        if self.kind == "/":
            return self.args[0](x) / self.args[1](x)
        if self.kind == "neg":
            return -self.args[0](x)
        if self.kind == "pow":
            return self.args[0](x) ** self.value
        if self.kind == "call":
            return _FUNCS[self.value][0](self.args[0](x))
        raise AssertionError(self.kind)

    # -- symbolic derivative ------------------------------------------------

    def diff(self, i):
        """Partial derivative with respect to variable index ``i`` (0-based)."""
        if self.kind == "const":
            return Expr.const(0.0)
        if self.kind == "var":
            return Expr.const(1.0 if self.value == i else 0.0)
        if self.kind == "+":
            return Expr.add(self.args[0].diff(i), self.args[1].diff(i))
        if self.kind == "*":
            a, b = self.args
            return Expr.add(Expr.mul(a.diff(i), b), Expr.mul(a, b.diff(i)))
        if self.kind == "/":
            a, b = self.args
            num = Expr.add(Expr.mul(a.diff(i), b), Expr.neg(Expr.mul(a, b.diff(i))))
            return Expr.div(num, Expr.pow(b, 2))
        if self.kind == "neg":
            return Expr.neg(self.args[0].diff(i))
        if self.kind == "pow":
            a = self.args[0]
            return Expr.mul(Expr.mul(Expr.const(self.value), Expr.pow(a, self.value - 1)),
                            a.diff(i))
        if self.kind == "call":
            a = self.args[0]
            inner = a.diff(i)
            name = self.value
            rule = _FUNCS[name][1]
            if rule == "cos":
                outer = Expr.call("cos", a)
            elif rule == "-sin":
                outer = Expr.neg(Expr.call("sin", a))
            elif rule == "exp":
                outer = Expr.call("exp", a)
            elif rule == "dtanh":
                outer = Expr.add(Expr.const(1.0), Expr.neg(Expr.pow(Expr.call("tanh", a), 2)))
            elif rule == "dsqrt":
                outer = Expr.div(Expr.const(0.5), Expr.call("sqrt", a))
            elif rule == "dlog":
                outer = Expr.div(Expr.const(1.0), a)
            else:  # pragma: no cover
                raise AssertionError(rule)
            return Expr.mul(outer, inner)
        raise AssertionError(self.kind)

    def is_zero(self):
        return self.kind == "const" and self.value == 0.0

    def key(self):
        if self.kind == "const":
            return f"c{self.value!r}"
        if self.kind == "var":
            return f"x{self.value}"
        if self.kind == "pow":
            return f"pow{self.value}({self.args[0].key()})"
        if self.kind == "call":
            return f"{self.value}({self.args[0].key()})"
        return f"{self.kind}({','.join(a.key() for a in self.args)})"

    def __repr__(self):
        return f"Expr[{self.key()}]"


def _tokenize(text):
    tokens, pos = [], 0
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if m is None or m.end() == pos:
            tail = text[pos:].strip()
            if not tail:
                break
            raise ValueError(f"cannot tokenize drift expression at: {tail!r}")
        if m.group("num") is not None:
            tokens.append(("num", float(m.group("num"))))
        elif m.group("name") is not None:
            tokens.append(("name", m.group("name")))
        else:
            tokens.append(("op", m.group("op")))
        pos = m.end()
    return tokens


class _Parser:
    def __init__(self, tokens, n_vars):
        self.tokens = tokens
        self.pos = 0
        self.n_vars = n_vars

    def peek(self):
        return self.tokens[self.pos] if self.pos < len(self.tokens) else (None, None)

    def take(self):
        tok = self.peek()
        self.pos += 1
        return tok

    def expect_op(self, op):
        kind, val = self.take()
        if kind != "op" or val != op:
            raise ValueError(f"expected {op!r} in drift expression, got {val!r}")

    def parse(self):
        e = self.expr()
        if self.pos != len(self.tokens):
            raise ValueError(f"trailing input in drift expression: {self.tokens[self.pos:]}")
        return e

    def expr(self):
        e = self.term()
        while self.peek() == ("op", "+") or self.peek() == ("op", "-"):
            _, op = self.take()
            rhs = self.term()
            e = Expr.add(e, rhs if op == "+" else Expr.neg(rhs))
        return e

    def term(self):
        e = self.factor()
        while self.peek() == ("op", "*") or self.peek() == ("op", "/"):
            _, op = self.take()
            rhs = self.factor()
            e = Expr.mul(e, rhs) if op == "*" else Expr.div(e, rhs)
        return e

    def factor(self):
        e = self.unary()
        if self.peek() == ("op", "^"):
            self.take()
            kind, val = self.take()
            if kind == "op" and val == "-":
                kind, val = self.take()
                val = -val
            if kind != "num" or val != int(val):
                raise ValueError("exponent must be an integer literal")
            e = Expr.pow(e, int(val))
        return e

    def unary(self):
        if self.peek() == ("op", "-"):
            self.take()
            return Expr.neg(self.unary())
        return self.atom()

    def atom(self):
        kind, val = self.take()
        if kind == "num":
            return Expr.const(val)
        if kind == "name":
            if val in _FUNCS:
                self.expect_op("(")
                inner = self.expr()
                self.expect_op(")")
                return Expr.call(val, inner)
            m = re.fullmatch(r"x(\d+)", val)
            if not m:
                raise ValueError(f"unknown symbol {val!r}; variables are x1..x{self.n_vars}")
            idx = int(m.group(1)) - 1
            if not 0 <= idx < self.n_vars:
                raise ValueError(f"variable {val} out of range for {self.n_vars} state variables")
            return Expr.var(idx)
        if kind == "op" and val == "(":
            inner = self.expr()
            self.expect_op(")")
            return inner
        raise ValueError(f"unexpected token {val!r} in drift expression")


def parse_expr(text, n_vars):
    """Parse one expression string over variables x1..x``n_vars``."""
    return _Parser(_tokenize(text), n_vars).parse()


class DriftExpr:
    """A vector field R^k -> R^n given by expression strings, with exact
    first and second derivatives.

    Evaluation is vectorized: ``value(x)`` accepts x of shape (..., k).
    """

    def __init__(self, exprs, n_vars):
        if isinstance(exprs, str):
            exprs = [exprs]
        self.n_vars = int(n_vars)
        self.components = [parse_expr(e, self.n_vars) if isinstance(e, str) else e
                           for e in exprs]
        self.n_out = len(self.components)
        self._grad = [[c.diff(i) for i in range(self.n_vars)] for c in self.components]
        self._hess = [[[g.diff(j) for j in range(self.n_vars)] for g in row]
                      for row in self._grad]

    def value(self, x):
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape[:-1] + (self.n_out,))
        for a, c in enumerate(self.components):
            out[..., a] = c(x)
        return out

    def jacobian(self, x):
        """Shape (..., n_out, n_vars)."""
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape[:-1] + (self.n_out, self.n_vars))
        for a, row in enumerate(self._grad):
            for i, g in enumerate(row):
                out[..., a, i] = g(x)
        return out

    def hessian(self, x):
        """Shape (..., n_out, n_vars, n_vars)."""
        x = np.asarray(x, dtype=float)
        out = np.empty(x.shape[:-1] + (self.n_out, self.n_vars, self.n_vars))
        for a, mat in enumerate(self._hess):
            for i, row in enumerate(mat):
                for j, h in enumerate(row):
                    out[..., a, i, j] = h(x)
        return out

    def is_constant_jacobian(self):
        return all(h.is_zero() for mat in self._hess for row in mat for h in row)

    def __repr__(self):
        return f"DriftExpr({[c.key() for c in self.components]})"
