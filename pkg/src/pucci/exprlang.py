"""A small expression language for user-supplied nonlinearities.

Grammar (whitespace is insignificant)::

    expr    := term (('+' | '-') term)*
    term    := unary (('*' | '/') unary)*
    unary   := '-' unary | primary
    primary := NUMBER | 'u' INDEX | 'exp' '(' expr ')'
             | 'pow' '(' expr ',' expr ')' | '(' expr ')'

Variables are 1-based (``u1`` .. ``un``). Evaluation is vectorised: a
variable may be bound to a numpy array, and all of them broadcast together.
"""
from __future__ import annotations

import re
from dataclasses import dataclass
from typing import Union

import numpy as np


class ExprError(ValueError):
    pass


class ExprSyntaxError(ExprError):
    def __init__(self, message: str, offset: int, expected=()):
        self.offset = offset
        self.expected = frozenset(expected)
        detail = f" (expected one of: {', '.join(sorted(self.expected))})" if self.expected else ""
        super().__init__(f"{message} at offset {offset}{detail}")


class UnknownIdentifierError(ExprSyntaxError):
    pass


class VariableRangeError(ExprSyntaxError):
    pass


class EvalError(ExprError):
    pass


@dataclass(frozen=True)
class Num:
    value: float


@dataclass(frozen=True)
class Var:
    index: int  # 1-based


@dataclass(frozen=True)
class Neg:
    operand: "Expr"


@dataclass(frozen=True)
class BinOp:
    op: str
    left: "Expr"
    right: "Expr"


@dataclass(frozen=True)
class Exp:
    arg: "Expr"


@dataclass(frozen=True)
class Pow:
    base: "Expr"
    exponent: "Expr"


Expr = Union[Num, Var, Neg, BinOp, Exp, Pow]

_TOKEN = re.compile(
    r"\s*(?:(?P<num>(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?)|(?P<ident>[A-Za-z_][A-Za-z_0-9]*)|(?P<op>[-+*/(),]))"
)


@dataclass(frozen=True)
class _Tok:
    kind: str  # 'num', 'ident', 'op', 'end'
    text: str
    offset: int


def _tokenize(text: str) -> list[_Tok]:
    toks = []
    pos = 0
    while True:
        while pos < len(text) and text[pos].isspace():
            pos += 1
        if pos >= len(text):
            toks.append(_Tok("end", "", len(text.encode("utf-8"))))
            return toks
        m = _TOKEN.match(text, pos)
        if m is None or m.end() == pos:
            raise ExprSyntaxError(f"unexpected character {text[pos]!r}", _byte_offset(text, pos),
                                  ("number", "identifier", "operator"))
        kind = m.lastgroup
        start = m.start(kind)
        toks.append(_Tok(kind, m.group(kind), _byte_offset(text, start)))
        pos = m.end()


def _byte_offset(text: str, pos: int) -> int:
    return len(text[:pos].encode("utf-8"))


class _Parser:
    def __init__(self, text: str, n: int):
        self.toks = _tokenize(text)
        self.i = 0
        self.n = n

    @property
    def tok(self) -> _Tok:
        return self.toks[self.i]

    def _expect(self, text: str):
        if self.tok.kind == "op" and self.tok.text == text:
            self.i += 1
            return
        found = self.tok.text or "end of input"
        raise ExprSyntaxError(f"unexpected {found!r}", self.tok.offset, (repr(text),))

    def parse(self) -> Expr:
        e = self.expr()
        if self.tok.kind != "end":
            raise ExprSyntaxError(f"unexpected {self.tok.text!r}", self.tok.offset,
                                  ("'+'", "'-'", "'*'", "'/'", "end of input"))
        return e

    def expr(self) -> Expr:
        left = self.term()
        while self.tok.kind == "op" and self.tok.text in "+-":
            op = self.tok.text
            self.i += 1
            left = BinOp(op, left, self.term())
        return left

    def term(self) -> Expr:
        left = self.unary()
        while self.tok.kind == "op" and self.tok.text in "*/":
            op = self.tok.text
            self.i += 1
            left = BinOp(op, left, self.unary())
        return left

    def unary(self) -> Expr:
        if self.tok.kind == "op" and self.tok.text == "-":
            self.i += 1
            return Neg(self.unary())
        return self.primary()

    def primary(self) -> Expr:
        tok = self.tok
        if tok.kind == "num":
            self.i += 1
            return Num(float(tok.text))
        if tok.kind == "op" and tok.text == "(":
            self.i += 1
            e = self.expr()
            self._expect(")")
            return e
        if tok.kind == "ident":
            self.i += 1
            name = tok.text
            if name == "exp":
                self._expect("(")
                arg = self.expr()
                self._expect(")")
                return Exp(arg)
            if name == "pow":
                self._expect("(")
                base = self.expr()
                self._expect(",")
                exponent = self.expr()
                self._expect(")")
                return Pow(base, exponent)
            m = re.fullmatch(r"u([0-9]+)", name)
            if m:
                idx = int(m.group(1))
                if not 1 <= idx <= self.n:
                    raise VariableRangeError(f"variable {name} out of range 1..{self.n}", tok.offset)
                return Var(idx)
            raise UnknownIdentifierError(f"unknown identifier {name!r}", tok.offset,
                                         ("exp", "pow", f"u1..u{self.n}"))
        found = tok.text or "end of input"
        raise ExprSyntaxError(f"unexpected {found!r}", tok.offset,
                              ("number", "variable", "'('", "'-'", "exp", "pow"))


def parse(text: str, n: int) -> Expr:
    """Parse ``text`` into an AST over variables ``u1..un``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    return _Parser(text, n).parse()


def to_text(e: Expr) -> str:
    """Fully parenthesised source form; ``parse(to_text(e), n) == e``."""
    if isinstance(e, Num):
        return repr(e.value)
    if isinstance(e, Var):
        return f"u{e.index}"
    if isinstance(e, Neg):
        return f"(-{to_text(e.operand)})"
    if isinstance(e, BinOp):
        return f"({to_text(e.left)} {e.op} {to_text(e.right)})"
    if isinstance(e, Exp):
        return f"exp({to_text(e.arg)})"
    if isinstance(e, Pow):
        return f"pow({to_text(e.base)}, {to_text(e.exponent)})"
    raise TypeError(f"not an expression node: {e!r}")


def variables(e: Expr) -> set[int]:
    if isinstance(e, Var):
        return {e.index}
    if isinstance(e, Num):
        return set()
    if isinstance(e, (Neg, Exp)):
        return variables(e.operand if isinstance(e, Neg) else e.arg)
    if isinstance(e, BinOp):
        return variables(e.left) | variables(e.right)
    return variables(e.base) | variables(e.exponent)


def _finite(v, what):
    if not np.all(np.isfinite(v)):
        raise EvalError(f"non-finite result in {what}")
    return v


def _pow(base, exponent):
    base = np.asarray(base, dtype=float)
    exponent = np.asarray(exponent, dtype=float)
    bad = (base < 0) & (exponent != np.round(exponent))
    if np.any(bad):
        raise EvalError("pow of a negative base with non-integer exponent")
    if np.any((base == 0) & (exponent < 0)):
        raise EvalError("pow of zero with negative exponent")
    with np.errstate(over="ignore", invalid="ignore"):
        return _finite(np.power(base, exponent), "pow")


def _eval(e: Expr, x):
    if isinstance(e, Num):
        return np.float64(e.value)
    if isinstance(e, Var):
        return x[e.index - 1]
    if isinstance(e, Neg):
        return -_eval(e.operand, x)
    if isinstance(e, BinOp):
        a = _eval(e.left, x)
        b = _eval(e.right, x)
        with np.errstate(over="ignore", invalid="ignore"):
            if e.op == "+":
                r = a + b
            elif e.op == "-":
                r = a - b
            elif e.op == "*":
                r = a * b
            else:
                if np.any(np.asarray(b) == 0):
                    raise EvalError("division by zero")
                r = a / b
        return _finite(r, f"'{e.op}'")
    if isinstance(e, Exp):
        with np.errstate(over="ignore"):
            return _finite(np.exp(_eval(e.arg, x)), "exp")
    if isinstance(e, Pow):
        return _pow(_eval(e.base, x), _eval(e.exponent, x))
    raise TypeError(f"not an expression node: {e!r}")


def evaluate(e: Expr, x) -> np.ndarray | float:
    """Evaluate ``e`` at ``x``; ``x[i-1]`` binds ``ui`` (scalars or arrays)."""
    if isinstance(x, np.ndarray) and x.ndim >= 1:
        vals = [x[i] for i in range(x.shape[0])]
    else:
        vals = [np.asarray(v, dtype=float) for v in x]
    for v in vals:
        if not np.all(np.isfinite(v)):
            raise EvalError("non-finite input")
    r = _eval(e, vals)
    if np.ndim(r) == 0:
        return float(r)
    return r


# public name; ``eval`` would shadow the builtin
eval_expr = evaluate
