"""Text lambdas: a small, pure expression language evaluated by executors.

Drivers in any language ship operator logic as source text; executors parse it
once (fail-fast, before first use) and interpret it per element. The grammar,
also published in docs/protocol.md:

    expr    := "if" expr "then" expr "else" expr | or
    or      := and  ( "||" and )*
    and     := eq   ( "&&" eq )*
    eq      := rel  ( ("==" | "!=") rel )*
    rel     := add  ( ("<" | "<=" | ">" | ">=") add )*
    add     := mul  ( ("+" | "-") mul )*
    mul     := unary ( ("*" | "/" | "%") unary )*
    unary   := ("-" | "!" | "fst" | "snd" | "len") unary | primary
    primary := literal | ident | "$" ident
             | "(" expr ")" | "(" expr "," expr ")"
             | "[" ( expr ("," expr)* )? "]"
    literal := int | float | string | "true" | "false" | "null"

Semantics: strict evaluation over the engine's element model. Integer
arithmetic stays integer, with / truncating toward zero and % taking the sign
of the dividend; mixing in a float promotes to float. Comparisons use the
engine's total value order, == is structural equality. && and || require
booleans and short-circuit. `$name` reads a driver-captured variable from the
executor context. Evaluation never mutates anything.
"""

import math
from dataclasses import dataclass

from .errors import (
    ArityMismatchError,
    DivisionByZeroError,
    LambdaSyntaxError,
    LambdaTypeError,
    UnknownVariableError,
)
from .values import compare_values, value_tag, TAG_BOOL, TAG_F64, TAG_I64

_KEYWORDS = {"if", "then", "else", "true", "false", "null", "fst", "snd", "len"}
_TWO_CHAR = {"==", "!=", "<=", ">=", "&&", "||"}
_ONE_CHAR = set("+-*/%<>!()[],$")
_ESCAPES = {"n": "\n", "t": "\t", "r": "\r", "0": "\0", '"': '"', "'": "'", "\\": "\\"}


@dataclass(frozen=True)
class Token:
    kind: str   # num | str | ident | kw | op | end
    text: str
    value: object
    line: int
    col: int


def _tokenize(src):
    tokens = []
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
        start_line, start_col = line, col
        if src[i:i + 2] in _TWO_CHAR:
            tokens.append(Token("op", src[i:i + 2], None, line, col))
            i += 2
            col += 2
            continue
        if c.isdigit() or (c == "." and i + 1 < n and src[i + 1].isdigit()):
            j = i
            is_float = False
            while j < n and src[j].isdigit():
                j += 1
            if j < n and src[j] == ".":
                is_float = True
                j += 1
                while j < n and src[j].isdigit():
                    j += 1
            if j < n and src[j] in "eE":
                k = j + 1
                if k < n and src[k] in "+-":
                    k += 1
                if k < n and src[k].isdigit():
                    is_float = True
                    j = k
                    while j < n and src[j].isdigit():
                        j += 1
            text = src[i:j]
            value = float(text) if is_float else int(text)
            tokens.append(Token("num", text, value, start_line, start_col))
            col += j - i
            i = j
            continue
        if c.isalpha() or c == "_":
            j = i
            while j < n and (src[j].isalnum() or src[j] == "_"):
                j += 1
            text = src[i:j]
            kind = "kw" if text in _KEYWORDS else "ident"
            tokens.append(Token(kind, text, None, start_line, start_col))
            col += j - i
            i = j
            continue
        if c in "\"'":
            quote = c
            j = i + 1
            out = []
            while True:
                if j >= n:
                    raise LambdaSyntaxError("unterminated string literal", start_line, start_col)
                ch = src[j]
                if ch == quote:
                    j += 1
                    break
                if ch == "\\":
                    if j + 1 >= n or src[j + 1] not in _ESCAPES:
                        raise LambdaSyntaxError("bad escape sequence", line, col + (j - i))
                    out.append(_ESCAPES[src[j + 1]])
                    j += 2
                    continue
                out.append(ch)
                j += 1
            tokens.append(Token("str", src[i:j], "".join(out), start_line, start_col))
            col += j - i
            i = j
            continue
        if c in _ONE_CHAR:
            tokens.append(Token("op", c, None, line, col))
            i += 1
            col += 1
            continue
        raise LambdaSyntaxError(f"unexpected character {c!r}", line, col)
    tokens.append(Token("end", "", None, line, col))
    return tokens


# AST nodes -----------------------------------------------------------------

@dataclass(frozen=True)
class Lit:
    value: object


@dataclass(frozen=True)
class Var:
    name: str


@dataclass(frozen=True)
class CtxVar:
    name: str


@dataclass(frozen=True)
class Unary:
    op: str
    operand: object


@dataclass(frozen=True)
class Binary:
    op: str
    left: object
    right: object


@dataclass(frozen=True)
class PairExpr:
    first: object
    second: object


@dataclass(frozen=True)
class ListExpr:
    items: tuple


@dataclass(frozen=True)
class IfExpr:
    cond: object
    then: object
    other: object


class _Parser:
    def __init__(self, tokens):
        self.tokens = tokens
        self.pos = 0

    def peek(self):
        return self.tokens[self.pos]

    def next(self):
        t = self.tokens[self.pos]
        self.pos += 1
        return t

    def fail(self, message, token=None):
        t = token or self.peek()
        raise LambdaSyntaxError(message, t.line, t.col)

    def expect_op(self, text):
        t = self.next()
        if t.kind != "op" or t.text != text:
            self.fail(f"expected {text!r}", t)

    def parse(self):
        e = self.expr()
        t = self.peek()
        if t.kind != "end":
            self.fail(f"unexpected {t.text!r} after expression", t)
        return e

    def expr(self):
        t = self.peek()
        if t.kind == "kw" and t.text == "if":
            self.next()
            cond = self.expr()
            t = self.next()
            if not (t.kind == "kw" and t.text == "then"):
                self.fail("expected 'then'", t)
            then = self.expr()
            t = self.next()
            if not (t.kind == "kw" and t.text == "else"):
                self.fail("expected 'else'", t)
            unless = self.expr()
            return IfExpr(cond, then, unless)
        return self.or_expr()

    def _binchain(self, sub, ops):
        left = sub()
        while True:
            t = self.peek()
            if t.kind == "op" and t.text in ops:
                self.next()
                left = Binary(t.text, left, sub())
            else:
                return left

    def or_expr(self):
        return self._binchain(self.and_expr, {"||"})

    def and_expr(self):
        return self._binchain(self.eq_expr, {"&&"})

    def eq_expr(self):
        return self._binchain(self.rel_expr, {"==", "!="})

    def rel_expr(self):
        return self._binchain(self.add_expr, {"<", "<=", ">", ">="})

    def add_expr(self):
        return self._binchain(self.mul_expr, {"+", "-"})

    def mul_expr(self):
        return self._binchain(self.unary_expr, {"*", "/", "%"})

    def unary_expr(self):
        t = self.peek()
        if t.kind == "op" and t.text in ("-", "!"):
            self.next()
            return Unary(t.text, self.unary_expr())
        if t.kind == "kw" and t.text in ("fst", "snd", "len"):
            self.next()
            return Unary(t.text, self.unary_expr())
        return self.primary()

    def primary(self):
        t = self.next()
        if t.kind == "num" or t.kind == "str":
            return Lit(t.value)
        if t.kind == "kw":
            if t.text == "true":
                return Lit(True)
            if t.text == "false":
                return Lit(False)
            if t.text == "null":
                return Lit(None)
            self.fail(f"unexpected keyword {t.text!r}", t)
        if t.kind == "ident":
            return Var(t.text)
        if t.kind == "op" and t.text == "$":
            name = self.next()
            if name.kind not in ("ident", "kw"):
                self.fail("expected variable name after '$'", name)
            return CtxVar(name.text)
        if t.kind == "op" and t.text == "(":
            first = self.expr()
            nxt = self.next()
            if nxt.kind == "op" and nxt.text == ",":
                second = self.expr()
                self.expect_op(")")
                return PairExpr(first, second)
            if nxt.kind == "op" and nxt.text == ")":
                return first
            self.fail("expected ')' or ','", nxt)
        if t.kind == "op" and t.text == "[":
            items = []
            if not (self.peek().kind == "op" and self.peek().text == "]"):
                items.append(self.expr())
                while self.peek().kind == "op" and self.peek().text == ",":
                    self.next()
                    items.append(self.expr())
            self.expect_op("]")
            return ListExpr(tuple(items))
        self.fail(f"unexpected {t.text!r}" if t.text else "unexpected end of input", t)


def _free_vars(node, out):
    if isinstance(node, Var):
        out.add(node.name)
    elif isinstance(node, Unary):
        _free_vars(node.operand, out)
    elif isinstance(node, Binary):
        _free_vars(node.left, out)
        _free_vars(node.right, out)
    elif isinstance(node, PairExpr):
        _free_vars(node.first, out)
        _free_vars(node.second, out)
    elif isinstance(node, ListExpr):
        for item in node.items:
            _free_vars(item, out)
    elif isinstance(node, IfExpr):
        _free_vars(node.cond, out)
        _free_vars(node.then, out)
        _free_vars(node.other, out)


@dataclass(frozen=True)
class LambdaText:
    """A parsed text lambda: parameter names plus the expression tree."""

    params: tuple
    body: str
    expr: object

    @property
    def arity(self):
        return len(self.params)


def parse_lambda(params, src):
    """Parse a lambda body against its declared parameters. Fails fast."""
    params = tuple(params)
    if len(params) > 2:
        raise ArityMismatchError(f"lambdas take at most two parameters, got {len(params)}")
    tree = _Parser(_tokenize(src)).parse()
    free = set()
    _free_vars(tree, free)
    unknown = free - set(params)
    if unknown:
        raise ArityMismatchError(
            f"lambda body references undeclared identifiers: {', '.join(sorted(unknown))}"
        )
    return LambdaText(params, src, tree)


def parse_lambda_source(src):
    """Parse the header form ``lambda a, b: body``."""
    head, sep, body = src.partition(":")
    head = head.strip()
    if not sep or not head.startswith("lambda"):
        raise LambdaSyntaxError("expected 'lambda <params>: <body>'", 1, 1)
    rest = head[len("lambda"):].strip()
    params = [p.strip() for p in rest.split(",") if p.strip()] if rest else []
    return parse_lambda(params, body.strip())


def _is_number(v):
    t = value_tag(v)
    return t in (TAG_I64, TAG_F64) and t != TAG_BOOL


def _type_name(v):
    return {0: "null", 1: "bool", 2: "i64", 3: "f64", 4: "str", 5: "bytes", 6: "pair", 7: "list"}[
        value_tag(v)
    ]


def _trunc_div(a, b):
    q = a // b
    if q < 0 and q * b != a:
        q += 1
    return q


def _arith(op, a, b):
    if not _is_number(a) or not _is_number(b):
        raise LambdaTypeError(f"cannot apply {op!r} to {_type_name(a)} and {_type_name(b)}")
    both_int = isinstance(a, int) and isinstance(b, int)
    if op == "+":
        return a + b
    if op == "-":
        return a - b
    if op == "*":
        return a * b
    if op == "/":
        if both_int:
            if b == 0:
                raise DivisionByZeroError("integer division by zero")
            return _trunc_div(a, b)
        if b == 0:
            # IEEE semantics for floats
            if a == 0 or math.isnan(a if isinstance(a, float) else float(a)):
                return float("nan")
            return math.copysign(float("inf"), a) * math.copysign(1.0, b)
        return a / b
    # op == "%"
    if both_int:
        if b == 0:
            raise DivisionByZeroError("integer modulo by zero")
        return a - _trunc_div(a, b) * b
    return math.fmod(a, b)


def _eval(node, env, variables):
    if isinstance(node, Lit):
        return node.value
    if isinstance(node, Var):
        return env[node.name]
    if isinstance(node, CtxVar):
        try:
            return variables[node.name]
        except KeyError:
            raise UnknownVariableError(f"context variable {node.name!r} is not set") from None
    if isinstance(node, Unary):
        if node.op == "!":
            v = _eval(node.operand, env, variables)
            if value_tag(v) != TAG_BOOL:
                raise LambdaTypeError(f"'!' needs a bool, got {_type_name(v)}")
            return not v
        if node.op == "-":
            v = _eval(node.operand, env, variables)
            if not _is_number(v):
                raise LambdaTypeError(f"unary '-' needs a number, got {_type_name(v)}")
            return -v
        if node.op == "len":
            v = _eval(node.operand, env, variables)
            if isinstance(v, (str, bytes, list)):
                return len(v)
            raise LambdaTypeError(f"'len' needs str, bytes or list, got {_type_name(v)}")
        # fst / snd
        v = _eval(node.operand, env, variables)
        if not isinstance(v, tuple):
            raise LambdaTypeError(f"{node.op!r} needs a pair, got {_type_name(v)}")
        return v[0] if node.op == "fst" else v[1]
    if isinstance(node, Binary):
        op = node.op
        if op == "&&" or op == "||":
            left = _eval(node.left, env, variables)
            if value_tag(left) != TAG_BOOL:
                raise LambdaTypeError(f"{op!r} needs bools, got {_type_name(left)}")
            if op == "&&" and not left:
                return False
            if op == "||" and left:
                return True
            right = _eval(node.right, env, variables)
            if value_tag(right) != TAG_BOOL:
                raise LambdaTypeError(f"{op!r} needs bools, got {_type_name(right)}")
            return right
        left = _eval(node.left, env, variables)
        right = _eval(node.right, env, variables)
        if op == "==":
            return compare_values(left, right) == 0
        if op == "!=":
            return compare_values(left, right) != 0
        if op == "<":
            return compare_values(left, right) < 0
        if op == "<=":
            return compare_values(left, right) <= 0
        if op == ">":
            return compare_values(left, right) > 0
        if op == ">=":
            return compare_values(left, right) >= 0
        return _arith(op, left, right)
    if isinstance(node, PairExpr):
        return (_eval(node.first, env, variables), _eval(node.second, env, variables))
    if isinstance(node, ListExpr):
        return [_eval(item, env, variables) for item in node.items]
    if isinstance(node, IfExpr):
        cond = _eval(node.cond, env, variables)
        if value_tag(cond) != TAG_BOOL:
            raise LambdaTypeError(f"'if' condition must be a bool, got {_type_name(cond)}")
        return _eval(node.then if cond else node.other, env, variables)
    raise AssertionError(f"unknown node {node!r}")


def eval_lambda(l, args, variables=None):
    """Evaluate a parsed lambda on argument values with driver-captured vars."""
    if len(args) != len(l.params):
        raise ArityMismatchError(f"lambda takes {len(l.params)} arguments, got {len(args)}")
    env = dict(zip(l.params, args))
    return _eval(l.expr, env, variables or {})


def lambda_to_value(l):
    """Wire form: Pair(List of param names, body source)."""
    return (list(l.params), l.body)


def lambda_from_value(v):
    params, body = v
    return parse_lambda([str(p) for p in params], body)
