"""Parser for the lavaan-style model language.

The grammar is line oriented::

    # comment
    level: 1
    F =~ x1 + a*x2 + prior('normal(1, 0.2)')*x3
    F ~ start(0.5)*G + x4
    x1 ~~ x2
    x1 ~ 1
    ind := a * b

Statements end at a newline or ``;``. A line whose right-hand side ends in
``+`` (or ``*``) continues on the next line.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field, asdict
from typing import Optional, Union

import numpy as np

__all__ = [
    "ModelSyntaxError",
    "EmptyModel",
    "UnknownOperator",
    "DanglingModifier",
    "MalformedPrior",
    "UnknownFamily",
    "WrongArity",
    "DuplicateLevel",
    "PriorSpec",
    "Term",
    "ModelStatement",
    "Expr",
    "parse_model",
    "parse_prior_string",
    "parse_expression",
    "format_model",
    "ast_to_json",
]


class ModelSyntaxError(ValueError):
    """Base class for every error raised while reading a model string."""

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class EmptyModel(ModelSyntaxError):
    pass


class UnknownOperator(ModelSyntaxError):
    pass


class DanglingModifier(ModelSyntaxError):
    pass


class MalformedPrior(ModelSyntaxError):
    pass


class UnknownFamily(MalformedPrior):
    pass


class WrongArity(MalformedPrior):
    pass


class DuplicateLevel(ModelSyntaxError):
    pass


# --------------------------------------------------------------------------
# priors
# --------------------------------------------------------------------------

PRIOR_FAMILIES = ("normal", "gamma", "beta")
TARGET_SCALES = ("coefficient", "sd", "var", "cor")
_DEFAULT_TARGET = {"normal": "coefficient", "gamma": "sd", "beta": "cor"}

_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?"
_PRIOR_RE = re.compile(r"^\s*([A-Za-z_]\w*)\s*\(([^()]*)\)\s*(?:\[\s*([A-Za-z]+)\s*\])?\s*$")


@dataclass(frozen=True)
class PriorSpec:
    family: str
    params: tuple
    target_scale: str

    def __str__(self):
        p = ",".join(_fmt_num(v) for v in self.params)
        s = f"{self.family}({p})"
        if self.target_scale != _DEFAULT_TARGET[self.family]:
            s += f"[{self.target_scale}]"
        elif self.family == "gamma":
            s += "[sd]"
        return s


def _fmt_num(v):
    s = repr(float(v))
    if s.endswith(".0"):
        s = s[:-2]
    if s.startswith("0."):
        s = s[1:]
    elif s.startswith("-0."):
        s = "-" + s[2:]
    return s


def parse_prior_string(text: str) -> PriorSpec:
    """Parse ``family(p1,p2)`` with an optional ``[scale]`` suffix.

    >>> parse_prior_string("gamma(1,.5)[sd]")
    PriorSpec(family='gamma', params=(1.0, 0.5), target_scale='sd')
    """
    m = _PRIOR_RE.match(text)
    if not m:
        raise MalformedPrior(f"cannot read prior {text!r}")
    family, body, scale = m.group(1).lower(), m.group(2), m.group(3)
    if family not in PRIOR_FAMILIES:
        raise UnknownFamily(f"unknown prior family {family!r}")
    parts = [p.strip() for p in body.split(",")] if body.strip() else []
    if len(parts) != 2:
        raise WrongArity(f"{family} prior takes 2 parameters, got {len(parts)}")
    try:
        params = tuple(float(p) for p in parts)
    except ValueError:
        raise MalformedPrior(f"non-numeric prior parameters in {text!r}") from None
    if not all(np.isfinite(params)):
        raise MalformedPrior(f"non-finite prior parameters in {text!r}")
    if family == "normal" and params[1] <= 0:
        raise MalformedPrior("normal prior needs a positive standard deviation")
    if family in ("gamma", "beta") and min(params) <= 0:
        raise MalformedPrior(f"{family} prior parameters must be positive")
    scale = (scale or _DEFAULT_TARGET[family]).lower()
    if scale == "coef":
        scale = "coefficient"
    if scale not in TARGET_SCALES:
        raise MalformedPrior(f"unknown prior scale [{scale}]")
    return PriorSpec(family, params, scale)


# --------------------------------------------------------------------------
# := expressions
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Expr:
    """Arithmetic expression node. ``kind`` is num, name, neg or one of + - * / ^."""

    kind: str
    value: Union[float, str, None] = None
    args: tuple = ()

    def names(self):
        if self.kind == "name":
            return {self.value}
        out = set()
        for a in self.args:
            out |= a.names()
        return out

    def evaluate(self, env):
        k = self.kind
        if k == "num":
            return self.value
        if k == "name":
            return env[self.value]
        if k == "neg":
            return -self.args[0].evaluate(env)
        a, b = (arg.evaluate(env) for arg in self.args)
        if k == "+":
            return a + b
        if k == "-":
            return a - b
        if k == "*":
            return a * b
        if k == "/":
            return a / b
        return a**b

    def __str__(self):
        return _expr_str(self, 0)


_PREC = {"+": 1, "-": 1, "*": 2, "/": 2, "neg": 3, "^": 4}


def _expr_str(e, parent):
    if e.kind == "num":
        return _fmt_num(e.value)
    if e.kind == "name":
        return e.value
    if e.kind == "neg":
        s = "-" + _expr_str(e.args[0], _PREC["neg"])
        return f"({s})" if parent > _PREC["neg"] else s
    p = _PREC[e.kind]
    right_p = p + 1 if e.kind in "-/" else p
    if e.kind == "^":
        left, right_p = _expr_str(e.args[0], p + 1), p
    else:
        left = _expr_str(e.args[0], p)
    s = f"{left} {e.kind} {_expr_str(e.args[1], right_p)}"
    return f"({s})" if parent > p else s


_TOKEN_RE = re.compile(rf"\s*(?:({_NUMBER[5:]})|([A-Za-z_.][\w.]*)|(\*\*|[-+*/^()]))")


def parse_expression(text: str, line=None) -> Expr:
    """Recursive-descent parser for the right-hand side of ``:=``."""
    tokens = []
    pos = 0
    text = text.rstrip()
    while pos < len(text):
        m = _TOKEN_RE.match(text, pos)
        if not m or m.end() == pos:
            raise ModelSyntaxError(f"unexpected character in expression {text!r}", line)
        num, name, op = m.groups()
        if num is not None:
            tokens.append(("num", float(num)))
        elif name is not None:
            tokens.append(("name", name))
        else:
            tokens.append(("op", "^" if op == "**" else op))
        pos = m.end()
    if not tokens:
        raise ModelSyntaxError("empty expression", line)
    i = 0

    def peek():
        return tokens[i] if i < len(tokens) else (None, None)

    def take():
        nonlocal i
        i += 1
        return tokens[i - 1]

    def additive():
        node = multiplicative()
        while peek() in (("op", "+"), ("op", "-")):
            op = take()[1]
            node = Expr(op, args=(node, multiplicative()))
        return node

    def multiplicative():
        node = unary()
        while peek() in (("op", "*"), ("op", "/")):
            op = take()[1]
            node = Expr(op, args=(node, unary()))
        return node

    def unary():
        if peek() == ("op", "-"):
            take()
            return Expr("neg", args=(unary(),))
        if peek() == ("op", "+"):
            take()
            return unary()
        return power()

    def power():
        base = atom()
        if peek() == ("op", "^"):
            take()
            return Expr("^", args=(base, unary()))
        return base

    def atom():
        kind, val = peek()
        if kind == "num":
            take()
            return Expr("num", val)
        if kind == "name":
            take()
            return Expr("name", val)
        if (kind, val) == ("op", "("):
            take()
            node = additive()
            if take() != ("op", ")"):
                raise ModelSyntaxError("unbalanced parentheses", line)
            return node
        raise ModelSyntaxError(f"unexpected token {val!r} in expression", line)

    try:
        node = additive()
    except IndexError:
        raise ModelSyntaxError(f"incomplete expression {text!r}", line) from None
    if i != len(tokens):
        raise ModelSyntaxError(f"trailing tokens in expression {text!r}", line)
    return node


# --------------------------------------------------------------------------
# statements
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Term:
    variable: str
    fixed_value: Optional[float] = None
    prior: Optional[PriorSpec] = None
    start: Optional[float] = None
    label: Optional[str] = None
    free: bool = False  # explicit NA* modifier

    def __str__(self):
        mods = []
        if self.free:
            mods.append("NA")
        if self.fixed_value is not None:
            mods.append(_fmt_num(self.fixed_value))
        if self.label is not None:
            mods.append(self.label)
        if self.prior is not None:
            mods.append(f"prior('{self.prior}')")
        if self.start is not None:
            mods.append(f"start({_fmt_num(self.start)})")
        return "*".join(mods + [self.variable])


@dataclass(frozen=True)
class ModelStatement:
    lhs: tuple
    op: str
    rhs: tuple = ()  # Term objects; empty for ":="
    level: int = 1
    expression: Optional[Expr] = None
    line: Optional[int] = None

    def __str__(self):
        left = " + ".join(self.lhs)
        if self.op == ":=":
            return f"{left} := {self.expression}"
        if self.op == "~1":
            t = self.rhs[0]
            return f"{left} ~ {str(t)}"
        return f"{left} {self.op} " + " + ".join(str(t) for t in self.rhs)

    def __eq__(self, other):
        if not isinstance(other, ModelStatement):
            return NotImplemented
        return (self.lhs, self.op, self.rhs, self.level, self.expression) == (
            other.lhs,
            other.op,
            other.rhs,
            other.level,
            other.expression,
        )

    def __hash__(self):
        return hash((self.lhs, self.op, self.rhs, self.level))


_IDENT = re.compile(r"^[A-Za-z_.][\w.]*$")
_OP_RE = re.compile(r"(=~|~~|:=|<~|==|<=|>=|~|<|>)")
_LEVEL_RE = re.compile(r"^\s*level\s*:\s*(\S+)\s*$", re.IGNORECASE)


def _strip_comment(line):
    out = []
    quote = None
    for ch in line:
        if quote:
            if ch == quote:
                quote = None
        elif ch in "'\"":
            quote = ch
        elif ch in "#!":
            break
        out.append(ch)
    return "".join(out)


def _split_outside_quotes(text, sep):
    parts, buf, depth, quote = [], [], 0, None
    for ch in text:
        if quote:
            if ch == quote:
                quote = None
            buf.append(ch)
            continue
        if ch in "'\"":
            quote = ch
        elif ch == "(":
            depth += 1
        elif ch == ")":
            depth -= 1
        if ch == sep and depth == 0:
            parts.append("".join(buf))
            buf = []
        else:
            buf.append(ch)
    parts.append("".join(buf))
    return parts


def _logical_lines(source):
    """Yield (line_number, text) after comment removal and continuation joining."""
    pending, pending_no = "", None
    for no, raw in enumerate(source.splitlines(), start=1):
        for piece in _split_outside_quotes(_strip_comment(raw), ";"):
            text = piece.strip()
            if not text:
                continue
            if pending:
                pending = f"{pending} {text}"
            else:
                pending, pending_no = text, no
            if pending.endswith(("+", "*")) or re.search(r"(=~|~~|~|:=)\s*$", pending):
                continue
            yield pending_no, pending
            pending = ""
    if pending:
        yield pending_no, pending


def _parse_modifier(mod, line):
    """Return a dict of Term fields for one ``mod*`` prefix."""
    mod = mod.strip()
    if not mod:
        raise DanglingModifier("empty modifier", line)
    m = re.match(r"^(prior|start|label)\s*\((.*)\)$", mod, re.DOTALL)
    if m:
        kind, arg = m.group(1), m.group(2).strip()
        if kind == "start":
            try:
                return {"start": float(arg)}
            except ValueError:
                raise ModelSyntaxError(f"bad start value {arg!r}", line) from None
        if len(arg) < 2 or arg[0] not in "'\"" or arg[-1] != arg[0]:
            raise MalformedPrior(f"{kind}() expects a quoted string, got {arg!r}", line)
        inner = arg[1:-1]
        if kind == "label":
            return {"label": inner}
        try:
            return {"prior": parse_prior_string(inner)}
        except MalformedPrior as exc:
            raise type(exc)(str(exc), line) from None
    if mod == "NA":
        return {"free": True}
    if re.fullmatch(_NUMBER, mod):
        return {"fixed_value": float(mod)}
    if _IDENT.match(mod):
        return {"label": mod}
    raise ModelSyntaxError(f"cannot read modifier {mod!r}", line)


def _parse_term(text, line, allow_one=False):
    pieces = _split_outside_quotes(text, "*")
    pieces = [p.strip() for p in pieces]
    var = pieces[-1]
    if not var:
        raise DanglingModifier(f"modifier without a variable in {text.strip()!r}", line)
    if not (_IDENT.match(var) or (allow_one and var == "1")):
        if re.fullmatch(_NUMBER, var) or var.startswith(("prior(", "start(", "label(")):
            raise DanglingModifier(f"modifier without a variable in {text.strip()!r}", line)
        raise ModelSyntaxError(f"bad variable name {var!r}", line)
    fields = {}
    for mod in pieces[:-1]:
        for key, val in _parse_modifier(mod, line).items():
            if key in fields:
                raise ModelSyntaxError(f"repeated {key} modifier on {var}", line)
            fields[key] = val
    if "fixed_value" in fields and "prior" in fields:
        raise ModelSyntaxError(f"{var}: a fixed value cannot also carry a prior", line)
    if "fixed_value" in fields and fields.get("free"):
        raise ModelSyntaxError(f"{var}: NA and a fixed value on the same term", line)
    return Term(var, **fields)


def parse_model(source: str) -> list:
    """Parse a model string into a list of :class:`ModelStatement`."""
    statements = []
    level = 1
    seen_levels = []
    for no, text in _logical_lines(source):
        m = _LEVEL_RE.match(text)
        if m:
            try:
                lev = int(m.group(1))
            except ValueError:
                raise ModelSyntaxError(f"level must be an integer, got {m.group(1)!r}", no) from None
            if lev in seen_levels:
                raise DuplicateLevel(f"level {lev} declared twice", no)
            seen_levels.append(lev)
            level = lev
            continue
        ops = _OP_RE.findall(text)
        if not ops:
            raise UnknownOperator(f"no operator in {text!r}", no)
        op = ops[0]
        if op not in ("=~", "~~", "~", ":="):
            raise UnknownOperator(f"unsupported operator {op!r}", no)
        left, right = text.split(op, 1)
        left, right = left.strip(), right.strip()
        if op == ":=":
            if not _IDENT.match(left):
                raise ModelSyntaxError(f"bad name for defined parameter {left!r}", no)
            statements.append(
                ModelStatement((left,), ":=", (), level, parse_expression(right, no), line=no)
            )
            continue
        lhs = tuple(s.strip() for s in left.split("+"))
        for name in lhs:
            if not _IDENT.match(name):
                raise ModelSyntaxError(f"bad left-hand side {left!r}", no)
        if not right:
            raise DanglingModifier(f"missing right-hand side after {op}", no)
        if right.endswith(("+", "*")):
            raise DanglingModifier(f"statement ends with {right[-1]!r}", no)
        raw_terms = _split_outside_quotes(right, "+")
        if any(not t.strip() for t in raw_terms):
            raise ModelSyntaxError(f"empty term in {right!r}", no)
        terms = tuple(_parse_term(t, no, allow_one=(op == "~")) for t in raw_terms)
        if op == "~" and any(t.variable == "1" for t in terms):
            if len(terms) != 1:
                raise ModelSyntaxError("intercept '1' must stand alone on the right", no)
            op = "~1"
        statements.append(ModelStatement(lhs, op, terms, level, line=no))
    if not statements:
        raise EmptyModel("model contains no statements")
    if seen_levels and sorted(seen_levels) != list(range(1, len(seen_levels) + 1)):
        raise ModelSyntaxError(f"levels must be numbered 1..L, got {seen_levels}")
    return statements


def format_model(statements) -> str:
    """Render statements back to model text (parses to an equal AST)."""
    multilevel = any(s.level != 1 for s in statements)
    lines, current = [], None
    for s in statements:
        if multilevel and s.level != current:
            lines.append(f"level: {s.level}")
            current = s.level
        lines.append(str(s))
    return "\n".join(lines) + "\n"


def _term_dict(t):
    d = asdict(t)
    d["prior"] = None if t.prior is None else {
        "family": t.prior.family,
        "params": list(t.prior.params),
        "target_scale": t.prior.target_scale,
    }
    return d


def ast_to_json(statements, indent=2) -> str:
    out = []
    for s in statements:
        out.append(
            {
                "lhs": list(s.lhs),
                "op": s.op,
                "rhs": [_term_dict(t) for t in s.rhs],
                "level": s.level,
                "expression": None if s.expression is None else str(s.expression),
                "line": s.line,
            }
        )
    return json.dumps(out, indent=indent)
