"""Quadratic polynomial ODE systems and a small line-oriented DSL.

A system ``x_k' = c_k + sum_l A_kl x_l + sum_e coeff_e x_l x_m`` is kept in
normalized tensor form: a constant vector, a dense linear block and a sparse
list of bilinear entries with ``l <= m``.  Lorenz is the built-in instance.

DSL example::

    system lorenz
    param sigma = 10
    param R = 28
    param b = 8/3
    var x = -15.8
    var y = -17.48
    var z = 35.64
    eq x' = sigma*y - sigma*x
    eq y' = R*x - y - x*z
    eq z' = x*y - b*z
"""

from __future__ import annotations

import hashlib
import math
import re
from dataclasses import dataclass, field, replace
from functools import cached_property
from pathlib import Path
from typing import NamedTuple, Sequence

import gmpy2
from gmpy2 import mpfr, mpq

from .errors import ConfigurationError, ParseError, PrecisionMismatch
from .precision import BigReal, PrecisionContext, parse_decimal

__all__ = [
    "BilinearTerm",
    "QuadraticSystem",
    "SystemSource",
    "builtin_lorenz",
    "parse_system",
    "evaluate_rhs",
    "resolve_system",
    "lorenz_source",
    "lorenz_equilibria",
    "LORENZ_INITIAL",
]

LORENZ_INITIAL = ("-15.8", "-17.48", "35.64")

_IDENT = r"[A-Za-z_][A-Za-z0-9_]*"
_IDENT_RE = re.compile(_IDENT + r"\Z")
_NUMBER = r"[0-9]+(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?"
_TOKEN_RE = re.compile(rf"\s*(?:(?P<num>{_NUMBER})|(?P<id>{_IDENT})|(?P<op>[*+-]))")
_RATIONAL_RE = re.compile(r"([+-]?[0-9]+)\s*/\s*([0-9]+)\Z")


class BilinearTerm(NamedTuple):
    """``coeff * x_l * x_m`` contributing to equation ``k`` (``l <= m``)."""

    k: int
    l: int
    m: int
    coeff: BigReal


@dataclass(frozen=True)
class QuadraticSystem:
    names: tuple[str, ...]
    constant: tuple[BigReal, ...]
    linear: tuple[tuple[BigReal, ...], ...]
    bilinear: tuple[BilinearTerm, ...]
    initial_state: tuple[BigReal, ...]
    context: PrecisionContext
    title: str = field(default="system", compare=False)

    def __post_init__(self):
        d = len(self.names)
        if d < 1:
            raise ConfigurationError("a system needs at least one variable")
        if len(set(self.names)) != d:
            raise ConfigurationError(f"duplicate variable names in {self.names}")
        for name in self.names:
            if not _IDENT_RE.match(name):
                raise ConfigurationError(f"invalid variable name {name!r}")
        if len(self.constant) != d or len(self.initial_state) != d:
            raise ConfigurationError("constant/initial_state length must equal dim")
        if len(self.linear) != d or any(len(row) != d for row in self.linear):
            raise ConfigurationError("linear block must be dim x dim")
        for e in self.bilinear:
            if not (0 <= e.k < d and 0 <= e.l <= e.m < d):
                raise ConfigurationError(f"bilinear entry out of canonical range: {e[:3]}")
        values = [*self.constant, *self.initial_state, *(e.coeff for e in self.bilinear)]
        values += [a for row in self.linear for a in row]
        if any(v.context != self.context for v in values):
            raise PrecisionMismatch("all system coefficients must share one context")

    @property
    def dim(self) -> int:
        return len(self.names)

    def with_state(self, state: Sequence[BigReal]) -> "QuadraticSystem":
        return replace(self, initial_state=tuple(state))

    # Raw views consumed by the integration kernels.

    @cached_property
    def constant_raw(self) -> tuple[mpfr, ...]:
        return tuple(c.value for c in self.constant)

    @cached_property
    def linear_rows(self) -> tuple[tuple[tuple[int, mpfr], ...], ...]:
        """Per equation, the nonzero ``(l, A_kl)`` pairs in ascending ``l``."""
        return tuple(
            tuple((l, a.value) for l, a in enumerate(row) if not a.is_zero())
            for row in self.linear
        )

    @cached_property
    def bilinear_raw(self) -> tuple[tuple[int, int, int, mpfr], ...]:
        return tuple((e.k, e.l, e.m, e.coeff.value) for e in self.bilinear)

    @cached_property
    def couplings(self) -> tuple[tuple[int, ...], ...]:
        """Per equation, indices into ``bilinear`` of the entries feeding it."""
        rows = [[] for _ in range(self.dim)]
        for idx, e in enumerate(self.bilinear):
            rows[e.k].append(idx)
        return tuple(tuple(r) for r in rows)

    def fingerprint(self) -> str:
        """Stable short hash of names, precision and every coefficient bit."""
        h = hashlib.sha256()
        h.update(f"{self.names}|{self.context.decimal_digits}".encode())
        for v in (*self.constant, *self.initial_state):
            h.update(v.to_hex().encode() + b";")
        for row in self.linear:
            for a in row:
                h.update(a.to_hex().encode() + b";")
        for e in self.bilinear:
            h.update(f"{e.k},{e.l},{e.m},{e.coeff.to_hex()};".encode())
        return h.hexdigest()[:16]

    def to_dsl(self) -> str:
        """Emit DSL text that parses back to identical tensors at this context."""
        lines = [f"system {self.title}"]
        for name, v in zip(self.names, self.initial_state):
            lines.append(f"var {name} = {_exact_literal(v)}")
        for k, name in enumerate(self.names):
            terms = []
            if not self.constant[k].is_zero():
                terms.append((self.constant[k], ""))
            for l, a in enumerate(self.linear[k]):
                if not a.is_zero():
                    terms.append((a, self.names[l]))
            for e in self.bilinear:
                if e.k == k:
                    terms.append((e.coeff, f"{self.names[e.l]}*{self.names[e.m]}"))
            lines.append(f"eq {name}' = {_join_terms(terms)}")
        return "\n".join(lines) + "\n"


def _exact_literal(v: BigReal) -> str:
    # enough digits for a nearest-rounding round trip through MPFR
    ctx = v.context
    n = 1 + math.ceil(ctx.binary_digits * math.log10(2))
    if v.is_zero():
        return "0"
    with ctx.working():
        digits, e, _ = v.value.digits(10, n)
    sign = "-" if digits.startswith("-") else ""
    digits = digits.lstrip("-")
    return f"{sign}{digits[0]}.{digits[1:]}e{e - 1:+d}"


def _join_terms(terms) -> str:
    if not terms:
        return "0"
    out = []
    for i, (coeff, monomial) in enumerate(terms):
        negative = coeff.sign() < 0
        literal = _exact_literal(abs(coeff))
        body = f"{literal}*{monomial}" if monomial else literal
        if i == 0:
            out.append(f"-{body}" if negative else body)
        else:
            out.append(f"{'-' if negative else '+'} {body}")
    return " ".join(out)


@dataclass(frozen=True)
class SystemSource:
    """Raw DSL text, optionally remembering where it was read from."""

    text: str
    origin: str = "<inline>"

    @classmethod
    def from_path(cls, path) -> "SystemSource":
        p = Path(path)
        return cls(p.read_text(), str(p))


def lorenz_source(x0=LORENZ_INITIAL[0], y0=LORENZ_INITIAL[1], z0=LORENZ_INITIAL[2]):
    """DSL text of the Lorenz system equivalent to :func:`builtin_lorenz`."""
    return SystemSource(
        "system lorenz\n"
        "param sigma = 10\n"
        "param R = 28\n"
        "param b = 8/3\n"
        f"var x = {x0}\n"
        f"var y = {y0}\n"
        f"var z = {z0}\n"
        "eq x' = sigma*y - sigma*x\n"
        "eq y' = R*x - y - x*z\n"
        "eq z' = x*y - b*z\n",
        "<lorenz>",
    )


def builtin_lorenz(
    ctx: PrecisionContext,
    x0: str = LORENZ_INITIAL[0],
    y0: str = LORENZ_INITIAL[1],
    z0: str = LORENZ_INITIAL[2],
) -> QuadraticSystem:
    """Lorenz system with sigma=10, R=28, b=8/3 at precision ``ctx``."""
    zero = ctx.zero()
    sigma, R, one = ctx.make(10), ctx.make(28), ctx.one()
    b = BigReal(_rational(8, 3, ctx), ctx)
    linear = (
        (-sigma, sigma, zero),
        (R, -one, zero),
        (zero, zero, -b),
    )
    bilinear = (
        BilinearTerm(1, 0, 2, -one),
        BilinearTerm(2, 0, 1, one),
    )
    state = tuple(parse_decimal(s, ctx) for s in (x0, y0, z0))
    return QuadraticSystem(("x", "y", "z"), (zero,) * 3, linear, bilinear, state, ctx, "lorenz")


def lorenz_equilibria(ctx: PrecisionContext) -> list[tuple[BigReal, BigReal, BigReal]]:
    """The two nontrivial Lorenz fixed points ``(+-sqrt(72), +-sqrt(72), 27)``.

    With b=8/3 and R=28, ``b*(R-1) = 72`` exactly, so the coordinates are
    correctly rounded square roots.
    """
    s = ctx.make(72).sqrt()
    z = ctx.make(27)
    return [(s, s, z), (-s, -s, z)]


def _rational(p: int, q: int, ctx: PrecisionContext) -> mpfr:
    if q == 0:
        raise ParseError(f"zero denominator in {p}/{q}")
    with ctx.working():
        return mpfr(mpq(p, q), ctx.binary_digits)


# -- parsing ----------------------------------------------------------------


def _tokenize(expr: str, line: int):
    pos, out = 0, []
    expr = expr.rstrip()
    while pos < len(expr):
        m = _TOKEN_RE.match(expr, pos)
        if m is None or m.end() == pos:
            raise ParseError(f"unexpected character {expr[pos:].strip()[:1]!r}", line)
        kind = m.lastgroup
        out.append((kind, m.group(kind)))
        pos = m.end()
    return out


def _parse_param_value(text: str, ctx, line) -> mpfr:
    m = _RATIONAL_RE.match(text)
    if m:
        return _rational(int(m.group(1)), int(m.group(2)), ctx)
    try:
        return parse_decimal(text, ctx).value
    except ParseError:
        raise ParseError(f"bad parameter value {text!r}", line) from None


def _parse_rhs(expr, line, params, var_index, ctx):
    """Monomial -> summed coefficient, in first-appearance order."""
    tokens = _tokenize(expr, line)
    if not tokens:
        raise ParseError("empty right-hand side", line)
    terms: dict[tuple[int, ...], mpfr] = {}
    pos = 0
    sign = 1
    if tokens[0] == ("op", "-") or tokens[0] == ("op", "+"):
        sign = -1 if tokens[0][1] == "-" else 1
        pos = 1
    while True:
        coeff = None
        monomial: list[int] = []
        expect_factor = True
        while pos < len(tokens):
            kind, text = tokens[pos]
            if expect_factor:
                if kind == "num":
                    value = parse_decimal(text, ctx).value
                elif kind == "id" and text in params:
                    value = params[text]
                elif kind == "id" and text in var_index:
                    monomial.append(var_index[text])
                    value = None
                elif kind == "id":
                    raise ParseError(f"unknown identifier {text!r}", line)
                else:
                    raise ParseError(f"expected a factor, got {text!r}", line)
                if value is not None:
                    if coeff is not None:
                        raise ParseError("at most one number or parameter per term", line)
                    coeff = value
                expect_factor = False
                pos += 1
            elif (kind, text) == ("op", "*"):
                expect_factor = True
                pos += 1
            else:
                break
        if expect_factor:
            raise ParseError("dangling operator", line)
        if len(monomial) > 2:
            raise ParseError(f"term of degree {len(monomial)} exceeds 2", line)
        key = tuple(sorted(monomial))
        with ctx.working():
            value = mpfr(1, ctx.binary_digits) if coeff is None else coeff
            value = value if sign > 0 else -value
            terms[key] = terms[key] + value if key in terms else value
        if pos == len(tokens):
            return terms
        kind, text = tokens[pos]
        if kind != "op" or text not in "+-":
            raise ParseError(f"expected '+' or '-', got {text!r}", line)
        sign = -1 if text == "-" else 1
        pos += 1
        if pos == len(tokens):
            raise ParseError("dangling operator", line)


def parse_system(src: SystemSource | str, ctx: PrecisionContext) -> QuadraticSystem:
    """Parse DSL text into a normalized :class:`QuadraticSystem` at ``ctx``."""
    text = src.text if isinstance(src, SystemSource) else src
    title = "system"
    params: dict[str, mpfr] = {}
    var_names: list[str] = []
    var_values: list[BigReal] = []
    equations: dict[str, tuple[int, str]] = {}
    declared: set[str] = set()

    def declare(name, lineno):
        if not _IDENT_RE.match(name):
            raise ParseError(f"invalid identifier {name!r}", lineno)
        if name in declared:
            raise ParseError(f"duplicate declaration of {name!r}", lineno)
        declared.add(name)

    for lineno, rawline in enumerate(text.splitlines(), start=1):
        line = rawline.split("#", 1)[0].strip()
        if not line:
            continue
        keyword, _, rest = line.partition(" ")
        rest = rest.strip()
        if keyword == "system":
            if not _IDENT_RE.match(rest):
                raise ParseError(f"invalid system name {rest!r}", lineno)
            title = rest
        elif keyword in ("param", "var"):
            name, eq, value = (s.strip() for s in rest.partition("="))
            if not eq:
                raise ParseError(f"expected '{keyword} <name> = <value>'", lineno)
            declare(name, lineno)
            if keyword == "param":
                params[name] = _parse_param_value(value, ctx, lineno)
            else:
                try:
                    var_values.append(parse_decimal(value, ctx))
                except ParseError:
                    raise ParseError(f"bad initial value {value!r}", lineno) from None
                var_names.append(name)
        elif keyword == "eq":
            lhs, eq, rhs = (s.strip() for s in rest.partition("="))
            if not eq or not lhs.endswith("'"):
                raise ParseError("expected \"eq <name>' = <terms>\"", lineno)
            name = lhs[:-1].strip()
            if name in equations:
                raise ParseError(f"duplicate equation for {name!r}", lineno)
            equations[name] = (lineno, rhs)
        else:
            raise ParseError(f"unknown statement {keyword!r}", lineno)

    if not var_names:
        raise ParseError("no variables declared")
    var_index = {n: i for i, n in enumerate(var_names)}
    for name, (lineno, _) in equations.items():
        if name not in var_index:
            raise ParseError(f"unknown identifier {name!r}", lineno)
    missing = [n for n in var_names if n not in equations]
    if missing:
        raise ParseError(f"missing equation for {', '.join(missing)}")

    d = len(var_names)
    zero = mpfr(0, ctx.binary_digits)
    constant = [zero] * d
    linear = [[zero] * d for _ in range(d)]
    bilinear = []
    for k, name in enumerate(var_names):
        lineno, rhs = equations[name]
        for key, coeff in _parse_rhs(rhs, lineno, params, var_index, ctx).items():
            if gmpy2.is_zero(coeff):
                continue
            if len(key) == 0:
                constant[k] = coeff
            elif len(key) == 1:
                linear[k][key[0]] = coeff
            else:
                bilinear.append((k, key[0], key[1], coeff))
    bilinear.sort(key=lambda e: e[:3])

    def wrap(v):
        return BigReal(v, ctx)

    return QuadraticSystem(
        names=tuple(var_names),
        constant=tuple(map(wrap, constant)),
        linear=tuple(tuple(map(wrap, row)) for row in linear),
        bilinear=tuple(BilinearTerm(k, l, m, wrap(c)) for k, l, m, c in bilinear),
        initial_state=tuple(var_values),
        context=ctx,
        title=title,
    )


def resolve_system(spec, ctx: PrecisionContext) -> QuadraticSystem:
    """Build a system from ``"lorenz"``, a DSL file path or a :class:`SystemSource`."""
    if isinstance(spec, QuadraticSystem):
        if spec.context != ctx:
            raise PrecisionMismatch("system was built at a different precision")
        return spec
    if isinstance(spec, SystemSource):
        return parse_system(spec, ctx)
    if spec == "lorenz":
        return builtin_lorenz(ctx)
    path = Path(spec)
    if not path.is_file():
        raise ConfigurationError(f"system file not found: {spec}")
    return parse_system(SystemSource.from_path(path), ctx)


def evaluate_rhs(sys: QuadraticSystem, state: Sequence[BigReal]) -> list[BigReal]:
    """``c + A*state + sum_e coeff_e * s_l * s_m`` for each equation."""
    ctx = sys.context
    if len(state) != sys.dim:
        raise ConfigurationError(f"state has {len(state)} components, system has {sys.dim}")
    if any(s.context != ctx for s in state):
        raise PrecisionMismatch("state and system contexts differ")
    s = [v.value for v in state]
    out = []
    with ctx.working():
        products = [c * (s[l] * s[m]) for _, l, m, c in sys.bilinear_raw]
        for k in range(sys.dim):
            acc = sys.constant_raw[k]
            for l, a in sys.linear_rows[k]:
                acc = acc + a * s[l]
            for idx in sys.couplings[k]:
                acc = acc + products[idx]
            out.append(BigReal(acc, ctx))
    return out
