"""Arbitrary-precision reals on top of MPFR (via gmpy2).

Two layers live here. :class:`BigReal` is the public value type: an immutable
MPFR number bound to the :class:`PrecisionContext` it was created under, with
context checking on every operation. The integration kernels skip that
wrapper and work on bare ``gmpy2.mpfr`` values ("raw" values) inside
``with ctx.working():`` blocks, which is where the time goes.
"""

from __future__ import annotations

import functools
import operator
import re
from dataclasses import dataclass
from fractions import Fraction

import gmpy2
from gmpy2 import mpfr

from .errors import ConfigurationError, NumericFailure, ParseError, PrecisionMismatch

__all__ = [
    "PrecisionContext",
    "BigReal",
    "make_context",
    "parse_decimal",
    "format_decimal",
    "raw",
    "GMPY_FAILURES",
    "MIN_DECIMAL_DIGITS",
]

MIN_DECIMAL_DIGITS = 8

#: gmpy2 exceptions raised by the trapping working context.
GMPY_FAILURES = (
    gmpy2.InvalidOperationError,
    gmpy2.OverflowResultError,
    gmpy2.DivisionByZeroError,
)

_DECIMAL_RE = re.compile(r"[+-]?[0-9]+(?:\.[0-9]+)?(?:[eE][+-]?[0-9]+)?\Z")


def _bits_for_digits(k):
    # smallest b with 2**b >= 10**k, i.e. ceil(k * log2(10)) in exact integers
    return (10**k - 1).bit_length()


@dataclass(frozen=True)
class PrecisionContext:
    """Working precision: ``decimal_digits`` K mapped to an MPFR mantissa width.

    Rounding is always round-to-nearest, ties to even.
    """

    decimal_digits: int
    binary_digits: int
    rounding: str = "nearest-even"

    def __post_init__(self):
        if self.binary_digits < 24:
            raise ConfigurationError(f"binary precision {self.binary_digits} < 24")
        if self.binary_digits != _bits_for_digits(self.decimal_digits):
            raise ConfigurationError(
                f"binary_digits={self.binary_digits} does not match "
                f"K={self.decimal_digits} decimal digits"
            )
        if self.rounding != "nearest-even":
            raise ConfigurationError("only round-to-nearest-even is supported")

    def working(self, release_gil=False):
        """Fresh trapping gmpy2 context for use in a ``with`` block.

        Overflow, invalid operations (NaN) and division by zero raise instead
        of producing non-finite values.
        """
        return gmpy2.context(
            precision=self.binary_digits,
            round=gmpy2.RoundToNearest,
            trap_invalid=True,
            trap_overflow=True,
            trap_divzero=True,
            allow_release_gil=release_gil,
        )

    def raw(self, value) -> mpfr:
        """Round an int, string or mpfr to this precision as a raw value."""
        with self.working():
            return mpfr(value, self.binary_digits)

    def make(self, value) -> "BigReal":
        """``BigReal`` from a machine integer or raw value, rounded to this context."""
        if isinstance(value, str):
            return parse_decimal(value, self)
        return BigReal(self.raw(value), self)

    def zero(self) -> "BigReal":
        return BigReal(mpfr(0, self.binary_digits), self)

    def one(self) -> "BigReal":
        return BigReal(mpfr(1, self.binary_digits), self)

    def __str__(self):
        return f"K={self.decimal_digits} ({self.binary_digits} bits)"


@functools.lru_cache(maxsize=None)
def make_context(K: int) -> PrecisionContext:
    """Context holding ``K`` exact decimal digits: ``ceil(K*log2(10))`` bits."""
    if isinstance(K, bool) or not isinstance(K, int):
        raise ConfigurationError(f"decimal digits must be an integer, got {K!r}")
    if K < MIN_DECIMAL_DIGITS:
        raise ConfigurationError(
            f"decimal digits K={K} below the minimum of {MIN_DECIMAL_DIGITS}"
        )
    return PrecisionContext(K, _bits_for_digits(K))


def raw(x):
    """Underlying mpfr of a BigReal; mpfr values pass through."""
    return x._value if isinstance(x, BigReal) else x


class BigReal:
    """Immutable finite MPFR value tied to a :class:`PrecisionContext`.

    Arithmetic with another ``BigReal`` requires the identical context;
    machine integers are accepted as exact operands.
    """

    __slots__ = ("_value", "_context")

    def __init__(self, value: mpfr, context: PrecisionContext):
        if not isinstance(value, mpfr):
            raise TypeError(f"expected gmpy2.mpfr, got {type(value).__name__}")
        if not gmpy2.is_finite(value):
            raise NumericFailure(f"non-finite value {value}")
        object.__setattr__(self, "_value", value)
        object.__setattr__(self, "_context", context)

    def __setattr__(self, name, value):
        raise AttributeError("BigReal is immutable")

    def __reduce__(self):
        return (BigReal.from_hex, (self.to_hex(), self._context))

    @property
    def value(self) -> mpfr:
        return self._value

    @property
    def context(self) -> PrecisionContext:
        return self._context

    # -- arithmetic -------------------------------------------------------

    def _operand(self, other):
        if isinstance(other, BigReal):
            if other._context != self._context:
                raise PrecisionMismatch(
                    f"mixed-context arithmetic: {self._context} vs {other._context}"
                )
            return other._value
        if isinstance(other, int) and not isinstance(other, bool):
            return other
        return None

    def _apply(self, fn, *args):
        try:
            with self._context.working():
                out = fn(*args)
        except GMPY_FAILURES as exc:
            raise NumericFailure(f"{type(exc).__name__}: {exc}") from exc
        return BigReal(out, self._context)

    def _binary(self, other, fn, reflected=False):
        b = self._operand(other)
        if b is None:
            return NotImplemented
        a = self._value
        return self._apply(fn, b, a) if reflected else self._apply(fn, a, b)

    def __add__(self, other):
        return self._binary(other, gmpy2.add)

    def __radd__(self, other):
        return self._binary(other, gmpy2.add, reflected=True)

    def __sub__(self, other):
        return self._binary(other, gmpy2.sub)

    def __rsub__(self, other):
        return self._binary(other, gmpy2.sub, reflected=True)

    def __mul__(self, other):
        return self._binary(other, gmpy2.mul)

    def __rmul__(self, other):
        return self._binary(other, gmpy2.mul, reflected=True)

    def __truediv__(self, other):
        return self._binary(other, gmpy2.div)

    def __rtruediv__(self, other):
        return self._binary(other, gmpy2.div, reflected=True)

    def __neg__(self):
        return self._apply(operator.neg, self._value)

    def __pos__(self):
        return self

    def __abs__(self):
        return self._apply(abs, self._value)

    def sqrt(self) -> "BigReal":
        """Correctly rounded square root (used for equilibrium fixtures)."""
        return self._apply(gmpy2.sqrt, self._value)

    # -- comparison -------------------------------------------------------

    def __eq__(self, other):
        if isinstance(other, BigReal):
            return self._context == other._context and self._value == other._value
        if isinstance(other, int) and not isinstance(other, bool):
            return self._value == other
        return NotImplemented

    def __hash__(self):
        return hash((self._value, self._context))

    def _cmp_value(self, other):
        if isinstance(other, BigReal):
            return other._value
        if isinstance(other, int) and not isinstance(other, bool):
            return other
        return None

    def __lt__(self, other):
        o = self._cmp_value(other)
        return NotImplemented if o is None else self._value < o

    def __le__(self, other):
        o = self._cmp_value(other)
        return NotImplemented if o is None else self._value <= o

    def __gt__(self, other):
        o = self._cmp_value(other)
        return NotImplemented if o is None else self._value > o

    def __ge__(self, other):
        o = self._cmp_value(other)
        return NotImplemented if o is None else self._value >= o

    # -- conversion -------------------------------------------------------

    def is_zero(self) -> bool:
        return gmpy2.is_zero(self._value)

    def sign(self) -> int:
        return gmpy2.sign(self._value)

    def __float__(self):
        return float(self._value)

    def to_context(self, ctx: PrecisionContext) -> "BigReal":
        """Re-round into ``ctx``; exact whenever ``ctx`` is at least as wide."""
        if ctx == self._context:
            return self
        return BigReal(ctx.raw(self._value), ctx)

    def to_hex(self) -> str:
        """Lossless text encoding ``[-]0x<mantissa>p<exponent>``."""
        if gmpy2.is_zero(self._value):
            return "0x0p0"
        mant, exp = self._value.as_mantissa_exp()
        sign = "-" if mant < 0 else ""
        return f"{sign}0x{abs(int(mant)):x}p{int(exp)}"

    @classmethod
    def from_hex(cls, text: str, ctx: PrecisionContext) -> "BigReal":
        m = re.fullmatch(r"(-?)0x([0-9a-f]+)p(-?[0-9]+)", text.strip())
        if m is None:
            raise ParseError(f"malformed hexadecimal value {text!r}")
        mant = int(m.group(2), 16)
        if mant.bit_length() > ctx.binary_digits:
            raise ParseError(f"mantissa of {text!r} wider than {ctx}")
        with ctx.working():
            v = gmpy2.mul_2exp(mpfr(mant, ctx.binary_digits), int(m.group(3)))
            if m.group(1):
                v = -v
        return cls(v, ctx)

    def __repr__(self):
        digits = min(self._context.decimal_digits, 20)
        return f"BigReal('{format_decimal(self, digits)}', K={self._context.decimal_digits})"

    def __str__(self):
        return format_decimal(self, self._context.decimal_digits)


def parse_decimal(s: str, ctx: PrecisionContext) -> BigReal:
    """Nearest representable value to the decimal literal ``s`` under ``ctx``.

    Accepted syntax: ``[+|-]digits[.digits][(e|E)[+|-]digits]``.
    """
    if not isinstance(s, str):
        raise ParseError(f"expected a decimal string, got {type(s).__name__}")
    text = s.strip()
    if not _DECIMAL_RE.match(text):
        raise ParseError(f"malformed decimal literal {s!r}")
    with ctx.working():
        v = mpfr(text, ctx.binary_digits)
    if gmpy2.is_zero(v):
        v = mpfr(0, ctx.binary_digits)  # drop the sign of "-0"
    return BigReal(v, ctx)


def _one_digit(v: mpfr):
    # MPFR refuses a single output digit; round the exact binary value instead
    n, d = v.as_integer_ratio()
    q = Fraction(abs(n), d)
    e = len(str(q.numerator)) - len(str(q.denominator))
    if Fraction(10) ** e > q:
        e -= 1
    m = round(q / Fraction(10) ** e)  # half-even, like MPFR
    if m == 10:
        m, e = 1, e + 1
    return ("-" if n < 0 else ""), str(m), e


def format_decimal(x: BigReal, D: int) -> str:
    """``D`` significant digits, rounded to nearest, in canonical scientific form.

    >>> ctx = make_context(40)
    >>> format_decimal(parse_decimal("2", ctx) / parse_decimal("3", ctx), 10)
    '6.666666667e-01'
    >>> format_decimal(ctx.zero(), 5)
    '0.0000e+00'
    """
    ctx = x.context
    if isinstance(D, bool) or not isinstance(D, int) or D < 1:
        raise ConfigurationError(f"digit count must be a positive integer, got {D!r}")
    if D > ctx.decimal_digits:
        raise ConfigurationError(f"cannot format {D} digits from a {ctx} value")
    v = x.value
    if gmpy2.is_zero(v):
        mantissa, exp10, sign = "0" * D, 0, ""
    else:
        if D == 1:
            sign, mantissa, exp10 = _one_digit(v)
        else:
            with ctx.working():
                digits, e, _ = v.digits(10, D)
            sign = "-" if digits.startswith("-") else ""
            mantissa = digits.lstrip("-")
            exp10 = e - 1
    body = mantissa[0] + ("." + mantissa[1:] if D > 1 else "")
    return f"{sign}{body}e{exp10:+03d}"
