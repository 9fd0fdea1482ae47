from dataclasses import replace
from fractions import Fraction

import pytest
from hypothesis import given, settings, strategies as st

from mptaylor.errors import ConfigurationError, ParseError, PrecisionMismatch
from mptaylor.precision import BigReal, make_context, parse_decimal
from mptaylor.system import (
    BilinearTerm,
    QuadraticSystem,
    SystemSource,
    builtin_lorenz,
    evaluate_rhs,
    lorenz_equilibria,
    lorenz_source,
    parse_system,
    resolve_system,
)

CTX = make_context(40)


def _q(x: BigReal) -> Fraction:
    return Fraction(*x.value.as_integer_ratio())


def _state(*vals, ctx=CTX):
    return tuple(ctx.make(str(v)) for v in vals)


def test_builtin_lorenz_shape():
    sys = builtin_lorenz(CTX, "-15.8", "-17.48", "35.64")
    assert sys.dim == 3 and sys.names == ("x", "y", "z")
    assert [_q(a) for a in sys.linear[0]] == [-10, 10, 0]
    assert [_q(a) for a in sys.linear[1]] == [28, -1, 0]
    assert all(c.is_zero() for c in sys.constant)
    assert [(e.k, e.l, e.m, _q(e.coeff)) for e in sys.bilinear] == [(1, 0, 2, -1), (2, 0, 1, 1)]
    b = -sys.linear[2][2]
    assert b == CTX.make(8) / 3  # one correctly rounded division
    assert sys.initial_state == tuple(parse_decimal(s, CTX) for s in ("-15.8", "-17.48", "35.64"))


def test_builtin_lorenz_bad_initial_condition():
    with pytest.raises(ParseError):
        builtin_lorenz(CTX, "x", "1", "2")


def test_dsl_matches_builtin_exactly():
    parsed = parse_system(lorenz_source(), CTX)
    assert parsed == builtin_lorenz(CTX)
    assert parsed.fingerprint() == builtin_lorenz(CTX).fingerprint()


def test_commutative_monomials_merge():
    sys = parse_system("var x = 1\nvar y = 2\neq x' = x*y + y*x\neq y' = 0\n", CTX)
    assert len(sys.bilinear) == 1
    e = sys.bilinear[0]
    assert (e.k, e.l, e.m, _q(e.coeff)) == (0, 0, 1, 2)


def test_repeated_linear_terms_summed_and_cancelled():
    sys = parse_system("var x = 1\neq x' = 3*x - 1.5*x + 2 - 2\n", CTX)
    assert _q(sys.linear[0][0]) == Fraction(3, 2)
    assert sys.constant[0].is_zero()
    sys = parse_system("var x = 1\neq x' = x - x\n", CTX)
    assert sys.linear[0][0].is_zero()


@pytest.mark.parametrize(
    "text, fragment",
    [
        ("var x = 1\nvar y = 1\nvar z = 1\neq x' = x*y*z\neq y' = 0\neq z' = 0\n", "degree"),
        ("var x = 1\neq x' = q*x\n", "unknown identifier"),
        ("var x = 1\neq w' = x\neq x' = x\n", "unknown identifier"),
        ("var x = 1\nvar x = 2\neq x' = x\n", "duplicate"),
        ("param a = 1\nvar a = 2\neq a' = a\n", "duplicate"),
        ("var x = 1\nvar y = 1\neq x' = y\n", "missing equation"),
        ("var x = 1\neq x' = x +\n", "dangling"),
        ("var x = 1\neq x' = 2*3*x\n", "at most one"),
        ("param b = 8/0\nvar x = 1\neq x' = b*x\n", "zero denominator"),
        ("var x = 1/2\neq x' = x\n", "bad initial value"),
        ("var x = 1\neq x' = (x)\n", "unexpected character"),
        ("var x = 1\nfoo x\neq x' = x\n", "unknown statement"),
        ("var x = 1\neq x' = x\neq x' = x\n", "duplicate equation"),
    ],
)
def test_parse_errors(text, fragment):
    with pytest.raises(ParseError, match=fragment):
        parse_system(text, CTX)


def test_parse_error_reports_line():
    with pytest.raises(ParseError) as info:
        parse_system("# comment\nvar x = 1\n\neq x' = x*x*x\n", CTX)
    assert info.value.line == 4


def test_params_and_comments():
    text = "system demo # name\nparam k = -1/4\nparam c = 2.5e-1\nvar u = 3 # start\neq u' = c + k*u*u\n"
    sys = parse_system(SystemSource(text), CTX)
    assert sys.title == "demo"
    assert _q(sys.constant[0]) == Fraction(1, 4)
    assert _q(sys.bilinear[0].coeff) == Fraction(-1, 4)


def test_leading_sign_and_constant_only_terms():
    sys = parse_system("var x = 1\nvar y = 0\neq x' = -y\neq y' = +x - 7\n", CTX)
    assert _q(sys.linear[0][1]) == -1
    assert _q(sys.linear[1][0]) == 1
    assert _q(sys.constant[1]) == -7


def test_to_dsl_round_trip():
    for sys in (builtin_lorenz(CTX), builtin_lorenz(make_context(120), "0.1", "-3", "1e-5")):
        again = parse_system(sys.to_dsl(), sys.context)
        assert again == sys


def test_system_validation():
    one, zero = CTX.one(), CTX.zero()
    with pytest.raises(ConfigurationError):
        QuadraticSystem(("x",), (zero,), ((zero,),), (BilinearTerm(0, 0, 1, one),), (one,), CTX)
    with pytest.raises(ConfigurationError):
        QuadraticSystem(("x", "x"), (zero,) * 2, ((zero,) * 2,) * 2, (), (one, one), CTX)
    other = make_context(41).one()
    with pytest.raises(PrecisionMismatch):
        QuadraticSystem(("x",), (zero,), ((other,),), (), (one,), CTX)


def test_resolve_system(tmp_path):
    path = tmp_path / "l.sys"
    path.write_text(lorenz_source().text)
    assert resolve_system(str(path), CTX) == builtin_lorenz(CTX)
    assert resolve_system("lorenz", CTX) == builtin_lorenz(CTX)
    with pytest.raises(ConfigurationError):
        resolve_system(str(tmp_path / "nope"), CTX)
    with pytest.raises(PrecisionMismatch):
        resolve_system(builtin_lorenz(make_context(20)), CTX)


def test_rhs_examples():
    sys = builtin_lorenz(CTX)
    out = evaluate_rhs(sys, _state(1, 2, 3))
    assert [_q(v) for v in out[:2]] == [10, 23]
    assert abs(_q(out[2]) + 6) < Fraction(1, 10**38)
    assert all(v.is_zero() for v in evaluate_rhs(sys, _state(0, 0, 0)))


@pytest.mark.parametrize("K", [20, 40, 100])
def test_rhs_vanishes_at_equilibria(K):
    ctx = make_context(K)
    sys = builtin_lorenz(ctx)
    for eq in lorenz_equilibria(ctx):
        for v in evaluate_rhs(sys, eq):
            # components are O(100) before cancellation
            assert abs(_q(v)) < Fraction(100, 10 ** (K - 2))


def test_rhs_errors():
    sys = builtin_lorenz(CTX)
    with pytest.raises(ConfigurationError):
        evaluate_rhs(sys, _state(1, 2))
    with pytest.raises(PrecisionMismatch):
        evaluate_rhs(sys, _state(1, 2, 3, ctx=make_context(41)))


_small = st.fractions(min_value=-50, max_value=50, max_denominator=64)


@settings(max_examples=60, deadline=None)
@given(st.tuples(_small, _small, _small))
def test_bilinear_block_is_linear_in_coefficients(xyz):
    base = builtin_lorenz(CTX)
    zero = CTX.zero()
    bare = replace(base, linear=((zero,) * 3,) * 3)
    doubled = replace(bare, bilinear=tuple(e._replace(coeff=e.coeff * 2) for e in bare.bilinear))
    state = tuple(CTX.make(q.numerator) / q.denominator for q in xyz)
    for a, b in zip(evaluate_rhs(bare, state), evaluate_rhs(doubled, state)):
        assert b == a * 2


_monomials = ["", "u", "v", "u*v", "v*u", "u*u", "v*v"]
_terms = st.lists(
    st.tuples(st.sampled_from("+-"), st.decimals(0, 99, places=3), st.sampled_from(_monomials)),
    min_size=1, max_size=6,
)


def _rhs(terms):
    out = []
    for sign, coeff, mono in terms:
        body = f"{coeff}*{mono}" if mono else f"{coeff}"
        out.append(f"{sign} {body}")
    return " ".join(out)


@settings(max_examples=60, deadline=None)
@given(_terms, _terms, st.integers(8, 60))
def test_dsl_normalization_idempotent(eq_u, eq_v, K):
    text = f"param a = 1/3\nvar u = 0.5\nvar v = -2\neq u' = {_rhs(eq_u)} + a*u\neq v' = {_rhs(eq_v)}\n"
    ctx = make_context(K)
    first = parse_system(text, ctx)
    second = parse_system(first.to_dsl(), ctx)
    assert second == first
    assert second.to_dsl() == first.to_dsl()
    assert all(e.l <= e.m for e in first.bilinear)
