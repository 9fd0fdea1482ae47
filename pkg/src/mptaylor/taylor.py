"""Fixed-step N-th order Taylor series integration for quadratic systems.

Taylor coefficients (normalized derivatives) are generated order by order
from the recurrence

    c_k[i+1] = ( c_k*[i==0] + sum_l A_kl c_l[i] + sum_e coeff_e conv_e[i] ) / (i+1),

where ``conv_e[i] = sum_j c_l[i-j] c_m[j]`` is the Leibniz convolution for
bilinear entry ``e = (k, l, m)``.  The convolutions are delegated to a
reducer (``mptaylor.reduce``) so the serial and parallel paths share every
other line.  The new state is the series evaluated by Horner's rule.
"""

from __future__ import annotations

from dataclasses import dataclass
from decimal import Decimal, InvalidOperation
from fractions import Fraction
from typing import Callable, Optional, Sequence

from gmpy2 import mpfr

from . import kernels
from .errors import ConfigurationError, NumericFailure, PrecisionMismatch
from .kernels import MulCounter
from .precision import GMPY_FAILURES, BigReal, PrecisionContext, make_context, parse_decimal, raw
from .system import QuadraticSystem

__all__ = [
    "IntegratorConfig",
    "TaylorCoefficients",
    "TrajectorySample",
    "MulCounter",
    "next_coefficient",
    "convolve_range",
    "horner_eval",
    "compute_coefficients",
    "taylor_step",
    "integrate",
]


def _decimal(text, what) -> Decimal:
    try:
        value = Decimal(str(text).strip())
    except InvalidOperation:
        raise ConfigurationError(f"{what} {text!r} is not a decimal number") from None
    if not value.is_finite():
        raise ConfigurationError(f"{what} must be finite")
    return value


@dataclass(frozen=True)
class IntegratorConfig:
    """Order N, precision K, step tau, horizon T and sample stride M.

    ``step`` and ``horizon`` are decimal strings so that sample times
    ``n * tau`` are exact.
    """

    order: int
    decimal_digits: int
    step: str = "0.01"
    horizon: str = "10"
    sample_stride: int = 100

    def __post_init__(self):
        for name in ("order", "decimal_digits", "sample_stride"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int):
                raise ConfigurationError(f"{name} must be an integer, got {v!r}")
        if self.order < 1:
            raise ConfigurationError(f"order N={self.order} must be >= 1")
        if self.sample_stride < 1:
            raise ConfigurationError("sample_stride must be >= 1")
        make_context(self.decimal_digits)
        object.__setattr__(self, "step", str(self.step).strip())
        object.__setattr__(self, "horizon", str(self.horizon).strip())
        tau, T = self.tau, self.T
        if tau <= 0:
            raise ConfigurationError(f"step {self.step} must be positive")
        if T <= 0:
            raise ConfigurationError(f"horizon {self.horizon} must be positive")
        if self.n_steps < 1:
            raise ConfigurationError(f"horizon {self.horizon} shorter than half a step")

    @property
    def tau(self) -> Decimal:
        return _decimal(self.step, "step")

    @property
    def T(self) -> Decimal:
        return _decimal(self.horizon, "horizon")

    @property
    def n_steps(self) -> int:
        return round(Fraction(self.T) / Fraction(self.tau))

    @property
    def context(self) -> PrecisionContext:
        return make_context(self.decimal_digits)

    def time_at(self, n: int) -> Decimal:
        return self.tau * n

    def replace(self, **changes) -> "IntegratorConfig":
        fields = dict(
            order=self.order,
            decimal_digits=self.decimal_digits,
            step=self.step,
            horizon=self.horizon,
            sample_stride=self.sample_stride,
        )
        fields.update(changes)
        return IntegratorConfig(**fields)


class TaylorCoefficients:
    """Coefficient table: ``coeffs[k][i]`` is the i-th normalized derivative of x_k.

    Entries are raw mpfr values at the table's context; :meth:`get` wraps one
    as a :class:`BigReal`.  The table is reused across steps by the integrator.
    """

    def __init__(self, dim: int, order: int, context: PrecisionContext):
        self.order = order
        self.context = context
        zero = mpfr(0, context.binary_digits)
        self.coeffs = [[zero] * (order + 1) for _ in range(dim)]

    @classmethod
    def from_state(cls, state: Sequence[BigReal], order: int):
        ctx = state[0].context
        tc = cls(len(state), order, ctx)
        tc.load_state([raw(s) for s in state])
        return tc

    @property
    def dim(self) -> int:
        return len(self.coeffs)

    def load_state(self, state_raw):
        for k, v in enumerate(state_raw):
            self.coeffs[k][0] = v

    def get(self, k: int, i: int) -> BigReal:
        return BigReal(self.coeffs[k][i], self.context)

    def column(self, i: int) -> list[BigReal]:
        """All variables' coefficients of order ``i``."""
        return [self.get(k, i) for k in range(self.dim)]

    def copy(self) -> "TaylorCoefficients":
        out = TaylorCoefficients(self.dim, self.order, self.context)
        out.coeffs = [list(row) for row in self.coeffs]
        return out


@dataclass(frozen=True)
class TrajectorySample:
    step_index: int
    time: Decimal
    state: tuple[BigReal, ...]


def convolve_range(a, b, i: int, lo: int, hi: int, counter: MulCounter | None = None) -> BigReal:
    """Leibniz partial sum ``sum_{j=lo}^{hi-1} a[i-j] * b[j]`` in ascending j.

    ``a`` and ``b`` are sequences of :class:`BigReal` sharing one context.
    """
    ctx = _common_context(list(a[: i + 1]) + list(b[: i + 1]))
    with ctx.working():
        out = kernels.convolve_range([raw(x) for x in a], [raw(x) for x in b], i, lo, hi, counter)
        out = mpfr(out)
    return BigReal(out, ctx)


def horner_eval(c: Sequence[BigReal], N: int, tau: BigReal, counter=None) -> BigReal:
    """Series value ``c[0] + tau*(c[1] + ... + tau*c[N])``."""
    ctx = _common_context([*c[: N + 1], tau])
    with ctx.working():
        out = kernels.horner([raw(x) for x in c], N, raw(tau), counter)
    return BigReal(out, ctx)


def _common_context(values) -> PrecisionContext:
    ctxs = {v.context for v in values if isinstance(v, BigReal)}
    if len(ctxs) != 1:
        raise PrecisionMismatch(f"expected one shared precision context, got {len(ctxs)}")
    return ctxs.pop()


def next_coefficient(sys: QuadraticSystem, tc: TaylorCoefficients, i: int, conv, counter=None) -> list[BigReal]:
    """Order ``i+1`` coefficients given the convolution totals ``conv``.

    ``conv[e]`` must hold ``sum_j c_l[i-j] c_m[j]`` for bilinear entry ``e``.
    """
    if not 0 <= i < tc.order:
        raise IndexError(f"order index {i} outside [0, {tc.order})")
    if tc.context != sys.context:
        raise PrecisionMismatch("coefficient table and system contexts differ")
    if len(conv) != len(sys.bilinear):
        raise ConfigurationError(f"expected {len(sys.bilinear)} convolutions, got {len(conv)}")
    for v in conv:
        if isinstance(v, BigReal) and v.context != sys.context:
            raise PrecisionMismatch("convolution value from another context")
    ctx = sys.context
    with ctx.working():
        lin = [kernels.linear_row(sys, tc.coeffs, i, k, counter) for k in range(sys.dim)]
        out = kernels.combine_order(sys, i, lin, [raw(v) for v in conv], counter)
    return [BigReal(v, ctx) for v in out]


def compute_coefficients(sys: QuadraticSystem, tc: TaylorCoefficients, reducer, counter=None):
    """Fill orders 1..N of ``tc`` (order 0 must already hold the state)."""
    with sys.context.working():
        for i in range(tc.order):
            lin, conv = reducer.order_terms(sys, tc, i, counter)
            for k, v in enumerate(kernels.combine_order(sys, i, lin, conv, counter)):
                tc.coeffs[k][i + 1] = v


def _default_reducer():
    from .reduce import SerialReducer

    return SerialReducer()


def _check(sys: QuadraticSystem, cfg: IntegratorConfig):
    if cfg.decimal_digits != sys.context.decimal_digits:
        raise ConfigurationError(
            f"config asks for K={cfg.decimal_digits} but the system was built at {sys.context}"
        )


def taylor_step(
    sys: QuadraticSystem,
    state: Sequence[BigReal],
    cfg: IntegratorConfig,
    reducer=None,
    *,
    tc: Optional[TaylorCoefficients] = None,
    counter: Optional[MulCounter] = None,
    step_index: int | None = None,
) -> tuple[tuple[BigReal, ...], TaylorCoefficients]:
    """Advance ``state`` by one step of size ``cfg.step``.

    Returns the new state and the coefficient table expanded at the old one.
    A table passed as ``tc`` is overwritten in place.
    """
    _check(sys, cfg)
    ctx = sys.context
    if len(state) != sys.dim:
        raise ConfigurationError(f"state has {len(state)} components, system has {sys.dim}")
    if any(s.context != ctx for s in state):
        raise PrecisionMismatch("state and system contexts differ")
    reducer = reducer or _default_reducer()
    if tc is None:
        tc = TaylorCoefficients(sys.dim, cfg.order, ctx)
    tau = parse_decimal(cfg.step, ctx).value
    new_raw = _step_raw(sys, [s.value for s in state], tc, tau, reducer, counter, step_index)
    return tuple(BigReal(v, ctx) for v in new_raw), tc


def _step_raw(sys, state_raw, tc, tau, reducer, counter, step_index):
    try:
        with sys.context.working():
            reducer.bind(sys, tc.order)
            reducer.begin_step(sys, state_raw)
            tc.load_state(state_raw)
            compute_coefficients(sys, tc, reducer, counter)
            return reducer.horner(sys, tc, tau, counter)
    except GMPY_FAILURES as exc:
        reducer.abort()
        raise NumericFailure(f"{type(exc).__name__}: {exc}", step_index) from exc
    except NumericFailure as exc:
        reducer.abort()
        if exc.step_index is None and step_index is not None:
            raise NumericFailure(str(exc), step_index) from exc
        raise
    except BaseException:
        reducer.abort()
        raise


def integrate(
    sys: QuadraticSystem,
    cfg: IntegratorConfig,
    reducer=None,
    sink: Callable[[TrajectorySample], None] | None = None,
    *,
    start: tuple[int, Sequence[BigReal]] | None = None,
    until: Callable[[TrajectorySample], bool] | None = None,
    counter: MulCounter | None = None,
) -> TrajectorySample:
    """Run ``round(T/tau)`` steps, emitting samples every ``sample_stride`` steps.

    The initial state is emitted as step 0 unless resuming via
    ``start=(step_index, state)``, in which case emission starts after it.
    The final step is always emitted.  If ``until`` returns true for an
    emitted sample the run stops there.  Returns the last emitted sample.
    """
    _check(sys, cfg)
    ctx = sys.context
    reducer = reducer or _default_reducer()
    n0, state = start if start is not None else (0, sys.initial_state)
    n_steps = cfg.n_steps
    if not 0 <= n0 <= n_steps:
        raise ConfigurationError(f"resume step {n0} outside [0, {n_steps}]")
    state = tuple(state)
    if any(s.context != ctx for s in state):
        raise PrecisionMismatch("start state and system contexts differ")
    stride = cfg.sample_stride
    tau = parse_decimal(cfg.step, ctx).value
    tc = TaylorCoefficients(sys.dim, cfg.order, ctx)

    last = TrajectorySample(n0, cfg.time_at(n0), state)
    if start is None:
        if sink is not None:
            sink(last)
        if until is not None and until(last):
            return last
    s = [v.value for v in state]
    for n in range(n0 + 1, n_steps + 1):
        s = _step_raw(sys, s, tc, tau, reducer, counter, n)
        if n % stride == 0 or n == n_steps:
            last = TrajectorySample(n, cfg.time_at(n), tuple(BigReal(v, ctx) for v in s))
            if sink is not None:
                sink(last)
            if until is not None and until(last):
                break
    return last
