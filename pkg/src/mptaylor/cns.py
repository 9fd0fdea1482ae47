"""Clean Numerical Simulation workflow.

Decoupling time between two trajectories, agreement in significant digits,
proportional scaling laws ``t_c ~ slope * K`` and ``t_c ~ slope * N``, order
and precision requirements for a target horizon, and two-run verification.

The critical predictable time of a run is measured against a reference run
with higher order and/or precision.  Deviations are only checked at sample
points, so the resolution of ``t_c`` is the sampling interval.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from decimal import Decimal
from fractions import Fraction
from typing import Callable, Iterable, NamedTuple, Sequence

import gmpy2
from gmpy2 import mpfr

from .errors import ConfigurationError
from .precision import BigReal
from .system import resolve_system
from .taylor import IntegratorConfig, TrajectorySample, integrate

__all__ = [
    "Run",
    "TcEstimate",
    "ScalingLaw",
    "VerificationReport",
    "Requirements",
    "SweepResult",
    "DEFAULT_THRESHOLD",
    "decoupling_time",
    "matching_digits",
    "fit_slope",
    "estimate_requirements",
    "verify_pair",
    "run_samples",
    "tc_sweep",
]

DEFAULT_THRESHOLD = "0.1"


def _fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, Decimal)):
        return Fraction(x)
    if isinstance(x, float):
        return Fraction(str(x))
    return Fraction(str(x).strip())


@dataclass(frozen=True)
class Run:
    """Samples of one integration together with the settings that produced them."""

    samples: tuple[TrajectorySample, ...]
    config: IntegratorConfig
    label: str = ""

    @property
    def horizon(self) -> Decimal:
        return self.samples[-1].time


@dataclass(frozen=True)
class TcEstimate:
    t_c: Decimal
    threshold: Decimal
    decoupling_component: int | None
    step_index: int

    @property
    def decoupled(self) -> bool:
        return self.decoupling_component is not None


def _wider(a: BigReal, b: BigReal):
    ca, cb = a.context, b.context
    return ca if ca.binary_digits >= cb.binary_digits else cb


def _abs_diff(a: BigReal, b: BigReal) -> mpfr:
    with _wider(a, b).working():
        return abs(a.value - b.value)


def _threshold(threshold) -> mpfr:
    text = str(threshold.value if isinstance(threshold, BigReal) else threshold).strip()
    try:
        thr = Decimal(text)
    except ArithmeticError:
        raise ConfigurationError(f"bad threshold {threshold!r}") from None
    if not thr.is_finite() or thr <= 0:
        raise ConfigurationError(f"threshold must be positive, got {threshold}")
    return mpfr(text, 128)


def _check_aligned(sa: TrajectorySample, sb: TrajectorySample):
    if sa.step_index != sb.step_index or sa.time != sb.time:
        raise ConfigurationError(
            f"sample streams misaligned: step {sa.step_index} (t={sa.time}) "
            f"vs step {sb.step_index} (t={sb.time})"
        )
    if len(sa.state) != len(sb.state):
        raise ConfigurationError("sample streams have different dimensions")


def decoupling_time(samples_a: Sequence[TrajectorySample], samples_b: Sequence[TrajectorySample],
                    threshold=DEFAULT_THRESHOLD) -> TcEstimate:
    """First sample time at which some component differs by more than ``threshold``.

    Only the common prefix of the two streams is examined.  When several
    components exceed the threshold at that sample, the one with the largest
    deviation is reported.  If the streams never decouple, ``t_c`` is the
    last common sample time and the component is ``None``.
    """
    limit = _threshold(threshold)
    thr = Decimal(str(threshold.value if isinstance(threshold, BigReal) else threshold))
    if not samples_a or not samples_b:
        raise ConfigurationError("empty sample stream")
    last = None
    for sa, sb in zip(samples_a, samples_b):
        _check_aligned(sa, sb)
        worst, worst_k = None, None
        for k, (a, b) in enumerate(zip(sa.state, sb.state)):
            d = _abs_diff(a, b)
            if d > limit and (worst is None or d > worst):
                worst, worst_k = d, k
        if worst_k is not None:
            return TcEstimate(sa.time, thr, worst_k, sa.step_index)
        last = sa
    return TcEstimate(last.time, thr, None, last.step_index)


def matching_digits(a: BigReal, b: BigReal) -> int:
    """Significant decimal digits on which ``a`` and ``b`` agree.

    ``floor(-log10(|a-b| / max(|a|, |b|)))`` clamped to ``[0, K-1]`` for
    distinct values; exactly equal values score the full ``K`` (the smaller
    of the two precisions).
    """
    K = min(a.context.decimal_digits, b.context.decimal_digits)
    if a.value == b.value:
        return K
    if a.is_zero() or b.is_zero() or a.sign() != b.sign():
        return 0
    with _wider(a, b).working():
        rel = abs(a.value - b.value) / max(abs(a.value), abs(b.value))
        digits = int(gmpy2.floor(-gmpy2.log10(rel)))
    return max(0, min(digits, K - 1))


def fit_slope(points: Iterable[tuple]) -> Fraction:
    """Least-squares slope of ``t_c = slope * p`` through the origin, exactly."""
    pts = [(_fraction(p), _fraction(t)) for p, t in points]
    if len(pts) < 2:
        raise ConfigurationError(f"need at least 2 points to fit a slope, got {len(pts)}")
    if any(p <= 0 for p, _ in pts):
        raise ConfigurationError("sweep parameter values must be positive")
    return sum(p * t for p, t in pts) / sum(p * p for p, _ in pts)


@dataclass(frozen=True)
class ScalingLaw:
    """``t_c ~ slope * parameter`` fitted through the origin."""

    slope: Fraction
    points: tuple[tuple[Fraction, Fraction], ...]
    parameter: str = "K"

    def __post_init__(self):
        if len(self.points) < 2:
            raise ConfigurationError("a scaling law needs at least 2 points")
        if self.slope <= 0:
            raise ConfigurationError(f"non-positive slope {self.slope}")

    @classmethod
    def fit(cls, points, parameter="K") -> "ScalingLaw":
        pts = tuple((_fraction(p), _fraction(t)) for p, t in points)
        return cls(fit_slope(pts), pts, parameter)

    def predict(self, value) -> Fraction:
        return self.slope * _fraction(value)


class Requirements(NamedTuple):
    order: int
    decimal_digits: int


def estimate_requirements(T, k_slope, n_slope, reserve_k=0, reserve_n=0) -> Requirements:
    """Order N and precision K needed to reach ``T``, with percentage reserves.

    ``K = ceil(T/k_slope * (1 + reserve_k/100))`` and likewise for N.
    """
    T, ks, ns = _fraction(T), _fraction(k_slope), _fraction(n_slope)
    rk, rn = _fraction(reserve_k), _fraction(reserve_n)
    if ks <= 0 or ns <= 0:
        raise ConfigurationError("scaling-law slopes must be positive")
    if T <= 0:
        raise ConfigurationError("target horizon must be positive")
    if rk < 0 or rn < 0:
        raise ConfigurationError("reserves must be non-negative")
    K = math.ceil(T / ks * (1 + rk / 100))
    N = math.ceil(T / ns * (1 + rn / 100))
    return Requirements(N, K)


@dataclass(frozen=True)
class VerificationReport:
    """Per-sample, per-variable matching digits between two runs."""

    step_indices: tuple[int, ...]
    times: tuple[Decimal, ...]
    digits: tuple[tuple[int, ...], ...]
    config_a: IntegratorConfig
    config_b: IntegratorConfig

    @property
    def per_sample_minimum(self) -> tuple[int, ...]:
        return tuple(min(row) for row in self.digits)

    @property
    def minimum(self) -> int:
        """Headline figure: worst agreement anywhere on the horizon."""
        return min(self.per_sample_minimum)

    def at_time(self, t) -> tuple[int, ...]:
        t = Decimal(str(t))
        for time, row in zip(self.times, self.digits):
            if time == t:
                return row
        raise KeyError(f"no sample at t={t}")


def verify_pair(run_a: Run, run_b: Run) -> VerificationReport:
    """Agreement of two runs on a shared sample grid."""
    if len(run_a.samples) != len(run_b.samples):
        raise ConfigurationError(
            f"runs have {len(run_a.samples)} and {len(run_b.samples)} samples; grids differ"
        )
    rows = []
    for sa, sb in zip(run_a.samples, run_b.samples):
        _check_aligned(sa, sb)
        rows.append(tuple(matching_digits(a, b) for a, b in zip(sa.state, sb.state)))
    return VerificationReport(
        tuple(s.step_index for s in run_a.samples),
        tuple(s.time for s in run_a.samples),
        tuple(rows),
        run_a.config,
        run_b.config,
    )


def run_samples(system_spec, cfg: IntegratorConfig, reducer=None, *, until=None, label="") -> Run:
    """Integrate ``system_spec`` (see :func:`resolve_system`) and keep every sample."""
    sys = resolve_system(system_spec, cfg.context)
    samples: list[TrajectorySample] = []
    integrate(sys, cfg, reducer, samples.append, until=until)
    return Run(tuple(samples), cfg, label or f"N={cfg.order},K={cfg.decimal_digits}")


@dataclass(frozen=True)
class SweepResult:
    parameter: str
    points: tuple[tuple[int, Decimal], ...]
    estimates: tuple[TcEstimate, ...]
    reference: IntegratorConfig
    law: ScalingLaw | None = field(default=None)

    @property
    def slope(self) -> Fraction | None:
        return None if self.law is None else self.law.slope


_PARAM_ALIASES = {"K": "K", "digits": "K", "k": "K", "N": "N", "order": "N", "n": "N"}


def _sweep_config(base: IntegratorConfig, parameter: str, value: int) -> IntegratorConfig:
    if parameter == "K":
        return base.replace(decimal_digits=value)
    return base.replace(order=value)


def tc_sweep(
    system_spec,
    base: IntegratorConfig,
    parameter: str,
    values: Sequence[int],
    reference: tuple[int, int],
    threshold=DEFAULT_THRESHOLD,
    reducer_factory: Callable[[], object] | None = None,
    reference_run: Run | None = None,
) -> SweepResult:
    """Measure ``t_c`` for each value of K (or N) against a dominating reference.

    ``reference`` is ``(N_ref, K_ref)``; the reference run covers
    ``base.horizon``.  Sweep runs stop as soon as they decouple.  A
    precomputed ``reference_run`` on the same grid may be supplied.  Only
    points that actually decoupled within the horizon enter the slope fit.
    """
    if parameter not in _PARAM_ALIASES:
        raise ConfigurationError(f"unknown sweep parameter {parameter!r}; use K/digits or N/order")
    parameter = _PARAM_ALIASES[parameter]
    if not values:
        raise ConfigurationError("empty sweep")
    n_ref, k_ref = reference
    ref_cfg = base.replace(order=n_ref, decimal_digits=k_ref)
    configs = [_sweep_config(base, parameter, v) for v in values]
    for c in configs:
        if not (n_ref >= c.order and k_ref >= c.decimal_digits) or (n_ref, k_ref) == (
            c.order,
            c.decimal_digits,
        ):
            raise ConfigurationError(
                f"reference (N={n_ref}, K={k_ref}) does not dominate sweep point "
                f"(N={c.order}, K={c.decimal_digits})"
            )
    new_reducer = reducer_factory or (lambda: None)

    if reference_run is None:
        with _maybe(new_reducer()) as red:
            reference_run = run_samples(system_spec, ref_cfg, red, label="reference")
    ref = reference_run.samples
    by_step = {s.step_index: s for s in ref}
    limit = _threshold(threshold)

    estimates = []
    for c in configs:

        def decoupled(sample, _by_step=by_step):
            other = _by_step.get(sample.step_index)
            if other is None:
                return True  # past the reference horizon
            return any(_abs_diff(a, b) > limit for a, b in zip(sample.state, other.state))

        with _maybe(new_reducer()) as red:
            run = run_samples(system_spec, c, red, until=decoupled)
        estimates.append(decoupling_time(run.samples, ref, threshold))
    points = tuple((v, e.t_c) for v, e in zip(values, estimates))
    # A run that never decoupled only bounds t_c from below; keep it out of the fit.
    measured = [pt for pt, e in zip(points, estimates) if e.decoupled]
    law = ScalingLaw.fit(measured, parameter) if len(measured) >= 2 else None
    return SweepResult(parameter, points, tuple(estimates), ref_cfg, law)


class _maybe:
    """Context manager that closes a reducer if one was made."""

    def __init__(self, reducer):
        self.reducer = reducer

    def __enter__(self):
        return self.reducer

    def __exit__(self, *exc):
        if self.reducer is not None:
            self.reducer.close()
