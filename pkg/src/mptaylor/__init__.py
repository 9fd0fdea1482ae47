"""Multiple-precision Taylor series integration of quadratic ODE systems.

Typical use::

    from mptaylor import IntegratorConfig, builtin_lorenz, integrate, make_context

    cfg = IntegratorConfig(order=60, decimal_digits=80, horizon="10")
    lorenz = builtin_lorenz(cfg.context)
    final = integrate(lorenz, cfg)
"""

import sys

from .cns import (
    Run,
    ScalingLaw,
    TcEstimate,
    decoupling_time,
    estimate_requirements,
    fit_slope,
    matching_digits,
    run_samples,
    tc_sweep,
    verify_pair,
)
from .errors import (
    ConfigurationError,
    DeterminismError,
    MPTaylorError,
    NumericFailure,
    ParseError,
    PrecisionMismatch,
    VerificationRefused,
)
from .precision import BigReal, PrecisionContext, format_decimal, make_context, parse_decimal
from .reduce import ProcessReducer, SerialReducer, ThreadReducer, make_reducer, partition, tree_combine
from .system import QuadraticSystem, builtin_lorenz, evaluate_rhs, parse_system, resolve_system
from .taylor import (
    IntegratorConfig,
    TaylorCoefficients,
    TrajectorySample,
    convolve_range,
    horner_eval,
    integrate,
    next_coefficient,
    taylor_step,
)

__version__ = "0.1.0"

__all__ = [
    name for name, obj in list(globals().items())
    if not name.startswith("_") and not isinstance(obj, type(sys))
]
