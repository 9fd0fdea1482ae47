"""Watch the predictable time grow with precision.

A run at K digits tracks a much more precise reference until round-off,
amplified by the flow, pushes it 0.1 away; that time is t_c.  Fitting
t_c against K gives the linear law used to size long runs.  A few
minutes on one core; pass --quick for a smaller sweep.

    python demos/tc_law.py [--quick]
"""

import sys

from mptaylor import IntegratorConfig, estimate_requirements, tc_sweep

quick = "--quick" in sys.argv
ks = [8, 12, 16] if quick else [16, 24, 32]
horizon = "45" if quick else "110"
ref = (60, 40) if quick else (100, 64)

res = tc_sweep("lorenz", IntegratorConfig(ref[0], ref[1], "0.01", horizon, 10), "K", ks, reference=ref)
for (k, t), est in zip(res.points, res.estimates):
    note = "" if est.decoupled else "  (never left the reference)"
    print(f"K={k:3d}  t_c={t}{note}")
if res.slope is not None:
    print(f"fitted slope dT/dK = {float(res.slope):.3f}")
    need = estimate_requirements(1000, res.slope, 3)
    print(f"to stay reliable up to t=1000: about N={need.order}, K={need.decimal_digits}")
