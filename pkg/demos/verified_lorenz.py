"""Compute a Lorenz trajectory twice and keep only the digits both runs share.

The second run uses a higher order and more digits.  Where the two agree,
those digits are trusted; the printed column shows how that margin shrinks
as chaos amplifies truncation and round-off.  Runs in well under a minute.

    python demos/verified_lorenz.py
"""

from mptaylor import IntegratorConfig, format_decimal, run_samples, verify_pair

HORIZON = "30"

low = run_samples("lorenz", IntegratorConfig(40, 50, "0.01", HORIZON, 200))
high = run_samples("lorenz", IntegratorConfig(50, 64, "0.01", HORIZON, 200))
report = verify_pair(low, high)

print(f"{'t':>6}  {'shared digits':>13}  x (to those digits)")
for sample, digits in zip(low.samples, report.per_sample_minimum):
    x = format_decimal(sample.state[0], max(digits, 2))
    print(f"{str(sample.time):>6}  {digits:>13}  {x}")
print(f"\nworst agreement over [0, {HORIZON}]: {report.minimum} digits")
