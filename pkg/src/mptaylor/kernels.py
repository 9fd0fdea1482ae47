"""Raw mpfr kernels shared by the serial and parallel paths.

Everything here assumes the caller has entered the precision context
(``with ctx.working():``); values are bare ``gmpy2.mpfr``.  ``mul`` arguments
let :class:`MulCounter` instrument multiplications without slowing the
uncounted path.
"""

from __future__ import annotations

import operator
import threading
from collections import Counter

from gmpy2 import mpfr

_mul = operator.mul


class MulCounter:
    """Counts multiplications by category (convolution, coupling, linear, horner)."""

    def __init__(self):
        self.counts = Counter()
        self._lock = threading.Lock()

    def mul(self, category):
        counts, lock = self.counts, self._lock

        def counted(a, b):
            with lock:
                counts[category] += 1
            return a * b

        return counted

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def reset(self):
        self.counts.clear()


def _muls(counter, category):
    return _mul if counter is None else counter.mul(category)


def convolve_range(a, b, i, lo, hi, counter=None):
    """``sum(a[i-j] * b[j] for j in range(lo, hi))`` accumulated in ascending j."""
    if not 0 <= lo <= hi <= i + 1:
        raise IndexError(f"convolution range [{lo}, {hi}) outside [0, {i + 1})")
    if len(a) <= i - lo or len(b) < hi:
        raise IndexError(f"coefficient arrays too short for order {i}")
    return sum(map(_muls(counter, "convolution"), reversed(a[i - hi + 1 : i - lo + 1]), b[lo:hi]), mpfr(0))


def tree_combine(partials):
    """Pairwise sum in a fixed binary tree over partition index.

    Stage by stage, neighbours ``2q`` and ``2q+1`` are added; an odd level is
    padded with an exact zero.  The grouping depends only on ``len(partials)``.
    """
    level = list(partials)
    if not level:
        raise ValueError("tree_combine needs at least one partial")
    while len(level) > 1:
        if len(level) % 2:
            level.append(mpfr(0))
        level = [level[q] + level[q + 1] for q in range(0, len(level), 2)]
    return level[0]


def linear_row(system, coeffs, i, k, counter=None):
    """Constant (order 0 only) plus linear part of equation ``k`` at order ``i``."""
    mul = _muls(counter, "linear")
    acc = system.constant_raw[k] if i == 0 else mpfr(0)
    for l, a in system.linear_rows[k]:
        acc = acc + mul(a, coeffs[l][i])
    return acc


def combine_order(system, i, lin, conv, counter=None):
    """Order ``i+1`` coefficients from linear parts and convolution totals."""
    mul = _muls(counter, "coupling")
    bil = system.bilinear_raw
    n = i + 1
    out = []
    for k, idxs in enumerate(system.couplings):
        acc = lin[k]
        for e in idxs:
            acc = acc + mul(bil[e][3], conv[e])
        out.append(acc / n)
    return out


def horner(c, N, tau, counter=None):
    """``c[0] + tau*(c[1] + tau*(... + tau*c[N]))``, innermost first."""
    if len(c) < N + 1:
        raise IndexError(f"need {N + 1} coefficients, got {len(c)}")
    mul = _muls(counter, "horner")
    acc = c[N]
    for j in range(N - 1, -1, -1):
        acc = c[j] + mul(tau, acc)
    return acc
