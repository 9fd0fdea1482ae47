"""Strong-scaling measurement: same work, varying worker counts, fixed partitions."""

from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass
from typing import Sequence

import gmpy2

from .errors import ConfigurationError, DeterminismError
from .precision import PrecisionContext
from .reduce import make_reducer
from .system import QuadraticSystem
from .taylor import IntegratorConfig, TrajectorySample, integrate

__all__ = ["BenchRow", "BenchReport", "strong_scaling", "estimate_wall_seconds", "mul_add_seconds"]


@dataclass(frozen=True)
class BenchRow:
    workers: int
    seconds: float
    speedup: float
    efficiency: float


@dataclass(frozen=True)
class BenchReport:
    rows: tuple[BenchRow, ...]
    partitions: int
    backend: str
    steps: int

    def speedup(self, workers: int) -> float:
        for r in self.rows:
            if r.workers == workers:
                return r.speedup
        raise KeyError(workers)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["workers", "seconds", "speedup", "efficiency"])
        for r in self.rows:
            w.writerow([r.workers, f"{r.seconds:.6f}", f"{r.speedup:.4f}", f"{r.efficiency:.4f}"])
        return buf.getvalue()


def _fingerprint(samples: Sequence[TrajectorySample]):
    return [(s.step_index, tuple(gmpy2.to_binary(v.value) for v in s.state)) for s in samples]


def strong_scaling(system: QuadraticSystem, cfg: IntegratorConfig, worker_counts: Sequence[int],
                   partitions: int | None = None, backend: str = "processes",
                   log=None) -> BenchReport:
    """Time ``integrate`` for each worker count on identical work.

    Rows run sequentially.  Only the integration loop is timed (monotonic
    clock).  Every row must reproduce the first row's samples bit for bit,
    otherwise :class:`DeterminismError` is raised and nothing is reported.
    """
    counts = list(dict.fromkeys(int(w) for w in worker_counts))
    if not counts or min(counts) < 1:
        raise ConfigurationError("worker counts must be positive")
    if 1 not in counts:
        counts.insert(0, 1)
    counts.sort()
    P = partitions or max(counts)
    timings, reference = [], None
    for W in counts:
        samples: list[TrajectorySample] = []
        with make_reducer(backend, W, P) as reducer:
            reducer.bind(system, cfg.order)  # process start-up is not timed
            t0 = time.perf_counter()
            integrate(system, cfg, reducer, samples.append)
            elapsed = time.perf_counter() - t0
        fp = _fingerprint(samples)
        if reference is None:
            reference = fp
        elif fp != reference:
            raise DeterminismError(f"output with {W} workers differs from the 1-worker run (P={P})")
        timings.append((W, elapsed))
        if log is not None:
            log(f"workers={W}: {elapsed:.3f} s")
    t1 = timings[0][1]
    rows = tuple(BenchRow(W, t, t1 / t, t1 / t / W) for W, t in timings)
    return BenchReport(rows, P, backend, cfg.n_steps)


def mul_add_seconds(ctx: PrecisionContext, n: int = 2000) -> float:
    """Measured cost of one multiply-add at ``ctx`` in the convolution kernel."""
    import operator

    with ctx.working():
        a = [gmpy2.mpfr(1) / (i + 3) for i in range(n)]
        b = [gmpy2.mpfr(2) / (i + 7) for i in range(n)]
        t0 = time.perf_counter()
        sum(map(operator.mul, reversed(a), b), gmpy2.mpfr(0))
        return (time.perf_counter() - t0) / n


def estimate_wall_seconds(system: QuadraticSystem, cfg: IntegratorConfig, workers: int = 1) -> float:
    """Rough wall-time estimate from a calibrated multiply-add cost.

    Convolution work per step is ``E * N(N+1)/2`` multiply-adds for ``E``
    bilinear entries; everything else is linear in N and ignored.
    """
    N = cfg.order
    per_step = max(len(system.bilinear), 1) * N * (N + 1) / 2
    return cfg.n_steps * per_step * mul_add_seconds(system.context) / max(workers, 1)
