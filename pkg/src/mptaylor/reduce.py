"""Deterministic partitioned reduction of the Leibniz convolution sums.

At order ``i`` each convolution has ``n = i+1`` terms.  The index range is cut
into ``P`` contiguous blocks (``start_p = floor(n*p/P)``); block partials are
summed in ascending index and then combined by a binary tree whose shape
depends on ``P`` alone.  Workers only decide *who* computes a block, never
the order of additions, so for a fixed ``P`` the result is bitwise identical
for any worker count and any backend.

Backends:

``SerialReducer``
    Everything in the calling thread.
``ThreadReducer``
    Shared coefficient table, thread pool.  Partition blocks, the linear
    parts of the next order and the per-variable Horner loops run as pool
    tasks.  CPython's GIL limits the achievable speedup.
``ProcessReducer``
    Forked worker processes, each holding a replica of the coefficient
    table (every worker needs every coefficient).  Block partials travel
    through shared memory; one barrier per order; every process combines
    the same partials in the same tree and so derives the same next order.
"""

from __future__ import annotations

import ctypes
import functools
import multiprocessing as mp
import os
import signal
import struct
import threading
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import gmpy2
from gmpy2 import mpfr

from . import kernels
from .errors import ConfigurationError, NumericFailure
from .kernels import tree_combine

__all__ = [
    "PartitionPlan",
    "partition",
    "tree_combine",
    "reduce_convolutions",
    "overlap_linear_terms",
    "Reducer",
    "SerialReducer",
    "ThreadReducer",
    "ProcessReducer",
    "make_reducer",
    "default_workers",
]


def default_workers() -> int:
    env = os.environ.get("MPTAYLOR_WORKERS")
    if env:
        return int(env)
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


@dataclass(frozen=True)
class PartitionPlan:
    n_terms: int
    bounds: tuple[int, ...]  # P+1 block boundaries

    @property
    def parts(self) -> int:
        return len(self.bounds) - 1

    @property
    def ranges(self) -> list[tuple[int, int]]:
        b = self.bounds
        return [(b[p], b[p + 1]) for p in range(len(b) - 1)]

    def __getitem__(self, p) -> tuple[int, int]:
        return self.bounds[p], self.bounds[p + 1]


@functools.lru_cache(maxsize=4096)
def partition(n: int, P: int) -> PartitionPlan:
    """Split ``[0, n)`` into ``P`` contiguous blocks by the standard block formula."""
    if P < 1:
        raise ConfigurationError(f"partition count {P} must be >= 1")
    if n < 0:
        raise ConfigurationError(f"term count {n} must be >= 0")
    return PartitionPlan(n, tuple(n * p // P for p in range(P + 1)))


def _block_partials(entries, coeffs, i, plan, parts, counter=None):
    """Partials of every entry for partitions ``parts``; ``{(e, p): value}``."""
    out = {}
    for e, (_, l, m, _) in enumerate(entries):
        a, b = coeffs[l], coeffs[m]
        for p in parts:
            lo, hi = plan[p]
            out[e, p] = kernels.convolve_range(a, b, i, lo, hi, counter)
    return out


def reduce_convolutions(entries, tc, i, plan, workers=None, counter=None):
    """One convolution total per bilinear entry, via ``plan`` and the fixed tree.

    ``entries`` are raw ``(k, l, m, coeff)`` tuples (``QuadraticSystem.bilinear_raw``).
    ``workers`` is an optional :class:`ThreadReducer` whose pool computes the
    blocks; the totals do not depend on it.
    """
    if plan.n_terms != i + 1:
        raise ConfigurationError(f"plan covers {plan.n_terms} terms, order {i} needs {i + 1}")
    if workers is None:
        partials = _block_partials(entries, tc.coeffs, i, plan, range(plan.parts), counter)
    else:
        partials = workers.map_blocks(entries, tc, i, plan, counter)
    return [tree_combine([partials[e, p] for p in range(plan.parts)]) for e in range(len(entries))]


def overlap_linear_terms(sys, tc, i, workers=None, counter=None):
    """Constant-plus-linear part of order ``i+1`` for each variable (before /(i+1)).

    Reads only order-``i`` rows, so it can run while convolutions are pending.
    """
    if workers is None:
        return [kernels.linear_row(sys, tc.coeffs, i, k, counter) for k in range(sys.dim)]
    return workers.map_rows(lambda k: kernels.linear_row(sys, tc.coeffs, i, k, counter), sys.dim)


class Reducer:
    """Strategy for the per-order reduction.  Subclasses override the hooks."""

    workers = 1

    def __init__(self, partitions: int = 1):
        if isinstance(partitions, bool) or not isinstance(partitions, int) or partitions < 1:
            raise ConfigurationError(f"partition count must be a positive integer, got {partitions!r}")
        self.partitions = partitions

    def bind(self, sys, order):
        """Prepare resources for ``sys`` at ``order``; idempotent."""

    def begin_step(self, sys, state_raw):
        """Called once per step before the coefficient loop."""

    def order_terms(self, sys, tc, i, counter=None):
        plan = partition(i + 1, self.partitions)
        lin = overlap_linear_terms(sys, tc, i, None, counter)
        conv = reduce_convolutions(sys.bilinear_raw, tc, i, plan, None, counter)
        return lin, conv

    def horner(self, sys, tc, tau, counter=None):
        return [kernels.horner(tc.coeffs[k], tc.order, tau, counter) for k in range(sys.dim)]

    def abort(self):
        """Release any peers blocked mid-step after a failure."""

    def close(self):
        pass

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def __repr__(self):
        return f"{type(self).__name__}(workers={self.workers}, partitions={self.partitions})"


class SerialReducer(Reducer):
    """All blocks computed in order in the calling thread."""


class ThreadReducer(Reducer):
    """Thread-pool backend over a shared coefficient table."""

    def __init__(self, workers: int | None = None, partitions: int | None = None):
        workers = default_workers() if workers is None else workers
        if workers < 1:
            raise ConfigurationError(f"worker count {workers} must be >= 1")
        super().__init__(workers if partitions is None else partitions)
        self.workers = workers
        self._pool = None
        self._ctx = None

    def bind(self, sys, order):
        self._ctx = sys.context
        if self._pool is None:
            self._pool = ThreadPoolExecutor(self.workers, thread_name_prefix="mptaylor")

    def _run(self, fn, *args):
        with self._ctx.working(release_gil=True):
            return fn(*args)

    def map_rows(self, fn, d):
        futs = [self._pool.submit(self._run, fn, k) for k in range(d)]
        return [f.result() for f in futs]

    def _submit_blocks(self, entries, tc, i, plan, counter):
        groups = partition(plan.parts, self.workers)
        futs = []
        for lo, hi in groups.ranges:
            if hi > lo:
                futs.append(
                    self._pool.submit(
                        self._run, _block_partials, entries, tc.coeffs, i, plan, range(lo, hi), counter
                    )
                )
        return futs

    def map_blocks(self, entries, tc, i, plan, counter=None):
        partials = {}
        for f in self._submit_blocks(entries, tc, i, plan, counter):
            partials.update(f.result())
        return partials

    def order_terms(self, sys, tc, i, counter=None):
        plan = partition(i + 1, self.partitions)
        coeffs = tc.coeffs
        lin_futs = [
            self._pool.submit(self._run, kernels.linear_row, sys, coeffs, i, k, counter)
            for k in range(sys.dim)
        ]
        block_futs = self._submit_blocks(sys.bilinear_raw, tc, i, plan, counter)
        partials = {}
        for f in block_futs:  # completion of every block is the barrier
            partials.update(f.result())
        lin = [f.result() for f in lin_futs]
        conv = [
            tree_combine([partials[e, p] for p in range(plan.parts)])
            for e in range(len(sys.bilinear_raw))
        ]
        return lin, conv

    def horner(self, sys, tc, tau, counter=None):
        return self.map_rows(lambda k: kernels.horner(tc.coeffs[k], tc.order, tau, counter), sys.dim)

    def close(self):
        if self._pool is not None:
            self._pool.shutdown(wait=True)
            self._pool = None


# -- process backend ------------------------------------------------------------

_CMD_STEP, _CMD_STOP = 1, 2
_HEADER = struct.Struct("<I")


class _Slots:
    """Fixed-width shared-memory cells holding ``gmpy2.to_binary`` encodings."""

    def __init__(self, mpctx, count, width):
        self.width = width
        self.buf = mpctx.RawArray(ctypes.c_ubyte, count * width)

    def put(self, idx, value):
        data = gmpy2.to_binary(value)
        off = idx * self.width
        view = memoryview(self.buf).cast("B")
        _HEADER.pack_into(view, off, len(data))
        view[off + 4 : off + 4 + len(data)] = data

    def get(self, idx):
        off = idx * self.width
        view = memoryview(self.buf).cast("B")
        (n,) = _HEADER.unpack_from(view, off)
        return gmpy2.from_binary(bytes(view[off + 4 : off + 4 + n]))


class _Exchange:
    """Per-process side of the process backend (rank 0 is the parent)."""

    def __init__(self, rank, workers, partitions, n_entries, barrier, slots, timeout):
        self.rank = rank
        self.P = partitions
        self.block = partition(partitions, workers)[rank]
        self.n_entries = n_entries
        self.barrier = barrier
        self.slots = slots
        self.timeout = timeout

    def order_terms(self, sys, tc, i, counter=None):
        plan = partition(i + 1, self.P)
        lin = overlap_linear_terms(sys, tc, i, None, counter)
        mine = _block_partials(sys.bilinear_raw, tc.coeffs, i, plan, range(*self.block), counter)
        base = (i & 1) * self.n_entries * self.P  # double-buffered banks
        for (e, p), v in mine.items():
            lo, hi = plan[p]
            if hi > lo:
                self.slots.put(base + e * self.P + p, v)
        self.barrier.wait(self.timeout)
        conv = []
        for e in range(self.n_entries):
            partials = []
            for p in range(self.P):
                lo, hi = plan[p]
                if (e, p) in mine:
                    partials.append(mine[e, p])
                elif hi > lo:
                    partials.append(self.slots.get(base + e * self.P + p))
                else:
                    partials.append(mpfr(0))
            conv.append(tree_combine(partials))
        return lin, conv


def _set_parent_death_signal():
    try:
        libc = ctypes.CDLL("libc.so.6", use_errno=True)
        libc.prctl(1, signal.SIGKILL)  # PR_SET_PDEATHSIG
    except OSError:
        pass


def _worker_main(rank, workers, sys, order, shared):
    from .taylor import TaylorCoefficients, compute_coefficients

    _set_parent_death_signal()
    signal.signal(signal.SIGINT, signal.SIG_IGN)
    control, state_slots, error_buf, exchange = shared
    exchange.rank = rank
    exchange.block = partition(exchange.P, workers)[rank]
    barrier = exchange.barrier
    tc = TaylorCoefficients(sys.dim, order, sys.context)
    while True:
        try:
            barrier.wait()
        except threading.BrokenBarrierError:
            return
        if control[0] == _CMD_STOP:
            return
        try:
            tc.load_state([state_slots.get(k) for k in range(sys.dim)])
            compute_coefficients(sys, tc, exchange)
        except threading.BrokenBarrierError:
            return
        except BaseException as exc:  # report, then release everyone
            error_buf.value = f"worker {rank}: {type(exc).__name__}: {exc}".encode()[:1000]
            barrier.abort()
            return


class ProcessReducer(Reducer):
    """Forked worker processes with replicated coefficient tables."""

    def __init__(self, workers: int | None = None, partitions: int | None = None, timeout: float = 600.0):
        workers = default_workers() if workers is None else workers
        if workers < 1:
            raise ConfigurationError(f"worker count {workers} must be >= 1")
        super().__init__(workers if partitions is None else partitions)
        self.workers = workers
        self.timeout = timeout
        self._bound = None
        self._procs = []
        self._exchange = None

    def bind(self, sys, order):
        if self._bound is not None and self._bound[0] is sys and self._bound[1] == order:
            return
        self.close()
        if self.workers == 1:
            self._bound = (sys, order)
            return
        methods = mp.get_all_start_methods()
        mpctx = mp.get_context("fork" if "fork" in methods else "spawn")
        ctx = sys.context
        with ctx.working():
            width = 4 + len(gmpy2.to_binary(mpfr(-1) / 3)) + 4
        E = len(sys.bilinear)
        control = mpctx.RawArray(ctypes.c_longlong, 1)
        state_slots = _Slots(mpctx, sys.dim, width)
        error_buf = mpctx.RawArray(ctypes.c_char, 1024)
        barrier = mpctx.Barrier(self.workers)
        exchange = _Exchange(0, self.workers, self.partitions, E, barrier,
                             _Slots(mpctx, 2 * max(E, 1) * self.partitions, width), self.timeout)
        shared = (control, state_slots, error_buf, exchange)
        procs = []
        for rank in range(1, self.workers):
            p = mpctx.Process(target=_worker_main, args=(rank, self.workers, sys, order, shared),
                              name=f"mptaylor-{rank}", daemon=True)
            p.start()
            procs.append(p)
        self._procs = procs
        self._shared = shared
        self._exchange = exchange
        self._bound = (sys, order)

    def _fail(self, exc):
        error_buf = self._shared[2]
        message = error_buf.value.decode(errors="replace") or "worker pool broke"
        self._teardown(force=True)
        raise NumericFailure(message) from exc

    def begin_step(self, sys, state_raw):
        if self._exchange is None:
            return
        control, state_slots, _, exchange = self._shared
        for k, v in enumerate(state_raw):
            state_slots.put(k, v)
        control[0] = _CMD_STEP
        try:
            exchange.barrier.wait(self.timeout)
        except threading.BrokenBarrierError as exc:
            self._fail(exc)

    def order_terms(self, sys, tc, i, counter=None):
        if self._exchange is None:
            return super().order_terms(sys, tc, i, counter)
        try:
            return self._exchange.order_terms(sys, tc, i, counter)
        except threading.BrokenBarrierError as exc:
            self._fail(exc)

    def abort(self):
        if self._exchange is not None:
            self._exchange.barrier.abort()
            self._teardown(force=True)

    def _teardown(self, force=False):
        for p in self._procs:
            p.join(timeout=0 if force else 5)
            if p.is_alive():
                p.terminate()
                p.join()
        self._procs = []
        self._exchange = None
        self._bound = None

    def close(self):
        if self._exchange is not None:
            control = self._shared[0]
            control[0] = _CMD_STOP
            try:
                self._exchange.barrier.wait(5)
            except threading.BrokenBarrierError:
                pass
        self._teardown()


BACKENDS = {"serial": SerialReducer, "threads": ThreadReducer, "processes": ProcessReducer}


def make_reducer(backend: str = "processes", workers: int | None = None, partitions: int | None = None):
    """Reducer by backend name; ``serial`` ignores ``workers``."""
    env_p = os.environ.get("MPTAYLOR_PARTITIONS")
    if partitions is None and env_p:
        partitions = int(env_p)
    if backend not in BACKENDS:
        raise ConfigurationError(f"unknown backend {backend!r}; choose from {sorted(BACKENDS)}")
    if backend == "serial":
        return SerialReducer(partitions or 1)
    return BACKENDS[backend](workers, partitions)
