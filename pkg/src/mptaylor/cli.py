"""Command line: ``mptaylor {run,tc-sweep,verify,bench,estimate}``.

Exit codes: 0 success, 2 configuration error, 3 numeric failure,
4 verification refusal.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import cns
from .bench import estimate_wall_seconds, strong_scaling
from .errors import ConfigurationError, MPTaylorError, VerificationRefused
from .records import (
    Checkpoint,
    RunManifest,
    SampleWriter,
    read_checkpoint,
    read_samples,
    write_checkpoint,
    write_samples,
)
from .reduce import default_workers, make_reducer
from .system import resolve_system
from .taylor import integrate

log = logging.getLogger("mptaylor")

WALL_TIME_WARNING_SECONDS = 3600.0

_RUN_FLAGS = {
    "system": "system",
    "order": "order",
    "digits": "decimal_digits",
    "step": "step",
    "horizon": "horizon",
    "stride": "sample_stride",
    "workers": "workers",
    "partitions": "partitions",
    "backend": "backend",
    "out": "out",
    "checkpoint_every": "checkpoint_every",
    "checkpoint": "checkpoint",
}


def _run_options(parent) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False, parents=[parent])
    g = p.add_argument_group("run options")
    g.add_argument("--manifest", help="JSON run manifest; flags given explicitly override it")
    g.add_argument("--system", help="'lorenz' or a path to a system description")
    g.add_argument("--order", type=int, metavar="N", help="Taylor order")
    g.add_argument("--digits", type=int, metavar="K", help="decimal digits of precision")
    g.add_argument("--step", metavar="TAU", help="step size (decimal)")
    g.add_argument("--horizon", metavar="T", help="final time (decimal)")
    g.add_argument("--stride", type=int, metavar="M", help="emit a sample every M steps")
    g.add_argument("--workers", type=int, metavar="W", help="worker count (default: available cores)")
    g.add_argument("--partitions", type=int, metavar="P", help="partition count (default: W)")
    g.add_argument("--backend", choices=("serial", "threads", "processes"))
    return p


def _manifest(args) -> RunManifest:
    base = RunManifest.load(args.manifest) if getattr(args, "manifest", None) else RunManifest()
    data = {f: getattr(base, f) for f in base.__dataclass_fields__}
    if getattr(args, "manifest", None) and data["system"] != "lorenz":
        candidate = Path(args.manifest).parent / data["system"]
        if not Path(data["system"]).is_absolute() and candidate.is_file():
            data["system"] = str(candidate)
    for flag, key in _RUN_FLAGS.items():
        value = getattr(args, flag, None)
        if value is not None:
            data[key] = value
    return RunManifest(**data)


def _reducer_for(m: RunManifest):
    workers = m.workers or default_workers()
    partitions = m.partitions or workers
    return make_reducer(m.backend, workers, partitions), partitions


def cmd_run(m: RunManifest, resume: bool = False, dry_run: bool = False) -> int:
    cfg = m.config
    system = resolve_system(m.system, cfg.context)
    workers = m.workers or default_workers()
    partitions = m.partitions or workers
    estimate = estimate_wall_seconds(system, cfg, workers)
    if estimate > WALL_TIME_WARNING_SECONDS:
        log.warning("estimated wall time ~%.1f h (%d steps, N=%d, K=%d, %d workers)",
                    estimate / 3600, cfg.n_steps, cfg.order, cfg.decimal_digits, workers)
    if dry_run:
        print(f"valid: {cfg.n_steps} steps, N={cfg.order}, K={cfg.decimal_digits}, "
              f"estimated {estimate:.1f} s on {workers} workers")
        return 0
    if not m.out:
        raise ConfigurationError("--out is required")
    fingerprint = m.fingerprint(system, partitions)
    ckpt_path = m.checkpoint_path()
    start = None
    if resume:
        if ckpt_path is None or not ckpt_path.is_file():
            raise ConfigurationError(f"no checkpoint to resume from at {ckpt_path}")
        ckpt = read_checkpoint(ckpt_path)
        if ckpt.fingerprint != fingerprint:
            raise ConfigurationError("checkpoint was written by a different run configuration")
        start = (ckpt.step_index, ckpt.state)
        log.info("resuming at step %d", ckpt.step_index)

    writer = SampleWriter(m.out, system, cfg, partitions,
                          resume_after=None if start is None else start[0])
    every = m.checkpoint_every

    def sink(sample):
        writer(sample)
        if every and ckpt_path and sample.step_index and (
            sample.step_index % every == 0 or sample.step_index == cfg.n_steps
        ):
            writer.flush()
            write_checkpoint(ckpt_path, Checkpoint(sample.step_index, sample.state, fingerprint))

    reducer, _ = _reducer_for(m)
    try:
        with writer, reducer:
            final = integrate(system, cfg, reducer, sink, start=start)
    finally:
        writer.close()
    log.info("wrote %s (%d rows, final step %d)", m.out, writer.count, final.step_index)
    return 0


def _parse_sweep(text: str):
    name, sep, values = text.partition("=")
    if not sep:
        raise ConfigurationError("--sweep expects PARAM=v1,v2,... (PARAM is digits/K or order/N)")
    try:
        vals = [int(v) for v in values.split(",") if v.strip()]
    except ValueError:
        raise ConfigurationError(f"sweep values must be integers: {values}") from None
    return name.strip(), vals


def cmd_tc_sweep(m: RunManifest, sweep: str, ref_order=None, ref_digits=None,
                 threshold=cns.DEFAULT_THRESHOLD, out=None) -> int:
    parameter, values = _parse_sweep(sweep)
    cfg = m.config
    reference = (ref_order or cfg.order, ref_digits or cfg.decimal_digits)
    result = cns.tc_sweep(m.system, cfg, parameter, values, reference, threshold,
                          reducer_factory=lambda: _reducer_for(m)[0])
    stream = open(out, "w", newline="") if out else sys.stdout
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow([result.parameter, "t_c", "decoupled"])
        for (v, t), e in zip(result.points, result.estimates):
            w.writerow([v, t, "yes" if e.decoupled else "no"])
        if result.law is not None:
            stream.write(f"# slope: {float(result.slope):.6g} ({result.slope})\n")
    finally:
        if out:
            stream.close()
    return 0


def _load_run(path: str, args):
    p = Path(path)
    text = p.read_text()
    if text.lstrip().startswith("{"):
        m = RunManifest.load(p)
        if m.system != "lorenz" and not Path(m.system).is_absolute():
            candidate = p.parent / m.system
            if candidate.is_file():
                m.system = str(candidate)
        cfg = m.config
        system = resolve_system(m.system, cfg.context)
        reducer, _ = _reducer_for(m)
        with reducer:
            run = cns.run_samples(system, cfg, reducer, label=str(p))
        return run, system
    sf = read_samples(p)
    return cns.Run(tuple(sf.samples), sf.config(), str(p)), None


def _lower(run_a, run_b):
    a, b = run_a.config, run_b.config
    if b.order <= a.order and b.decimal_digits <= a.decimal_digits and (a.order, a.decimal_digits) != (b.order, b.decimal_digits):
        return 1
    return 0


def cmd_verify(path_a: str, path_b: str, digits: int, out=None, report=None, args=None) -> int:
    (run_a, sys_a), (run_b, sys_b) = _load_run(path_a, args), _load_run(path_b, args)
    rep = cns.verify_pair(run_a, run_b)
    stream = open(report, "w", newline="") if report else sys.stdout
    try:
        w = csv.writer(stream, lineterminator="\n")
        w.writerow(["n", "t", "min_digits"])
        for n, t, d in zip(rep.step_indices, rep.times, rep.per_sample_minimum):
            w.writerow([n, t, d])
        stream.write(f"# minimum: {rep.minimum}\n")
    finally:
        if report:
            stream.close()
    if rep.minimum < digits:
        raise VerificationRefused(
            f"runs agree on only {rep.minimum} digits; refusing to publish {digits}"
        )
    if out:
        idx = _lower(run_a, run_b)
        run, system = ((run_a, sys_a), (run_b, sys_b))[idx]
        if system is None:
            raise ConfigurationError("publishing needs a manifest (not a sample file) for the lower run")
        write_samples(out, run.samples, system, run.config, digits=digits)
        log.info("published %d samples at %d digits to %s", len(run.samples), digits, out)
    return 0


def cmd_bench(m: RunManifest, worker_list: list[int], steps: int = 100, out=None) -> int:
    cfg = m.config
    from decimal import Decimal

    cfg = cfg.replace(horizon=str(Decimal(cfg.step) * steps), sample_stride=steps)
    system = resolve_system(m.system, cfg.context)
    report = strong_scaling(system, cfg, worker_list, m.partitions, m.backend, log=log.info)
    text = report.to_csv()
    if out:
        Path(out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_estimate(T, k_slope, n_slope, reserve_k, reserve_n) -> int:
    req = cns.estimate_requirements(T, k_slope, n_slope, reserve_k, reserve_n)
    w = csv.writer(sys.stdout, lineterminator="\n")
    w.writerow(["N", "K"])
    w.writerow([req.order, req.decimal_digits])
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mptaylor", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="progress messages on stderr")
    sub = parser.add_subparsers(dest="command", required=True)
    verbose = argparse.ArgumentParser(add_help=False)
    verbose.add_argument("-v", "--verbose", action="store_true", default=argparse.SUPPRESS)
    common = _run_options(verbose)

    p = sub.add_parser("run", parents=[common], help="integrate and write a sample file")
    p.add_argument("--out", help="sample file to write")
    p.add_argument("--checkpoint-every", type=int, metavar="S", help="checkpoint interval in steps (0 = off)")
    p.add_argument("--checkpoint", help="checkpoint path (default: OUT.ckpt)")
    p.add_argument("--resume", action="store_true", help="continue from the checkpoint")
    p.add_argument("--dry-run", action="store_true", help="validate and estimate only")

    p = sub.add_parser("tc-sweep", parents=[common], help="measure t_c over K or N and fit the slope")
    p.add_argument("--sweep", required=True, metavar="PARAM=v1,v2,...")
    p.add_argument("--ref-order", type=int, metavar="N")
    p.add_argument("--ref-digits", type=int, metavar="K")
    p.add_argument("--threshold", default=cns.DEFAULT_THRESHOLD)
    p.add_argument("--out", help="CSV output (default: stdout)")

    p = sub.add_parser("verify", parents=[verbose], help="compare two runs and publish agreed digits")
    p.add_argument("run_a", help="manifest (.json) or sample file")
    p.add_argument("run_b", help="manifest (.json) or sample file")
    p.add_argument("--publish-digits", "-D", type=int, required=True, metavar="D")
    p.add_argument("--out", help="reference-solution file to write")
    p.add_argument("--report", help="per-sample agreement CSV (default: stdout)")

    p = sub.add_parser("bench", parents=[common], help="strong-scaling benchmark")
    p.add_argument("--workers-list", default="1,2,4", help="comma-separated worker counts")
    p.add_argument("--steps", type=int, default=100)
    p.add_argument("--out", help="CSV output (default: stdout)")

    p = sub.add_parser("estimate", parents=[verbose], help="order and precision needed for a horizon")
    p.add_argument("--horizon", required=True, metavar="T")
    p.add_argument("--k-slope", default="2.5")
    p.add_argument("--n-slope", default="3")
    p.add_argument("--reserve-k", default="0", help="percent")
    p.add_argument("--reserve-n", default="0", help="percent")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="mptaylor: %(message)s", stream=sys.stderr)
    try:
        if args.command == "run":
            return cmd_run(_manifest(args), resume=args.resume, dry_run=args.dry_run)
        if args.command == "tc-sweep":
            return cmd_tc_sweep(_manifest(args), args.sweep, args.ref_order, args.ref_digits,
                                args.threshold, args.out)
        if args.command == "verify":
            return cmd_verify(args.run_a, args.run_b, args.publish_digits, args.out, args.report, args)
        if args.command == "bench":
            workers = [int(w) for w in args.workers_list.split(",") if w.strip()]
            return cmd_bench(_manifest(args), workers, args.steps, args.out)
        if args.command == "estimate":
            return cmd_estimate(args.horizon, args.k_slope, args.n_slope, args.reserve_k, args.reserve_n)
    except MPTaylorError as exc:
        print(f"mptaylor: error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ValueError as exc:
        print(f"mptaylor: error: {exc}", file=sys.stderr)
        return 2
    return 2


if __name__ == "__main__":
    sys.exit(main())
