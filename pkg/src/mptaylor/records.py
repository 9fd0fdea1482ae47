"""On-disk formats: sample files, checkpoints and run manifests.

Sample file (tab separated, text)::

    # mptaylor-samples: 1
    # system: lorenz
    # system_hash: 3f1c...
    # N: 60
    # K: 80
    # tau: 0.01
    # stride: 100
    # partitions: 1
    # digits: 75
    # columns: n t x y z
    0	0.00	-1.5800000...e+01	...

Values are written in canonical scientific form with ``K - 5`` significant
digits.  Checkpoints are JSON with the state in lossless hexadecimal
(``0x<mantissa>p<exponent>``) so a resumed run continues bit for bit.
"""

from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field, fields
from decimal import Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .errors import ConfigurationError, ParseError
from .precision import BigReal, format_decimal, make_context, parse_decimal
from .system import QuadraticSystem
from .taylor import IntegratorConfig, TrajectorySample

__all__ = [
    "SampleFile",
    "SampleWriter",
    "write_samples",
    "read_samples",
    "sample_digits",
    "Checkpoint",
    "write_checkpoint",
    "read_checkpoint",
    "RunManifest",
]

SAMPLE_FORMAT = "1"
CHECKPOINT_FORMAT = "mptaylor-checkpoint/1"
DIGIT_CUSHION = 5


def sample_digits(K: int) -> int:
    """Digits stored per value in sample files (a cushion below full precision)."""
    return max(1, K - DIGIT_CUSHION)


@dataclass
class SampleFile:
    header: dict[str, str]
    names: tuple[str, ...]
    samples: list[TrajectorySample]

    @property
    def decimal_digits(self) -> int:
        return int(self.header["K"])

    @property
    def digits(self) -> int:
        return int(self.header["digits"])

    def config(self, horizon=None) -> IntegratorConfig:
        h = self.header
        if horizon is None:
            horizon = str(self.samples[-1].time) if self.samples else h["tau"]
        return IntegratorConfig(int(h["N"]), int(h["K"]), h["tau"], horizon, int(h["stride"]))


def _header(system: QuadraticSystem, cfg: IntegratorConfig, partitions: int, digits: int):
    return {
        "mptaylor-samples": SAMPLE_FORMAT,
        "system": system.title,
        "system_hash": system.fingerprint(),
        "N": str(cfg.order),
        "K": str(cfg.decimal_digits),
        "tau": cfg.step,
        "stride": str(cfg.sample_stride),
        "partitions": str(partitions),
        "digits": str(digits),
        "columns": " ".join(("n", "t", *system.names)),
    }


def _format_row(sample: TrajectorySample, digits: int) -> str:
    values = (format_decimal(v, digits) for v in sample.state)
    return "\t".join((str(sample.step_index), str(sample.time), *values)) + "\n"


class SampleWriter:
    """Streaming sample-file writer; usable directly as an ``integrate`` sink.

    With ``resume_after=n`` an existing file is kept up to and including
    step ``n`` and new rows are appended after it.
    """

    def __init__(self, path, system: QuadraticSystem, cfg: IntegratorConfig, partitions: int = 1,
                 digits: int | None = None, resume_after: int | None = None):
        self.path = Path(path)
        self.digits = sample_digits(cfg.decimal_digits) if digits is None else digits
        header = _header(system, cfg, partitions, self.digits)
        if resume_after is None:
            self._fh = open(self.path, "w", encoding="ascii")
            self._fh.writelines(f"# {k}: {v}\n" for k, v in header.items())
        else:
            existing = read_samples(self.path)
            mismatched = [k for k in ("system_hash", "N", "K", "tau", "stride", "partitions", "digits")
                          if existing.header.get(k) != header[k]]
            if mismatched:
                raise ConfigurationError(
                    f"cannot resume {self.path}: header differs in {', '.join(mismatched)}"
                )
            kept = []
            with open(self.path, encoding="ascii") as fh:
                for line in fh:
                    if line.startswith("#") or int(line.split("\t", 1)[0]) <= resume_after:
                        kept.append(line)
            self._fh = open(self.path, "w", encoding="ascii")
            self._fh.writelines(kept)
        self.count = 0

    def __call__(self, sample: TrajectorySample):
        self._fh.write(_format_row(sample, self.digits))
        self.count += 1

    def flush(self):
        self._fh.flush()
        os.fsync(self._fh.fileno())

    def close(self):
        if not self._fh.closed:
            self._fh.close()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def write_samples(path, samples: Iterable[TrajectorySample], system: QuadraticSystem,
                  cfg: IntegratorConfig, partitions: int = 1, digits: int | None = None) -> Path:
    with SampleWriter(path, system, cfg, partitions, digits) as w:
        for s in samples:
            w(s)
    return Path(path)


def read_samples(path) -> SampleFile:
    """Parse a sample file; values are read back at the file's precision K."""
    header: dict[str, str] = {}
    rows = []
    with open(path, encoding="ascii") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            if not line:
                continue
            if line.startswith("#"):
                key, sep, value = line[1:].partition(":")
                if sep:
                    header[key.strip()] = value.strip()
                continue
            rows.append((lineno, line.split("\t")))
    for key in ("K", "N", "tau", "stride", "columns"):
        if key not in header:
            raise ParseError(f"{path}: missing header field {key!r}")
    header.setdefault("digits", str(sample_digits(int(header["K"]))))
    names = tuple(header["columns"].split()[2:])
    ctx = make_context(int(header["K"]))
    samples = []
    for lineno, cells in rows:
        if len(cells) != 2 + len(names):
            raise ParseError(f"expected {2 + len(names)} columns", lineno)
        state = tuple(parse_decimal(c, ctx) for c in cells[2:])
        samples.append(TrajectorySample(int(cells[0]), Decimal(cells[1]), state))
    return SampleFile(header, names, samples)


# -- checkpoints ------------------------------------------------------------------


@dataclass(frozen=True)
class Checkpoint:
    step_index: int
    state: tuple[BigReal, ...]
    fingerprint: str

    def to_json(self) -> str:
        return json.dumps(
            {
                "format": CHECKPOINT_FORMAT,
                "step_index": self.step_index,
                "K": self.state[0].context.decimal_digits,
                "fingerprint": self.fingerprint,
                "state": [v.to_hex() for v in self.state],
            },
            indent=1,
        )


def write_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(ckpt.to_json())
    os.replace(tmp, path)
    return path


def read_checkpoint(path) -> Checkpoint:
    try:
        data = json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"unreadable checkpoint {path}: {exc}") from exc
    if data.get("format") != CHECKPOINT_FORMAT:
        raise ConfigurationError(f"{path} is not an mptaylor checkpoint")
    ctx = make_context(int(data["K"]))
    state = tuple(BigReal.from_hex(s, ctx) for s in data["state"])
    return Checkpoint(int(data["step_index"]), state, data["fingerprint"])


# -- manifests ----------------------------------------------------------------------


@dataclass
class RunManifest:
    """Everything needed to (re)run one integration."""

    system: str = "lorenz"
    order: int = 25
    decimal_digits: int = 32
    step: str = "0.01"
    horizon: str = "10"
    sample_stride: int = 100
    workers: int | None = None
    partitions: int | None = None
    backend: str = "processes"
    out: str | None = None
    checkpoint_every: int = 0
    checkpoint: str | None = None
    label: str = ""
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.workers is not None and self.workers < 1:
            raise ConfigurationError("workers must be >= 1")
        if self.partitions is not None and self.partitions < 1:
            raise ConfigurationError("partitions must be >= 1")
        if self.checkpoint_every < 0:
            raise ConfigurationError("checkpoint interval must be >= 0")
        if self.checkpoint_every and self.checkpoint_every % self.sample_stride:
            raise ConfigurationError(
                f"checkpoint interval {self.checkpoint_every} is not a multiple of "
                f"the sample stride {self.sample_stride}"
            )
        self.config  # validates

    @property
    def config(self) -> IntegratorConfig:
        return IntegratorConfig(self.order, self.decimal_digits, self.step, self.horizon, self.sample_stride)

    def checkpoint_path(self) -> Path | None:
        if self.checkpoint:
            return Path(self.checkpoint)
        if self.out:
            return Path(self.out + ".ckpt")
        return None

    def fingerprint(self, system: QuadraticSystem, partitions: int) -> str:
        """Hash of everything that determines the bits of the trajectory.

        The horizon, output paths and worker count are excluded: a run may
        be resumed with a longer horizon or a different number of workers.
        """
        key = json.dumps(
            [system.fingerprint(), self.order, self.decimal_digits, self.step,
             self.sample_stride, partitions]
        )
        return hashlib.sha256(key.encode()).hexdigest()[:16]

    @classmethod
    def load(cls, path) -> "RunManifest":
        try:
            data = json.loads(Path(path).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigurationError(f"unreadable manifest {path}: {exc}") from exc
        if not isinstance(data, dict):
            raise ConfigurationError(f"manifest {path} must be a JSON object")
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ConfigurationError(f"unknown manifest keys: {', '.join(sorted(unknown))}")
        for key in ("step", "horizon"):
            if key in data:
                data[key] = str(data[key])
        try:
            return cls(**data)
        except TypeError as exc:
            raise ConfigurationError(f"bad manifest {path}: {exc}") from exc

    def save(self, path) -> Path:
        Path(path).write_text(json.dumps(asdict(self), indent=2) + "\n")
        return Path(path)
