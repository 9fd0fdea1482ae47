import csv
import io
import json
import os
import signal
import subprocess
import sys
import time
from pathlib import Path

import gmpy2
import pytest

from mptaylor import bench
from mptaylor.bench import BenchReport, BenchRow, strong_scaling
from mptaylor.cli import main
from mptaylor.errors import ConfigurationError, DeterminismError
from mptaylor.precision import BigReal, format_decimal, make_context
from mptaylor.records import (
    Checkpoint,
    RunManifest,
    read_checkpoint,
    read_samples,
    sample_digits,
    write_checkpoint,
    write_samples,
)
from mptaylor.reduce import SerialReducer
from mptaylor.system import builtin_lorenz, lorenz_source
from mptaylor.taylor import IntegratorConfig, integrate

SMALL = ["--order", "16", "--digits", "24", "--backend", "serial"]


def _rows(path):
    return [l for l in Path(path).read_text().splitlines() if not l.startswith("#")]


def _csv(text):
    lines = [l for l in text.splitlines() if not l.startswith("#")]
    return list(csv.reader(io.StringIO("\n".join(lines))))


# -- file formats ----------------------------------------------------------------------


def test_sample_file_round_trip(tmp_path):
    ctx = make_context(30)
    sys_ = builtin_lorenz(ctx)
    cfg = IntegratorConfig(20, 30, "0.01", "1", 25)
    samples = []
    integrate(sys_, cfg, sink=samples.append)
    path = write_samples(tmp_path / "s.tsv", samples, sys_, cfg)
    back = read_samples(path)
    assert back.names == ("x", "y", "z") and back.digits == sample_digits(30) == 25
    assert back.header["system_hash"] == sys_.fingerprint()
    assert [s.step_index for s in back.samples] == [0, 25, 50, 75, 100]
    assert [s.time for s in back.samples] == [s.time for s in samples]
    for a, b in zip(samples, back.samples):
        assert [format_decimal(v, 25) for v in a.state] == [format_decimal(v, 25) for v in b.state]
    again = write_samples(tmp_path / "t.tsv", back.samples, sys_, back.config())
    assert again.read_text() == path.read_text()


def test_sample_file_errors(tmp_path):
    p = tmp_path / "bad.tsv"
    p.write_text("# K: 20\n0\t0\t1\n")
    with pytest.raises(ConfigurationError):
        read_samples(p)


def test_checkpoint_round_trip(tmp_path):
    ctx = make_context(50)
    state = builtin_lorenz(ctx).initial_state
    ck = Checkpoint(700, tuple(v / 3 for v in state), "abc")
    path = write_checkpoint(tmp_path / "c.json", ck)
    assert read_checkpoint(path) == ck
    (tmp_path / "x.json").write_text("{}")
    with pytest.raises(ConfigurationError):
        read_checkpoint(tmp_path / "x.json")


def test_manifest_validation(tmp_path):
    with pytest.raises(ConfigurationError):
        RunManifest(workers=0)
    with pytest.raises(ConfigurationError):
        RunManifest(partitions=0)
    with pytest.raises(ConfigurationError):
        RunManifest(sample_stride=100, checkpoint_every=150)
    RunManifest(sample_stride=100, checkpoint_every=300)
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"order": 10, "decimal_digits": 20, "bogus": 1}))
    with pytest.raises(ConfigurationError, match="bogus"):
        RunManifest.load(p)
    m = RunManifest(order=10, decimal_digits=20, horizon="3")
    assert RunManifest.load(m.save(p)) == m


def test_fingerprint_ignores_horizon_and_workers():
    ctx = make_context(20)
    s = builtin_lorenz(ctx)
    a = RunManifest(order=10, decimal_digits=20, horizon="5", workers=1)
    b = RunManifest(order=10, decimal_digits=20, horizon="50", workers=4)
    c = RunManifest(order=11, decimal_digits=20, horizon="5")
    assert a.fingerprint(s, 4) == b.fingerprint(s, 4)
    assert a.fingerprint(s, 4) != a.fingerprint(s, 2)
    assert a.fingerprint(s, 4) != c.fingerprint(s, 4)


# -- run ---------------------------------------------------------------------------------


def test_run_writes_eleven_samples(tmp_path):
    out = tmp_path / "run.tsv"
    assert main(["run", *SMALL, "--horizon", "10", "--stride", "100", "--out", str(out)]) == 0
    rows = _rows(out)
    assert [r.split("\t")[1] for r in rows] == [f"{t}.00" for t in range(11)]


def test_run_resume_is_bitwise(tmp_path):
    common = ["run", *SMALL, "--stride", "100", "--checkpoint-every", "500"]
    full = tmp_path / "full.tsv"
    main([*common, "--horizon", "10", "--out", str(full)])
    part = tmp_path / "part.tsv"
    main([*common, "--horizon", "5", "--out", str(part)])
    assert read_checkpoint(str(part) + ".ckpt").step_index == 500
    assert main([*common, "--horizon", "10", "--out", str(part), "--resume"]) == 0
    assert part.read_text() == full.read_text()
    assert read_checkpoint(str(part) + ".ckpt") == read_checkpoint(str(full) + ".ckpt")


def test_resume_after_kill(tmp_path):
    # a real interruption: SIGKILL the process once a checkpoint is on disk
    out = tmp_path / "k.tsv"
    ckpt = Path(str(out) + ".ckpt")
    args = ["run", "--order", "60", "--digits", "60", "--backend", "serial", "--horizon", "10",
            "--stride", "100", "--checkpoint-every", "100", "--out", str(out)]
    proc = subprocess.Popen([sys.executable, "-m", "mptaylor", *args])
    deadline = time.time() + 120
    while time.time() < deadline and proc.poll() is None:
        if ckpt.exists() and read_checkpoint(ckpt).step_index >= 300:
            proc.send_signal(signal.SIGKILL)
            break
        time.sleep(0.02)
    proc.wait()
    killed = proc.returncode == -signal.SIGKILL
    assert main([*args, "--resume"]) == 0
    ref = tmp_path / "ref.tsv"
    assert main([*args[:-1], str(ref)]) == 0
    assert out.read_text() == ref.read_text()
    if not killed:
        pytest.skip("run finished before it could be interrupted")


def test_resume_rejects_other_configuration(tmp_path):
    out = tmp_path / "a.tsv"
    main(["run", *SMALL, "--horizon", "2", "--checkpoint-every", "100", "--out", str(out)])
    code = main(["run", "--order", "17", "--digits", "24", "--backend", "serial", "--horizon", "3",
                 "--checkpoint-every", "100", "--out", str(out), "--resume"])
    assert code == 2
    assert main(["run", *SMALL, "--out", str(tmp_path / "none.tsv"), "--resume"]) == 2


def test_long_run_is_accepted_with_warning(capsys, caplog):
    code = main(["run", "--order", "2800", "--digits", "3510", "--horizon", "7000", "--dry-run"])
    assert code == 0
    assert "700000 steps" in capsys.readouterr().out
    assert any("estimated wall time" in r.getMessage() for r in caplog.records)


def test_exit_codes(tmp_path, capsys):
    assert main(["run", "--order", "0", "--out", str(tmp_path / "x")]) == 2
    assert main(["run", "--digits", "5", "--out", str(tmp_path / "x")]) == 2
    assert main(["run", "--system", str(tmp_path / "missing.sys"), "--out", str(tmp_path / "x")]) == 2
    assert main(["run", *SMALL]) == 2  # no --out
    blowup = tmp_path / "blow.sys"
    blowup.write_text("var x = 1e100000000\neq x' = x*x\n")
    code = main(["run", "--system", str(blowup), "--order", "12", "--digits", "20", "--step", "1",
                 "--horizon", "3", "--backend", "serial", "--out", str(tmp_path / "b.tsv")])
    assert code == 3
    assert "step 1" in capsys.readouterr().err
    with pytest.raises(SystemExit) as info:
        main(["run", "--order", "abc"])
    assert info.value.code == 2


def test_system_file_and_manifest_relative_path(tmp_path):
    (tmp_path / "lorenz.sys").write_text(lorenz_source().text)
    m = RunManifest(system="lorenz.sys", order=12, decimal_digits=20, horizon="1", sample_stride=50,
                    backend="serial", out=str(tmp_path / "m.tsv"))
    m.save(tmp_path / "m.json")
    os.chdir("/")
    assert main(["run", "--manifest", str(tmp_path / "m.json")]) == 0
    ref = tmp_path / "builtin.tsv"
    main(["run", "--order", "12", "--digits", "20", "--horizon", "1", "--stride", "50",
          "--backend", "serial", "--out", str(ref)])
    assert _rows(tmp_path / "m.tsv") == _rows(ref)


# -- verify --------------------------------------------------------------------------------


def _manifest(tmp_path, name, **kw):
    m = RunManifest(horizon="2", sample_stride=50, backend="serial", **kw)
    return str(m.save(tmp_path / name))


def test_verify_identical_manifests(tmp_path, capsys):
    a = _manifest(tmp_path, "a.json", order=14, decimal_digits=24)
    out = tmp_path / "pub.tsv"
    assert main(["verify", a, a, "--publish-digits", "24", "--out", str(out)]) == 0
    rows = _csv(capsys.readouterr().out)
    assert rows[0] == ["n", "t", "min_digits"]
    assert {r[2] for r in rows[1:]} == {"24"}
    assert read_samples(out).digits == 24


def test_verify_publishes_lower_run_and_refuses(tmp_path, capsys):
    lo = _manifest(tmp_path, "lo.json", order=14, decimal_digits=24)
    hi = _manifest(tmp_path, "hi.json", order=18, decimal_digits=32)
    out = tmp_path / "pub.tsv"
    assert main(["verify", hi, lo, "-D", "10", "--out", str(out)]) == 0
    pub = read_samples(out)
    assert (pub.header["N"], pub.header["K"], pub.digits) == ("14", "24", 10)
    capsys.readouterr()
    refused = tmp_path / "no.tsv"
    assert main(["verify", lo, hi, "-D", "24", "--out", str(refused)]) == 4
    assert not refused.exists()
    assert "refusing" in capsys.readouterr().err


def test_verify_accepts_sample_files(tmp_path):
    a = tmp_path / "a.tsv"
    main(["run", *SMALL, "--horizon", "2", "--stride", "50", "--out", str(a)])
    report = tmp_path / "rep.csv"
    assert main(["verify", str(a), str(a), "-D", "5", "--report", str(report)]) == 0
    assert _csv(report.read_text())[1][2] == "24"


# -- tc-sweep / estimate -------------------------------------------------------------------


def test_tc_sweep_single_point(tmp_path, capsys):
    code = main(["tc-sweep", "--order", "16", "--horizon", "6", "--stride", "10", "--backend", "serial",
                 "--sweep", "digits=10", "--ref-digits", "20"])
    text = capsys.readouterr().out
    assert code == 0
    rows = _csv(text)
    assert rows[0][:2] == ["K", "t_c"] and len(rows) == 2
    assert "# slope" not in text


def test_tc_sweep_writes_slope_row(tmp_path):
    out = tmp_path / "s.csv"
    code = main(["tc-sweep", "--order", "24", "--horizon", "25", "--stride", "10", "--backend", "serial",
                 "--sweep", "K=8,10", "--ref-digits", "24", "--out", str(out)])
    assert code == 0
    last = out.read_text().splitlines()[-1]
    assert last.startswith("# slope: ")


def test_tc_sweep_rejects_non_dominating_reference(capsys):
    assert main(["tc-sweep", *SMALL, "--sweep", "digits=30", "--ref-digits", "24"]) == 2
    assert main(["tc-sweep", *SMALL, "--sweep", "digits"]) == 2


def test_estimate(capsys):
    assert main(["estimate", "--horizon", "7000", "--reserve-k", "20", "--reserve-n", "15"]) == 0
    assert _csv(capsys.readouterr().out) == [["N", "K"], ["2684", "3360"]]
    assert main(["estimate", "--horizon", "300"]) == 0
    assert _csv(capsys.readouterr().out)[1] == ["100", "120"]
    assert main(["estimate", "--horizon", "300", "--k-slope", "0"]) == 2


# -- bench ------------------------------------------------------------------------------------


def test_bench_report_identities():
    ctx = make_context(24)
    cfg = IntegratorConfig(20, 24, "0.01", "0.2", 20)
    rep = strong_scaling(builtin_lorenz(ctx), cfg, [2, 3], backend="threads")
    assert [r.workers for r in rep.rows] == [1, 2, 3] and rep.partitions == 3
    assert rep.speedup(1) == 1.0 and rep.rows[0].efficiency == 1.0
    for r in rep.rows:
        assert r.efficiency == pytest.approx(r.speedup / r.workers)
    rows = _csv(rep.to_csv())
    assert rows[0] == ["workers", "seconds", "speedup", "efficiency"] and len(rows) == 4


def test_bench_refuses_mismatched_outputs(monkeypatch):
    real = bench.integrate

    def drifting(system, cfg, reducer, sink):
        # perturb the last bit of every sample whenever more than one worker runs
        def tweak(s):
            if reducer.workers > 1:
                s = s.__class__(s.step_index, s.time, tuple(BigReal(gmpy2.next_above(v.value), v.context) for v in s.state))
            sink(s)

        return real(system, cfg, reducer, tweak)

    monkeypatch.setattr(bench, "integrate", drifting)
    ctx = make_context(24)
    cfg = IntegratorConfig(12, 24, "0.01", "0.05", 5)
    with pytest.raises(DeterminismError):
        strong_scaling(builtin_lorenz(ctx), cfg, [1, 2], backend="threads")


def test_bench_cli(capsys):
    assert main(["bench", "--order", "12", "--digits", "20", "--workers-list", "1,2", "--steps", "5",
                 "--backend", "threads"]) == 0
    rows = _csv(capsys.readouterr().out)
    assert [r[0] for r in rows[1:]] == ["1", "2"]
    assert rows[1][2] == "1.0000"
