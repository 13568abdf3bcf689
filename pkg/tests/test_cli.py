import csv
import math
import shutil
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from weakcv import cli
from weakcv.cli import CSV_HEADER, QUICK_EPSILON, RunConfig, canonical, parse_config, parse_epsilon
from weakcv.errors import ConfigurationError


def read_rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# --------------------------------------------------------------------------
# Configuration


def test_defaults():
    cfg = parse_config("")
    assert cfg.model == "arsinh1d" and cfg.method == ("rrcv",) and cfg.order == 2
    assert cfg.epsilon == QUICK_EPSILON and cfg.reps == 20 and cfg.seed == 0
    full = parse_config("", full=True)
    assert full.reps == 100 and min(full.epsilon) < 0.03


def test_epsilon_syntax():
    assert parse_epsilon("2^-2..2^-6") == (0.25, 0.125, 0.0625, 0.03125, 0.015625)
    assert parse_epsilon("0.5, 2^-3") == (0.5, 0.125)
    assert parse_config("epsilon = 2^-2..2^-3").epsilon == (0.25, 0.125)


def test_config_file_sections_and_comments():
    cfg = parse_config("[run]\n# comment\nmodel = motivating  # trailing\nmethod = smc, rcv\nbasis = piecewise\n")
    assert cfg.model == "motivating" and cfg.method == ("smc", "rcv") and cfg.basis == "piecewise_poly"


@pytest.mark.parametrize(
    "text,match",
    [
        ("reps = 0", "line 1: reps"),
        ("\nfoo = 3", "line 2: unknown key 'foo'"),
        ("epsilon = 0.5, 2", "line 1: epsilon"),
        ("order = 3", "order"),
        ("p = two", "line 1: bad value"),
        ("model = heston", "unknown model"),
        ("[other]", "unknown section"),
        ("just words", "expected"),
    ],
)
def test_config_errors(text, match):
    with pytest.raises(ConfigurationError, match=match):
        parse_config(text)


def test_flags_override_file():
    cfg = parse_config("reps = 7\nseed = 3", {"reps": 9})
    assert cfg.reps == 9 and cfg.seed == 3


configs = st.builds(
    RunConfig,
    model=st.sampled_from(["arsinh1d", "motivating", "fivedim"]),
    method=st.lists(st.sampled_from(["smc", "mlmc", "rcv", "rrcv"]), min_size=1, max_size=4, unique=True).map(tuple),
    order=st.sampled_from([1, 2]),
    epsilon=st.lists(st.floats(1e-4, 0.99), min_size=1, max_size=4).map(tuple),
    p=st.integers(0, 6),
    basis=st.sampled_from(["global_poly", "piecewise_poly"]),
    include_payoff=st.booleans(),
    Q=st.none() | st.integers(1, 20),
    R=st.none() | st.floats(0.1, 10.0),
    nu=st.just(math.inf) | st.floats(1.0, 50.0),
    J=st.none() | st.integers(1, 30),
    steps=st.none() | st.lists(st.integers(1, 40), min_size=1, max_size=4).map(tuple),
    truncation=st.sampled_from(["default", "none", "auto", "1.5"]),
    reps=st.integers(1, 200),
    seed=st.integers(0, 2**40),
    output=st.none() | st.just("out/run.csv"),
    threads=st.integers(1, 8),
)


@settings(max_examples=60, deadline=None)
@given(configs)
def test_canonical_roundtrip(cfg):
    assert parse_config(canonical(cfg)) == cfg


# --------------------------------------------------------------------------
# Subcommands


def test_verify_exit_zero(capsys):
    assert cli.main(["verify"]) == 0
    out = capsys.readouterr().out
    assert "max residual" in out and "representation" in out


def test_verify_reports_accuracy_failure(monkeypatch, capsys):
    monkeypatch.setattr(cli, "verification_suite", lambda: [("representation", "arsinh1d", 1, 2, 1e-3)])
    assert cli.main(["verify"]) == 3
    assert "exceeds" in capsys.readouterr().err


def test_configuration_error_exit(tmp_path, capsys):
    bad = tmp_path / "bad.cfg"
    bad.write_text("reps = 5\nbogus = 1\n")
    assert cli.main(["estimate", "--config", str(bad)]) == 2
    assert "line 2" in capsys.readouterr().err
    assert cli.main(["estimate", "--reps", "0", "-o", str(tmp_path / "a.csv")]) == 2
    assert not (tmp_path / "a.csv").exists()


def test_resource_error_exit(tmp_path):
    out = tmp_path / "big.csv"
    assert cli.main(["estimate", "--method", "smc", "--N0", "1000000000000", "--reps", "1", "-o", str(out)]) == 4
    assert not out.exists()


def test_partial_csv_removed_on_failure(tmp_path, monkeypatch):
    calls = {"n": 0}
    real = cli.run_repetitions

    def flaky(*args, **kwargs):
        calls["n"] += 1
        if calls["n"] == 2:
            raise ConfigurationError("injected")
        return real(*args, **kwargs)

    monkeypatch.setattr(cli, "run_repetitions", flaky)
    out = tmp_path / "c.csv"
    code = cli.main(["complexity", "--method", "smc", "--epsilon", "2^-2..2^-4", "--reps", "2", "-o", str(out), "--no-plot"])
    assert code == 2 and calls["n"] == 2
    assert not out.exists()


def test_estimate_exact_cv(tmp_path):
    out = tmp_path / "e.csv"
    assert cli.main(["estimate", "--model", "motivating", "--order", "1", "--exact-cv", "--epsilon", "0.0625", "-o", str(out)]) == 0
    (row,) = read_rows(out)
    assert row["method"] == "exact"
    assert float(row["variance"]) <= 1e-20
    assert float(row["estimate"]) == pytest.approx(1.25**4, abs=1e-12)


def test_estimate_row(tmp_path):
    out = tmp_path / "e.csv"
    assert cli.main(["estimate", "--method", "rcv", "--epsilon", "0.25", "--reps", "3", "-o", str(out)]) == 0
    with open(out) as fh:
        assert fh.readline().strip().split(",") == CSV_HEADER
    (row,) = read_rows(out)
    assert row["method"] == "rcv" and row["reps"] == "3" and float(row["rmse"]) > 0
    manifest = tmp_path / "e.manifest"
    assert manifest.exists() and "# subcommand: estimate" in manifest.read_text()


def test_convergence_rows(tmp_path):
    out = tmp_path / "conv.csv"
    assert cli.main(["convergence", "--order", "1", "-o", str(out), "--no-plot"]) == 0
    rows = read_rows(out)
    assert [r["method"] for r in rows] == ["weak_euler"] * 3 + ["slope_weak_euler"]
    assert [int(r["J"]) for r in rows[:3]] == [4, 8, 16]
    assert float(rows[0]["estimate"]) == pytest.approx(0.7799107805144145, abs=1e-14)
    assert 0.7 <= float(rows[-1]["estimate"]) <= 1.3


@pytest.fixture(scope="module")
def complexity_run(tmp_path_factory):
    d = tmp_path_factory.mktemp("cx")
    out = d / "cx.csv"
    argv = ["complexity", "--method", "smc,rrcv", "--epsilon", "2^-2..2^-5", "--reps", "10", "-o", str(out), "--emit-gnuplot"]
    assert cli.main(argv) == 0
    return out


def test_complexity_rows_and_slopes(complexity_run):
    rows = read_rows(complexity_run)
    data = [r for r in rows if not r["method"].startswith("slope_")]
    slopes = {r["method"][6:]: float(r["estimate"]) for r in rows if r["method"].startswith("slope_")}
    assert len(data) == 8 and set(slopes) == {"smc", "rrcv"}
    assert [r["method"] for r in data] == ["smc"] * 4 + ["rrcv"] * 4
    assert abs(slopes["smc"]) > abs(slopes["rrcv"])


def test_complexity_figures(complexity_run):
    png = complexity_run.with_suffix(".png")
    assert png.exists() and png.read_bytes()[:8] == b"\x89PNG\r\n\x1a\n"
    gp = complexity_run.with_name("cx.gp")
    assert gp.exists() and "cx.csv" in gp.read_text()


def test_manifest_rerun_is_bit_exact(complexity_run, tmp_path):
    manifest = complexity_run.with_name("cx.manifest")
    text = manifest.read_text()
    assert text.startswith("# weakcv") and "# rerun: weakcv complexity --config cx.manifest" in text
    again = tmp_path / "again.csv"
    assert cli.main(["complexity", "--config", str(manifest), "-o", str(again), "--no-plot"]) == 0
    keep = [c for c in CSV_HEADER if c != "wall_seconds"]

    def stable(path):
        return [[r[c] for c in keep] for r in read_rows(path) if not r["method"].startswith("slope_")]

    assert stable(again) == stable(complexity_run)


def test_console_script(tmp_path):
    exe = shutil.which("weakcv")
    cmd = [exe] if exe else [sys.executable, "-m", "weakcv.cli"]
    proc = subprocess.run(cmd + ["--version"], capture_output=True, text=True)
    assert proc.returncode == 0 and proc.stdout.startswith("weakcv")
