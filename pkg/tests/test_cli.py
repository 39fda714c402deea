import csv
import json
import math
import os

import pytest

from secondvar import cli
from secondvar.audit import render_json
from secondvar.problem import render_config

from .conftest import problem


def _run(capsys, *argv):
    code = cli.run(list(argv))
    out, err = capsys.readouterr()
    return code, out, err


def _json(capsys, *argv):
    code, out, err = _run(capsys, *argv)
    return code, json.loads(out), out


# ---------------------------------------------------------------------------
# documented examples


def test_audit_long_harmonic_exit_one(capsys):
    code, d, _ = _json(capsys, "audit", "--builtin", "harmonic-oscillator", "--tol", "t1=3.3")
    assert code == 1 and d["verdict"] == "not_minimum"
    assert abs(d["conjugate_times"][0]["time"] - math.pi) <= 1e-6


def test_audit_short_harmonic_exit_zero(capsys):
    code, d, _ = _json(capsys, "audit", "--builtin", "harmonic-oscillator", "--tol", "t1=1.5")
    assert code == 0 and d["verdict"] == "minimum"


def test_audit_abnormal_exit_two(capsys):
    code, d, _ = _json(capsys, "audit", "--builtin", "paper-example-1")
    assert code == 2 and d["reasons"] == ["abnormal"]


def test_audit_shooting_failure_exit_three(capsys):
    code, d, _ = _json(capsys, "audit", "--builtin", "harmonic-oscillator", "--tol", f"t1={math.pi!r}")
    assert code == 3 and d["verdict"] == "error"


def test_conjugate_free_particle_empty(capsys):
    code, d, _ = _json(capsys, "conjugate", "--builtin", "free-particle")
    assert code == 0 and d["conjugate_times"] == []


def test_conjugate_extended_scan(capsys):
    code, d, _ = _json(capsys, "conjugate", "--builtin", "harmonic-oscillator", "--t-end", "7")
    times = [c["time"] for c in d["conjugate_times"]]
    assert code == 0 and len(times) == 2
    assert abs(times[0] - math.pi) <= 1e-6 and abs(times[1] - 2 * math.pi) <= 1e-6


def test_conjugate_frame_matches(capsys):
    _, a, _ = _json(capsys, "conjugate", "--builtin", "harmonic-oscillator", "--t-end", "4")
    _, b, _ = _json(capsys, "conjugate", "--builtin", "harmonic-oscillator", "--t-end", "4", "--frame")
    assert abs(a["conjugate_times"][0]["time"] - b["conjugate_times"][0]["time"]) <= 1e-7


def test_normality_example_one(capsys):
    code, d, _ = _json(capsys, "normality", "--builtin", "paper-example-1", "--window", "8")
    assert code == 0
    dims = [w["dim"] for w in d["windows"]]
    assert 1 in dims and d["global"]["dim"] == 0


def test_solve_harmonic(capsys):
    code, d, _ = _json(capsys, "solve", "--builtin", "harmonic-oscillator")
    assert code == 0
    assert d["p0"][0] == pytest.approx(1 / math.sin(1.0), abs=1e-6)
    assert abs(d["q_t1"][0] - 1.0) <= 1e-8


def test_riccati_subcommand(capsys):
    code, d, _ = _json(capsys, "riccati", "--builtin", "harmonic-oscillator", "--tol", "t1=2")
    assert code == 0
    assert abs(d["from_KE"]["escape_time"] - math.pi / 2) <= 1e-9
    assert abs(d["direct"]["escape_time"] - math.pi / 2) <= 1e-3
    assert d["certificate"]["pass"] is True  # no conjugate point before pi


def test_fields_subcommand(capsys):
    code, d, _ = _json(capsys, "fields", "--builtin", "heisenberg")
    assert code == 0 and d["g_spectrum"]["lambda_min"] == pytest.approx(1.0)


def test_check_derivatives_subcommand(capsys):
    code, d, _ = _json(capsys, "check-derivatives", "--builtin", "heisenberg", "--points", "20")
    assert code == 0 and d["passed"] and d["max_deviation"] <= 1e-6


def test_examples_subcommand(capsys):
    code, d, _ = _json(capsys, "examples")
    names = [x["name"] for x in d["examples"]]
    assert code == 0 and "harmonic-oscillator" in names and "paper-example-1" in names
    code, out, _ = _run(capsys, "examples", "--format", "text")
    assert code == 0 and "harmonic-oscillator:" in out


def test_text_format(capsys):
    code, out, _ = _run(capsys, "audit", "--builtin", "free-particle", "--format", "text")
    assert code == 0 and out.startswith("verdict: minimum")
    code, out, _ = _run(capsys, "solve", "--builtin", "free-particle", "--format", "text")
    assert code == 0 and "p0: [1.0" in out


def test_problem_file(tmp_path, capsys):
    path = tmp_path / "ho.toml"
    path.write_text(render_config(problem("harmonic-oscillator", t1=1.5)))
    code, d, _ = _json(capsys, "audit", str(path))
    assert code == 0 and d["verdict"] == "minimum"


# ---------------------------------------------------------------------------
# JSON round trip


@pytest.mark.parametrize(
    "argv",
    [
        ["audit", "--builtin", "harmonic-oscillator"],
        ["solve", "--builtin", "heisenberg"],
        ["conjugate", "--builtin", "harmonic-oscillator", "--t-end", "4"],
        ["riccati", "--builtin", "free-particle"],
        ["normality", "--builtin", "paper-example-1"],
        ["fields", "--builtin", "free-particle"],
        ["check-derivatives", "--builtin", "free-particle", "--points", "5"],
        ["examples"],
    ],
)
def test_json_round_trip(capsys, argv):
    _, d, out = _json(capsys, *argv)
    assert render_json(d) == out


def test_audit_output_deterministic(capsys):
    _, a, _ = _json(capsys, "audit", "--builtin", "heisenberg")
    _, b, _ = _json(capsys, "audit", "--builtin", "heisenberg")
    a.pop("elapsed_seconds"), b.pop("elapsed_seconds")
    assert a == b


# ---------------------------------------------------------------------------
# traces and output files


def _header(path):
    with open(path, newline="") as fh:
        return next(csv.reader(fh))


def test_audit_traces(tmp_path, capsys):
    out = tmp_path / "report.json"
    tdir = tmp_path / "tr"
    code, _, _ = _run(
        capsys, "audit", "--builtin", "harmonic-oscillator", "--out", str(out), "--traces", str(tdir), "--samples", "21"
    )
    assert code == 0
    d = json.loads(out.read_text())
    assert d["verdict"] == "minimum" and "det_B" in d["traces"]
    assert sorted(os.listdir(tdir)) == ["conjugate.csv", "extremal.csv", "fields.csv", "riccati.csv"]
    assert _header(tdir / "extremal.csv") == ["t", "q1", "p1", "z1"]
    assert _header(tdir / "conjugate.csv") == ["t", "det_B", "sigma_min_B"]
    assert _header(tdir / "riccati.csv") == ["t", "C11", "det_K", "asymmetry"]
    assert _header(tdir / "fields.csv")[:2] == ["t", "G11"]
    with open(tdir / "extremal.csv") as fh:
        assert len(fh.read().strip().splitlines()) == 22


def test_help_lists_csv_columns(capsys):
    with pytest.raises(SystemExit) as info:
        cli.run(["audit", "--help"])
    assert info.value.code == 0
    out = capsys.readouterr().out
    assert "conjugate.csv  t, det_B, sigma_min_B" in out
    assert "riccati.csv    t, C11..Cnn, det_K, asymmetry" in out


# ---------------------------------------------------------------------------
# errors


@pytest.mark.parametrize(
    "argv",
    [
        [],
        ["audit"],
        ["audit", "x.toml", "--builtin", "free-particle"],
        ["audit", "--builtin", "no-such-problem"],
        ["audit", "--builtin", "free-particle", "--tol", "ode_tol"],
        ["audit", "--builtin", "free-particle", "--tol", "ode_tol=abc"],
        ["audit", "--builtin", "free-particle", "--tol", "bogus=1"],
        ["frobnicate"],
        ["audit", "--builtin", "free-particle", "--format", "yaml"],
    ],
)
def test_usage_errors(capsys, argv):
    code, out, err = _run(capsys, *argv)
    assert code == 64 and "usage error" in err and out == ""


def test_missing_file_is_io_error(tmp_path, capsys):
    code, _, err = _run(capsys, "audit", str(tmp_path / "missing.toml"))
    assert code == 74 and "I/O error" in err


def test_unwritable_output_is_io_error(tmp_path, capsys):
    code, _, _ = _run(capsys, "examples", "--out", str(tmp_path / "no" / "such" / "dir.json"))
    assert code == 74


def test_bad_config_is_error(tmp_path, capsys):
    path = tmp_path / "bad.toml"
    path.write_text('n = 1\nr = 1\npsi = ["z1", "z1"]\nlagrangian = "z1"\nt0 = 0\nt1 = 1\nqa = [0]\nqb = [1]\n')
    code, _, err = _run(capsys, "audit", str(path))
    assert code == 3 and "error" in err
