import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secondvar import examples
from secondvar.audit import EXIT_CODES, AuditReport, audit, render_report
from secondvar.pontryagin import flow_extremal
from secondvar.problem import load_problem

from .conftest import problem

NEGATIVE_G = 'n = 1\nr = 1\npsi = ["z1"]\nlagrangian = "-0.5*z1^2"\nt0 = 0.0\nt1 = 1.0\nqa = [0.0]\nqb = [1.0]\n'


@pytest.fixture(scope="module")
def ho_short():
    return audit(problem("harmonic-oscillator", t1=1.5))


@pytest.fixture(scope="module")
def ho_long_report():
    return audit(problem("harmonic-oscillator", t1=3.3, qb=[0.1]))


@pytest.fixture(scope="module")
def builtin_reports():
    return {name: audit(examples.builtin(name).problem) for name in examples.names()}


def _check_invariants(r: AuditReport):
    assert r.exit_code == EXIT_CODES[r.verdict]
    if r.verdict == "minimum":
        assert r.certificate is not None and r.certificate["pass"]
        t1 = r.problem["t1"]
        assert not [c for c in r.conjugate_times if c["time"] <= t1]
    if r.verdict == "not_minimum":
        assert "conjugate" in r.reasons or "G_indefinite" in r.reasons
        if "conjugate" in r.reasons:
            assert any(c["time"] < r.problem["t1"] for c in r.conjugate_times)
        else:
            assert r.g_spectrum["lambda_min"] < 0
    if r.verdict == "inconclusive":
        assert r.reasons


# ---------------------------------------------------------------------------
# verdicts


def test_harmonic_short_is_minimum(ho_short):
    assert ho_short.verdict == "minimum" and ho_short.exit_code == 0
    assert ho_short.conjugate_times == []
    assert ho_short.certificate["pass"] and ho_short.certificate["t_star"] == pytest.approx(1.53)
    _check_invariants(ho_short)


def test_harmonic_long_is_not_minimum(ho_long_report):
    r = ho_long_report
    assert r.verdict == "not_minimum" and r.exit_code == 1
    assert r.reasons == ["conjugate"]
    assert abs(r.conjugate_times[0]["time"] - math.pi) <= 1e-6
    assert r.witness is not None and r.witness["value"] < 0
    assert r.witness["tau"] == pytest.approx(math.pi, abs=1e-6)
    _check_invariants(r)


def test_negative_G_is_not_minimum():
    r = audit(load_problem(NEGATIVE_G))
    assert r.verdict == "not_minimum" and r.reasons == ["G_indefinite"]
    assert r.witness["value"] < 0
    _check_invariants(r)


def test_builtin_verdicts(builtin_reports):
    expected = {
        "harmonic-oscillator": ("minimum", []),
        "free-particle": ("minimum", []),
        "heisenberg": ("minimum", []),
        "paper-example-1": ("inconclusive", ["abnormal"]),
    }
    for name, r in builtin_reports.items():
        assert (r.verdict, r.reasons) == expected[name], name
        _check_invariants(r)


def test_abnormal_never_minimum(builtin_reports):
    r = builtin_reports["paper-example-1"]
    assert r.abnormality["locally_normal"] is False
    assert r.certificate is None


def test_boundary_conjugate_is_inconclusive():
    p = problem("harmonic-oscillator", t1=math.pi, qb=[0.0])
    e = flow_extremal(p, [0.0], [1.0], 0.0, math.pi)
    r = audit(p, extremal=e)
    assert r.verdict == "inconclusive" and r.reasons == ["boundary_conjugate"]


def test_shooting_failure_is_error():
    r = audit(problem("harmonic-oscillator", t1=math.pi))
    assert r.verdict == "error" and r.reasons == ["shooting_failed"] and r.exit_code == 3
    assert r.message


def test_unverified_extremal_is_error():
    p = problem("harmonic-oscillator")
    e = flow_extremal(p, [0.0], [1.0], 0.0, 1.0)  # ends at sin(1), not qb = 1
    r = audit(p, extremal=e)
    assert r.verdict == "error" and r.reasons == ["extremal_unverified"]
    assert r.residuals is not None


# ---------------------------------------------------------------------------
# properties


@settings(max_examples=3)
@given(st.floats(3.3, 6.0))
def test_monotone_under_extension(ho_long, t1):
    p = problem("harmonic-oscillator", t1=t1, qb=[math.sin(t1)])
    r = audit(p, extremal=flow_extremal(p, [0.0], [1.0], 0.0, t1))
    assert r.verdict == "not_minimum" and "conjugate" in r.reasons
    assert abs(r.conjugate_times[0]["time"] - math.pi) <= 1e-6


def test_deterministic_json():
    p = problem("heisenberg")
    a = json.loads(render_report(audit(p)))
    b = json.loads(render_report(audit(p)))
    a.pop("elapsed_seconds"), b.pop("elapsed_seconds")
    assert a == b


# ---------------------------------------------------------------------------
# rendering


def test_minimum_json_schema(ho_short):
    d = json.loads(render_report(ho_short))
    assert d["verdict"] == "minimum" and d["certificate"] is not None
    assert "traces" not in d
    assert set(d["tolerances"]) >= {"ode_tol", "rank_rtol", "root_tol", "psd_tol"}


def test_not_minimum_json_reasons(ho_long_report):
    d = json.loads(render_report(ho_long_report))
    assert "conjugate" in d["reasons"]


def test_json_round_trip(ho_long_report):
    d = json.loads(render_report(ho_long_report))
    again = AuditReport.from_dict(d)
    assert render_report(again) == render_report(ho_long_report)


def test_text_rendering(ho_long_report, ho_short):
    text = render_report(ho_long_report, "text")
    assert text.startswith("verdict: not_minimum\n")
    assert "conjugate times: 3.14159265" in text
    assert "witness:" in text
    assert "certificate: pass" in render_report(ho_short, "text")


def test_unknown_format(ho_short):
    with pytest.raises(ValueError):
        render_report(ho_short, "yaml")


def test_traces(ho_short):
    r = audit(problem("harmonic-oscillator", t1=1.5), traces=True)
    d = r.as_dict(traces=True)
    assert len(d["traces"]["det_B"]["t"]) == 401
    assert np.allclose(d["traces"]["det_B"]["det_B"][-1], math.sin(1.5), atol=1e-8)
    assert "det_K_trace" in d["certificate"]
