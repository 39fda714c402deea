"""The decision procedure: extremal, regularity, G-spectrum, normality,
conjugate points and the sufficiency certificate, folded into one report."""

from __future__ import annotations

import json
import time
from dataclasses import asdict, dataclass, field

import numpy as np

from . import numerics
from .fields import provider
from .jacobi import WitnessError, conjugate_points, g_indefinite_witness, negative_witness, transition_matrices
from .normality import abnormality_space, local_normality_scan
from .pontryagin import SHOOT_TOL, Extremal, PontryaginError, regularity_scan, shoot, verify_extremal
from .problem import ControlProblem
from .riccati import sufficiency_certificate

EXIT_CODES = {"minimum": 0, "not_minimum": 1, "inconclusive": 2, "error": 3}
TIMING_FIELDS = ("elapsed_seconds",)


@dataclass
class AuditReport:
    verdict: str
    reasons: list[str] = field(default_factory=list)
    problem: dict = field(default_factory=dict)
    extremal: dict | None = None
    residuals: dict | None = None
    regularity: dict | None = None
    g_spectrum: dict | None = None
    abnormality: dict | None = None
    conjugate_times: list[dict] | None = None
    certificate: dict | None = None
    witness: dict | None = None
    tolerances: dict = field(default_factory=dict)
    message: str | None = None
    traces: dict | None = None
    elapsed_seconds: float = 0.0

    @property
    def exit_code(self) -> int:
        return EXIT_CODES[self.verdict]

    def as_dict(self, traces: bool = False) -> dict:
        d = asdict(self)
        if not traces:
            d.pop("traces")
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "AuditReport":
        return cls(**d)


def _problem_summary(p: ControlProblem) -> dict:
    return {
        "builtin": p.builtin,
        "n": p.n,
        "r": p.r,
        "t0": p.t0,
        "t1": p.t1,
        "qa": list(p.qa),
        "qb": list(p.qb),
    }


def _extremal_summary(e: Extremal) -> dict:
    return {
        "source": e.source,
        "p0": None if e.p0 is None else [float(x) for x in e.p0],
        "shooting_residual": e.shooting_residual,
        "branch_jumps": [[float(t), float(j)] for t, j in e.branch_jumps],
    }


def g_spectrum(e: Extremal, grid: int = 200) -> dict:
    fp = provider(e)
    lo, hi, where = np.inf, -np.inf, e.t0
    for t in np.linspace(e.t0, e.t1, grid):
        a, b = numerics.sym_eig_range(fp.matrices(t)[4])
        if a < lo:
            lo, where = a, float(t)
        hi = max(hi, b)
    return {"lambda_min": float(lo), "lambda_max": float(hi), "t_lambda_min": where}


def audit(
    problem: ControlProblem,
    extremal: Extremal | None = None,
    window_count: int = 8,
    traces: bool = False,
    jobs: int = 1,
) -> AuditReport:
    start = time.perf_counter()
    opts = problem.options
    report = AuditReport(verdict="error", problem=_problem_summary(problem), tolerances=opts.as_dict())

    def done(verdict: str, *reasons: str) -> AuditReport:
        report.verdict = verdict
        report.reasons.extend(reasons)
        report.elapsed_seconds = time.perf_counter() - start
        return report

    # (1) extremal
    try:
        e = extremal if extremal is not None else shoot(problem)
    except (PontryaginError, numerics.IntegrationError) as exc:
        report.message = str(exc)
        return done("error", "shooting_failed")
    report.extremal = _extremal_summary(e)
    res = verify_extremal(e)
    report.residuals = res.as_dict()
    if not res.passed:
        report.message = "extremal fails the Pontryagin residual checks"
        return done("error", "extremal_unverified")
    if (e.t0, e.t1) != (problem.t0, problem.t1):
        report.message = f"extremal spans [{e.t0}, {e.t1}], problem spans [{problem.t0}, {problem.t1}]"
        return done("error", "extremal_unverified")
    gap = max(
        float(np.max(np.abs(e.state(e.t0)[0] - np.asarray(problem.qa)))),
        float(np.max(np.abs(e.state(e.t1)[0] - np.asarray(problem.qb)))),
    )
    report.residuals["boundary"] = gap
    if gap > SHOOT_TOL:
        report.message = f"extremal misses the boundary values by {gap:.3e}"
        return done("error", "extremal_unverified")

    # (2) regularity
    reg = regularity_scan(e)
    report.regularity = {"min_abs_det": reg.min_abs_det, "t": reg.t_min}
    if reg.min_abs_det <= opts.psd_tol:
        return done("inconclusive", "regularity")

    # (3) G spectrum
    spec = g_spectrum(e)
    report.g_spectrum = spec
    if spec["lambda_min"] < -opts.psd_tol:
        try:
            report.witness = g_indefinite_witness(e).as_dict()
        except (WitnessError, numerics.IntegrationError, np.linalg.LinAlgError) as exc:
            report.message = f"witness unavailable: {exc}"
        return done("not_minimum", "G_indefinite")
    if abs(spec["lambda_min"]) <= opts.psd_tol:
        return done("inconclusive", "G_semidefinite")

    # (4) local normality
    scan = local_normality_scan(e, window_count, jobs=jobs)
    whole = abnormality_space(e, e.t0, e.t1)
    report.abnormality = {"global": whole.as_dict(), **scan.as_dict()}
    if not scan.locally_normal:
        return done("inconclusive", "abnormal")

    # (5) conjugate points on (t0, t1]
    tm = transition_matrices(e, e.t0, e.t1)
    cps = conjugate_points(e, e.t1, tm=tm)
    report.conjugate_times = [c.as_dict() for c in cps]
    if traces:
        ts = np.linspace(e.t0, e.t1, 401)
        report.traces = {"det_B": {"t": ts.tolist(), "det_B": [float(np.linalg.det(tm.B(t))) for t in ts]}}
    interior = [c for c in cps if c.time < e.t1 - opts.root_tol]
    B1 = tm.B(e.t1)
    s1 = np.linalg.svd(B1, compute_uv=False)
    boundary = any(c.time >= e.t1 - opts.root_tol for c in cps) or s1[-1] <= opts.rank_rtol * s1[0]
    if interior:
        tau = interior[0].time
        try:
            report.witness = negative_witness(e, tau).as_dict()
        except (WitnessError, numerics.IntegrationError, np.linalg.LinAlgError) as exc:
            report.message = f"not a minimum by the conjugate-point criterion; witness unavailable: {exc}"
        return done("not_minimum", "conjugate")
    if boundary:
        return done("inconclusive", "boundary_conjugate")

    # (6) sufficiency certificate
    cert = sufficiency_certificate(e)
    report.certificate = cert.as_dict(traces=traces)
    if cert.passed:
        return done("minimum")
    return done("inconclusive", "certificate_unavailable")


# ---------------------------------------------------------------------------
# rendering


def _jsonable(x):
    if isinstance(x, dict):
        return {k: _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, np.generic):
        return x.item()
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    return x


def render_json(d: dict) -> str:
    return json.dumps(_jsonable(d), indent=2) + "\n"


def _fmt(x) -> str:
    return "n/a" if x is None else f"{x:.6g}"


def render_report(r: AuditReport, fmt: str = "json", traces: bool = False) -> str:
    if fmt == "json":
        return render_json(r.as_dict(traces=traces))
    if fmt != "text":
        raise ValueError(f"unknown format {fmt!r}")
    lines = [f"verdict: {r.verdict}"]
    if r.reasons:
        lines.append(f"reasons: {', '.join(r.reasons)}")
    p = r.problem
    lines.append(f"problem: {p.get('builtin') or 'custom'} (n={p.get('n')}, r={p.get('r')}) on [{p.get('t0')}, {p.get('t1')}]")
    if r.message:
        lines.append(f"note: {r.message}")
    if r.extremal and r.extremal.get("p0") is not None:
        lines.append(f"initial costate: {', '.join(f'{x:.9g}' for x in r.extremal['p0'])}")
    if r.residuals:
        res = r.residuals
        lines.append(
            f"residuals: admissibility {_fmt(res['admissibility'])}, costate {_fmt(res['costate'])}, "
            f"stationarity {_fmt(res['stationarity'])}"
        )
    if r.regularity:
        lines.append(f"regularity: min |det G| = {_fmt(r.regularity['min_abs_det'])} at t = {_fmt(r.regularity['t'])}")
    if r.g_spectrum:
        g = r.g_spectrum
        lines.append(f"G spectrum: [{_fmt(g['lambda_min'])}, {_fmt(g['lambda_max'])}]")
    if r.abnormality:
        dims = [w["dim"] for w in r.abnormality["windows"]]
        lines.append(f"abnormality: global dim {r.abnormality['global']['dim']}, window dims {dims}")
    if r.conjugate_times is not None:
        if r.conjugate_times:
            cs = ", ".join(f"{c['time']:.9g} (mult {c['multiplicity']})" for c in r.conjugate_times)
            lines.append(f"conjugate times: {cs}")
        else:
            lines.append("conjugate times: none")
    if r.certificate:
        c = r.certificate
        lines.append(f"certificate: {'pass' if c['pass'] else 'fail'} ({c['mode']}), min |det K| = {_fmt(c['min_abs_det_K'])}")
    if r.witness:
        lines.append(f"witness: {r.witness['kind']} deformation with second variation {r.witness['value']:.6g}")
    return "\n".join(lines) + "\n"
