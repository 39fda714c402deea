"""Matrix Riccati equation, its linearization (K, E), and the sufficiency certificate."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .fields import provider
from .pontryagin import Extremal, NewtonFailure, PontryaginError


# above this norm direct integration only tracks the approach to escape
TAIL_NORM = 1e3
TAIL_RTOL_FACTOR = 100.0


class RiccatiError(RuntimeError):
    pass


class AsymmetryError(RiccatiError):
    pass


def _norm(C: np.ndarray) -> float:
    return float(np.linalg.norm(C, 2))


def _asym(C: np.ndarray) -> float:
    return float(np.linalg.norm(C - C.T, 2))


def riccati_rhs(T, M, N, C):
    """``dC/dt = tau C + C tau^T + C M C - N``."""
    return T @ C + C @ T.T + C @ M @ C - N


@dataclass
class RiccatiSolution:
    ta: float
    tb: float  # end of the interval on which C is defined
    escape_time: float | None
    max_asymmetry: float  # max of |C - C^T| / (1 + |C|) on the defining grid
    mode: str  # "direct" or "fromKE"
    _C: object = field(repr=False, default=None)
    n: int = 1
    riccati_residual: float | None = None

    def C(self, t) -> np.ndarray:
        return self._C(t)

    def residual(self, e: Extremal, grid: int = 200, h: float | None = None, margin: float = 0.05) -> float:
        """Sup over a grid of the Riccati residual, dC/dt by central differences.

        Measured relative to ``1 + |C|^2``; when an escape time is known the
        last ``margin`` fraction of the span before it is skipped.
        """
        fp = provider(e)
        lo, hi = min(self.ta, self.tb), max(self.ta, self.tb)
        if self.escape_time is not None:
            cut = margin * (hi - lo)
            lo, hi = (lo, hi - cut) if self.escape_time >= hi - 1e-12 else (lo + cut, hi)
        h = 1e-5 * (hi - lo) if h is None else h
        worst = 0.0
        for t in np.linspace(lo + 2 * h, hi - 2 * h, grid):
            dC = (8 * (self.C(t + h) - self.C(t - h)) - (self.C(t + 2 * h) - self.C(t - 2 * h))) / (12 * h)
            T, M, N, *_ = fp.matrices(t)
            C = self.C(t)
            worst = max(worst, float(np.max(np.abs(dC - riccati_rhs(T, M, N, C)))) / (1 + _norm(C) ** 2))
        return worst


def _check_symmetric(C0: np.ndarray, what: str = "C0") -> None:
    if _asym(C0) > 1e-12 * (1 + _norm(C0)):
        raise AsymmetryError(f"{what} is not symmetric")


def integrate_riccati(e: Extremal, C0, ta: float | None = None, tb: float | None = None) -> RiccatiSolution:
    """Direct integration; blow-up is declared when ``|C| > riccati_cap`` or steps collapse."""
    ta = e.t0 if ta is None else ta
    tb = e.t1 if tb is None else tb
    n = e.n
    C0 = np.asarray(C0, dtype=float).reshape(n, n)
    _check_symmetric(C0)
    opts = e.problem.options
    fp = provider(e)

    def rhs(t, y):
        T, M, N, *_ = fp.matrices(t)
        return riccati_rhs(T, M, N, y.reshape(n, n)).ravel()

    # Frobenius norms here: checked every step, and within sqrt(n) of the spectral norm
    def blown(t, y):
        return float(np.linalg.norm(y)) > opts.riccati_cap

    def run(a, b, y0, rtol, stop):
        try:
            traj = numerics.integrate(rhs, y0, a, b, rtol=rtol, atol=rtol, terminate=stop)
            return traj, False
        except numerics.StepCollapseError as exc:
            # rerun to just before the collapse point to keep a usable trajectory
            return numerics.integrate(rhs, y0, a, exc.t, rtol=rtol, atol=rtol, terminate=stop), True

    def large(t, y):
        return float(np.linalg.norm(y)) > TAIL_NORM

    # tighten until the dense output meets the residual bound (its derivative lags the step accuracy);
    # once |C| is large the run only has to find the escape, so the tail uses a looser rtol
    rtol = opts.ode_tol * 1e-2
    while True:
        traj, collapsed = run(ta, tb, C0.ravel(), rtol, large)
        escape = traj.tb if collapsed else None
        if traj.terminated:
            tail, collapsed = run(traj.tb, tb, traj.ys[-1], TAIL_RTOL_FACTOR * opts.ode_tol, blown)
            traj = numerics.Trajectory.concatenate([traj, tail])
            escape = traj.tb if (collapsed or traj.terminated) else None
        probe = RiccatiSolution(ta, traj.tb, escape, 0.0, "direct", lambda t, tr=traj: tr(t).reshape(n, n), n)
        residual = probe.residual(e)
        if residual <= 50 * opts.ode_tol or rtol <= opts.ode_tol * 1e-4:
            break
        rtol /= 10
    worst = 0.0
    for y in traj.ys:
        C = y.reshape(n, n)
        a = _asym(C) / (1 + _norm(C))
        worst = max(worst, a)
        if a > 1e-6:
            raise AsymmetryError(f"Riccati solution lost symmetry (relative asymmetry {a:.3e})")
    return RiccatiSolution(
        ta=float(ta),
        tb=float(traj.tb),
        escape_time=None if escape is None else float(escape),
        max_asymmetry=worst,
        mode="direct",
        _C=lambda t: traj(t).reshape(n, n),
        n=n,
        riccati_residual=residual,
    )


@dataclass
class LinearKE:
    trajectory: numerics.Trajectory
    n: int
    e: Extremal | None = None

    @property
    def ta(self) -> float:
        return self.trajectory.ta

    @property
    def tb(self) -> float:
        return self.trajectory.tb

    def K(self, t) -> np.ndarray:
        return self.trajectory(t)[: self.n * self.n].reshape(self.n, self.n)

    def E(self, t) -> np.ndarray:
        return self.trajectory(t)[self.n * self.n :].reshape(self.n, self.n)

    def det_K(self, t) -> float:
        return float(np.linalg.det(self.K(t)))

    def residual(self, e: Extremal, grid: int = 200) -> float:
        fp = provider(e)
        n = self.n
        worst = 0.0
        for t in np.linspace(self.trajectory.t_min, self.trajectory.t_max, grid):
            T, M, N, *_ = fp.matrices(t)
            d = self.trajectory.derivative(t)
            K, E = self.K(t), self.E(t)
            rk = d[: n * n].reshape(n, n) - (M @ E - T.T @ K + K @ T.T)
            re = d[n * n :].reshape(n, n) - (N @ K + T @ E + E @ T.T)
            worst = max(worst, float(np.max(np.abs(rk))), float(np.max(np.abs(re))))
        return worst


def linear_KE(e: Extremal, K0, E0, ta: float | None = None, tb: float | None = None) -> LinearKE:
    """``dK/dt = M E - tau^T K + K tau^T``, ``dE/dt = N K + tau E + E tau^T``."""
    ta = e.t0 if ta is None else ta
    tb = e.t1 if tb is None else tb
    n = e.n
    fp = provider(e)

    def rhs(t, y):
        T, M, N, *_ = fp.matrices(t)
        K = y[: n * n].reshape(n, n)
        E = y[n * n :].reshape(n, n)
        return np.concatenate([(M @ E - T.T @ K + K @ T.T).ravel(), (N @ K + T @ E + E @ T.T).ravel()])

    tol = e.problem.options.ode_tol
    y0 = np.concatenate([np.asarray(K0, float).reshape(n, n).ravel(), np.asarray(E0, float).reshape(n, n).ravel()])
    traj = numerics.integrate_consistent(rhs, y0, ta, tb, tol, atol_factor=1e-6)
    return LinearKE(traj, n, e)


def _det_threshold(K: np.ndarray) -> float:
    return 1e-12 * max(_norm(K), 1e-300) ** K.shape[0]


def riccati_from_KE(ke: LinearKE, root_tol: float = 1e-9) -> RiccatiSolution:
    """``C = -E K^-1`` up to the first zero of det K."""
    n = ke.n
    K0 = ke.K(ke.ta)
    if abs(np.linalg.det(K0)) <= _det_threshold(K0):
        raise RiccatiError("det K vanishes at the start of the span")

    def g(t, y):
        return float(np.linalg.det(y[: n * n].reshape(n, n)))

    roots = numerics.locate_roots(ke.trajectory, g, root_tol)
    if ke.trajectory.direction > 0:
        escape = roots[0] if roots else None
    else:
        escape = roots[-1] if roots else None
    end = ke.tb if escape is None else escape

    def C(t):
        return -ke.E(t) @ np.linalg.inv(ke.K(t))

    worst = 0.0
    lo, hi = sorted((ke.ta, end))
    for t in np.linspace(lo, hi, 201)[:-1] if escape is not None else np.linspace(lo, hi, 201):
        if escape is not None and abs(t - escape) < 1e-6 * (hi - lo):
            continue
        Ct = C(t)
        worst = max(worst, _asym(Ct) / (1 + _norm(Ct)))
    sol = RiccatiSolution(
        ta=float(ke.ta),
        tb=float(end),
        escape_time=None if escape is None else float(escape),
        max_asymmetry=worst,
        mode="fromKE",
        _C=C,
        n=n,
    )
    if ke.e is not None:
        sol.riccati_residual = sol.residual(ke.e)
        if sol.riccati_residual > 1e-6:
            raise RiccatiError(f"reconstructed C fails the Riccati equation (residual {sol.riccati_residual:.3e})")
    return sol


def riccati_csv(e: Extremal, sol: RiccatiSolution, ke: LinearKE | None = None, samples: int = 401) -> str:
    """Columns: t, vec(C), det_K, asymmetry."""
    n = e.n
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + [f"C{i + 1}{j + 1}" for i in range(n) for j in range(n)] + ["det_K", "asymmetry"])
    lo, hi = sorted((sol.ta, sol.tb))
    for t in np.linspace(lo, hi, samples):
        try:
            C = sol.C(t)
        except np.linalg.LinAlgError:
            continue
        detk = ke.det_K(t) if ke is not None and ke.trajectory.t_min <= t <= ke.trajectory.t_max else float("nan")
        w.writerow([repr(float(v)) for v in np.concatenate([[t], C.ravel(), [detk, _asym(C)]])])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# certificate


@dataclass
class SufficiencyCertificate:
    passed: bool
    mode: str  # "anchored", "forward" or "unavailable"
    t_star: float | None
    min_abs_det_K: float | None
    det_K_roots: list[float]
    symmetry_drift: float | None
    trace_t: np.ndarray | None = None
    trace_det_K: np.ndarray | None = None
    attempts: list[str] = field(default_factory=list)
    ke: LinearKE | None = None

    @property
    def available(self) -> bool:
        return self.mode != "unavailable"

    def as_dict(self, traces: bool = False) -> dict:
        d = {
            "pass": self.passed,
            "mode": self.mode,
            "t_star": self.t_star,
            "min_abs_det_K": self.min_abs_det_K,
            "det_K_roots": list(self.det_K_roots),
            "symmetry_drift": self.symmetry_drift,
            "attempts": list(self.attempts),
        }
        if traces and self.trace_t is not None:
            d["det_K_trace"] = {"t": [float(x) for x in self.trace_t], "det_K": [float(x) for x in self.trace_det_K]}
        return d


def _check_KE(e: Extremal, ke: LinearKE, lo: float, hi: float, exclude_hi: float = 0.0):
    """Roots of det K on [lo, hi - exclude_hi], min |det K| and C asymmetry on e's [t0, t1]."""
    n = e.n
    opts = e.problem.options

    def g(t, y):
        return float(np.linalg.det(y[: n * n].reshape(n, n)))

    roots = numerics.locate_roots(ke.trajectory, g, opts.root_tol, start=lo, end=hi - exclude_hi)
    ts = np.linspace(lo, hi - exclude_hi, 401)
    ts = np.union1d(ts, [t for t in (e.t0, e.t1) if lo <= t <= hi - exclude_hi])
    dets = np.array([ke.det_K(t) for t in ts])
    inside = (ts >= e.t0) & (ts <= e.t1)
    min_abs = float(np.min(np.abs(dets[inside])))
    drift = 0.0
    if not roots:
        for t in ts[inside]:
            C = -ke.E(t) @ np.linalg.inv(ke.K(t))
            drift = max(drift, _asym(C) / (1 + _norm(C)))
    return roots, min_abs, drift, ts, dets


def sufficiency_certificate(e: Extremal) -> SufficiencyCertificate:
    """Anchored backward (K, E) run from ``t* > t1``; forward fallback from ``K(t0) = I``."""
    opts = e.problem.options
    n = e.n
    span = e.t1 - e.t0
    attempts = []
    if e.extendable:
        frac = opts.extension_fraction
        for _ in range(3):
            t_star = e.t1 + frac * span
            try:
                ext = e.extend(t_star)
                ke = linear_KE(ext, np.zeros((n, n)), np.eye(n), t_star, e.t0)
            except (numerics.IntegrationError, PontryaginError, NewtonFailure, np.linalg.LinAlgError) as exc:
                attempts.append(f"extension to t*={t_star:.12g} failed: {exc}")
                frac /= 2
                continue
            delta = 1e-6 * span
            roots, min_abs, drift, ts, dets = _check_KE(e, ke, e.t0, t_star, exclude_hi=delta)
            ok = not roots and min_abs > 0 and drift <= 1e-8
            attempts.append(f"anchored at t*={t_star:.12g}: {'pass' if ok else 'fail'}")
            return SufficiencyCertificate(ok, "anchored", float(t_star), min_abs, roots, drift, ts, dets, attempts, ke)
    else:
        attempts.append("extremal is not extendable")
    try:
        ke = linear_KE(e, np.eye(n), np.zeros((n, n)), e.t0, e.t1)
        roots, min_abs, drift, ts, dets = _check_KE(e, ke, e.t0, e.t1)
    except (numerics.IntegrationError, PontryaginError, np.linalg.LinAlgError) as exc:
        attempts.append(f"forward mode failed: {exc}")
        return SufficiencyCertificate(False, "unavailable", None, None, [], None, attempts=attempts)
    ok = not roots and min_abs > 0 and drift <= 1e-8
    attempts.append(f"forward from t0: {'pass' if ok else 'fail'}")
    return SufficiencyCertificate(ok, "forward", None, min_abs, roots, drift, ts, dets, attempts, ke)
