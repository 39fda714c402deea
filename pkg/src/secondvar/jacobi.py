"""Jacobi pairs, transition matrices, conjugate points, the second variation and
negative-value witnesses."""

from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from scipy.integrate import quad, quad_vec

from . import numerics
from .fields import HFrame, h_frame, provider
from .pontryagin import Extremal

# Jacobi-type systems are linear; a small absolute floor keeps the error control
# relative so that components which start at zero (B(t0) = 0) keep their sign.
ATOL_FACTOR = 1e-6


def _tols(e: Extremal):
    tol = e.problem.options.ode_tol * 1e-2
    return tol, tol * ATOL_FACTOR


def _integrate(e: Extremal, rhs, y0, ta: float, tb: float) -> numerics.Trajectory:
    return numerics.integrate_consistent(rhs, y0, ta, tb, e.problem.options.ode_tol, atol_factor=ATOL_FACTOR)


# ---------------------------------------------------------------------------
# Jacobi pairs


@dataclass
class JacobiPair:
    """Solution ``(X, pi)`` of ``dX/dt = -tau^T X + M pi``, ``dpi/dt = tau pi + N X``."""

    e: Extremal
    trajectory: numerics.Trajectory

    @property
    def n(self) -> int:
        return self.e.n

    @property
    def ta(self) -> float:
        return self.trajectory.t_min

    @property
    def tb(self) -> float:
        return self.trajectory.t_max

    def X(self, t) -> np.ndarray:
        return self.trajectory(t)[: self.n]

    def pi(self, t) -> np.ndarray:
        return self.trajectory(t)[self.n :]

    def Y(self, t) -> np.ndarray:
        """Vertical component ``G^-1 B^T pi``."""
        _, _, _, B, _, Gi, _ = provider(self.e).matrices(t)
        return Gi @ B.T @ self.pi(t)

    def Gamma(self, t) -> np.ndarray:
        """Control variation ``Y + h X`` entering the variational equation."""
        h = provider(self.e).matrices(t)[6]
        return self.Y(t) + h @ self.X(t)

    def jacobi_residual(self, grid: int = 200) -> float:
        fp = provider(self.e)
        n = self.n
        worst = 0.0
        for t in np.linspace(self.ta, self.tb, grid):
            T, M, N, *_ = fp.matrices(t)
            y, dy = self.trajectory(t), self.trajectory.derivative(t)
            X, P = y[:n], y[n:]
            res = np.concatenate([dy[:n] + T.T @ X - M @ P, dy[n:] - T @ P - N @ X])
            worst = max(worst, float(np.max(np.abs(res))))
        return worst

    def variational_residual(self, grid: int = 200) -> float:
        """Sup of ``|dX/dt - psi_q X - psi_z Gamma|``."""
        from .problem import derivative_oracle

        D = derivative_oracle(self.e.problem)
        worst = 0.0
        for t in np.linspace(self.ta, self.tb, grid):
            q, _, z = self.e.state(t)
            dX = self.trajectory.derivative(t)[: self.n]
            res = dX - D.psi_q(t, q, z) @ self.X(t) - D.psi_z(t, q, z) @ self.Gamma(t)
            worst = max(worst, float(np.max(np.abs(res))))
        return worst


def _jacobi_rhs(e: Extremal, columns: int):
    fp = provider(e)
    n = e.n

    def rhs(t, y):
        T, M, N, *_ = fp.matrices(t)
        Z = y.reshape(2 * n, columns)
        X, P = Z[:n], Z[n:]
        return np.vstack([-T.T @ X + M @ P, T @ P + N @ X]).ravel()

    return rhs


def propagate_jacobi(e: Extremal, X0, pi0, ta: float | None = None, tb: float | None = None) -> JacobiPair:
    ta = e.t0 if ta is None else ta
    tb = e.t1 if tb is None else tb
    y0 = np.concatenate([np.asarray(X0, float), np.asarray(pi0, float)])
    traj = _integrate(e, _jacobi_rhs(e, 1), y0, ta, tb)
    return JacobiPair(e, traj)


def lagrange_bracket(j1: JacobiPair, j2: JacobiPair, t: float) -> float:
    return float(j1.pi(t) @ j2.X(t) - j2.pi(t) @ j1.X(t))


# ---------------------------------------------------------------------------
# transition matrices


@dataclass
class TransitionMatrices:
    """``X(t) = A X0 + B pi0`` and ``pi(t) = C X0 + D pi0`` from ``t0``."""

    trajectory: numerics.Trajectory
    n: int
    t0: float
    frame: HFrame | None = None  # set when propagated in the h-frame

    def _blocks(self, t):
        n = self.n
        Z = self.trajectory(t).reshape(2 * n, 2 * n)
        return Z[:n, :n], Z[:n, n:], Z[n:, :n], Z[n:, n:]

    def A(self, t):
        return self._blocks(t)[0]

    def B(self, t):
        return self._blocks(t)[1]

    def C(self, t):
        return self._blocks(t)[2]

    def D(self, t):
        return self._blocks(t)[3]


def transition_matrices(e: Extremal, t0: float | None = None, t_end: float | None = None) -> TransitionMatrices:
    """All 2n canonical propagations, integrated together as one matrix system."""
    t0 = e.t0 if t0 is None else t0
    t_end = e.t1 if t_end is None else t_end
    n = e.n
    rtol, atol = _tols(e)
    traj = numerics.integrate(_jacobi_rhs(e, 2 * n), np.eye(2 * n).ravel(), t0, t_end, rtol=rtol, atol=atol)
    return TransitionMatrices(traj, n, t0)


def frame_transition_matrices(e: Extremal, t0: float | None = None, t_end: float | None = None) -> TransitionMatrices:
    """Transition matrices of the frame form ``dX'/dt = M' pi'``, ``dpi'/dt = N' X'``.

    ``M' = e^-1 M e^-T`` and ``N' = e^T N e`` with e the h-transported frame;
    ``B`` of the frame system equals ``e^-1`` times the coordinate ``B``.
    """
    t0 = e.t0 if t0 is None else t0
    t_end = e.t1 if t_end is None else t_end
    n = e.n
    fr = h_frame(e, t0, t_end)
    fp = provider(e)

    def rhs(t, y):
        _, M, N, *_ = fp.matrices(t)
        E = fr.trajectory(t).reshape(n, n)
        Ei = np.linalg.inv(E)
        Z = y.reshape(2 * n, 2 * n)
        return np.vstack([Ei @ M @ Ei.T @ Z[n:], E.T @ N @ E @ Z[:n]]).ravel()

    rtol, atol = _tols(e)
    traj = numerics.integrate(rhs, np.eye(2 * n).ravel(), t0, t_end, rtol=rtol, atol=atol)
    return TransitionMatrices(traj, n, t0, frame=fr)


# ---------------------------------------------------------------------------
# conjugate points


@dataclass(frozen=True)
class ConjugatePoint:
    time: float
    sigma_min: float
    multiplicity: int

    def as_dict(self) -> dict:
        return {"time": self.time, "sigma_min": self.sigma_min, "multiplicity": self.multiplicity}


def conjugate_points(
    e: Extremal, t_end: float | None = None, frame: bool = False, tm: TransitionMatrices | None = None
) -> list[ConjugatePoint]:
    """Zeros of ``det B(t, t0)`` on ``(t0 + delta, t_end]`` with ``delta = 1e-6 (t1 - t0)``."""
    t_end = e.t1 if t_end is None else t_end
    if tm is None:
        tm = frame_transition_matrices(e, e.t0, t_end) if frame else transition_matrices(e, e.t0, t_end)
    n = e.n
    opts = e.problem.options
    delta = 1e-6 * (e.t1 - e.t0)

    def det_b(t, y):
        return float(np.linalg.det(y.reshape(2 * n, 2 * n)[:n, n:]))

    roots = numerics.locate_roots(tm.trajectory, det_b, opts.root_tol, start=e.t0 + delta, end=t_end)
    out = []
    for tau in roots:
        s = np.linalg.svd(tm.B(tau), compute_uv=False)
        mult = n - numerics.numerical_rank(tm.B(tau), opts.rank_rtol)
        out.append(ConjugatePoint(float(tau), float(s[-1]), max(mult, 1)))
    return out


def conjugate_scan_csv(e: Extremal, t_end: float | None = None, samples: int = 401) -> str:
    """Columns: t, det_B, sigma_min_B."""
    tm = transition_matrices(e, e.t0, e.t1 if t_end is None else t_end)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t", "det_B", "sigma_min_B"])
    for t in np.linspace(tm.trajectory.t_min, tm.trajectory.t_max, samples):
        Bm = tm.B(t)
        w.writerow([repr(float(t)), repr(float(np.linalg.det(Bm))), repr(float(np.linalg.svd(Bm, compute_uv=False)[-1]))])
    return buf.getvalue()


# ---------------------------------------------------------------------------
# deformations and the second variation


@dataclass
class Deformation:
    """Variation ``X`` of the configuration generated by a vertical field ``Y``."""

    e: Extremal
    trajectory: numerics.Trajectory
    Y_fn: Callable[[float], np.ndarray]
    breakpoints: tuple[float, ...] = ()
    scale: float = 1.0

    @property
    def ta(self) -> float:
        return self.trajectory.t_min

    @property
    def tb(self) -> float:
        return self.trajectory.t_max

    def X(self, t) -> np.ndarray:
        return self.scale * self.trajectory(t)

    def Y(self, t) -> np.ndarray:
        return self.scale * np.asarray(self.Y_fn(t), dtype=float)

    @property
    def endpoint_values(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X(self.ta), self.X(self.tb)

    def scaled(self, factor: float) -> "Deformation":
        return Deformation(self.e, self.trajectory, self.Y_fn, self.breakpoints, self.scale * factor)

    def variational_residual(self, grid: int = 200) -> float:
        fp = provider(self.e)
        worst = 0.0
        for t in np.linspace(self.ta, self.tb, grid):
            if any(abs(t - b) < 1e-9 for b in self.breakpoints):
                continue
            T, _, _, B, *_ = fp.matrices(t)
            res = self.scale * self.trajectory.derivative(t) + T.T @ self.X(t) - B @ self.Y(t)
            worst = max(worst, float(np.max(np.abs(res))))
        return worst


def deformation_from_vertical(
    e: Extremal,
    Y: Callable[[float], np.ndarray],
    X0=None,
    ta: float | None = None,
    tb: float | None = None,
    breakpoints=(),
) -> Deformation:
    """Integrate ``dX/dt = -tau^T X + B Y`` from ``X(ta) = X0``."""
    ta = e.t0 if ta is None else ta
    tb = e.t1 if tb is None else tb
    fp = provider(e)
    X0 = np.zeros(e.n) if X0 is None else np.asarray(X0, float)
    breaks = sorted(b for b in breakpoints if ta < b < tb)

    def rhs(t, x):
        T, _, _, B, *_ = fp.matrices(t)
        return -T.T @ x + B @ np.asarray(Y(t), dtype=float)

    # integrate piece by piece so that kinks of Y sit on step boundaries
    nodes = [ta] + breaks + [tb]
    pieces = []
    x = X0
    for a, b in zip(nodes[:-1], nodes[1:]):
        piece = _integrate(e, rhs, x, a, b)
        pieces.append(piece)
        x = piece.ys[-1]
    traj = numerics.Trajectory.concatenate(pieces)
    return Deformation(e, traj, Y, tuple(breaks))


def _quad(f, a, b, points=()) -> float:
    pts = [p for p in points if a < p < b]
    val, _ = quad(f, a, b, epsrel=1e-11, epsabs=1e-13, limit=500, points=pts or None)
    return float(val)


def _integrate_pieces(f, a, b, breaks) -> float:
    nodes = [a] + sorted(x for x in breaks if a < x < b) + [b]
    return sum(_quad(f, lo, hi) for lo, hi in zip(nodes[:-1], nodes[1:]))


def _fixed_endpoint_warning(d) -> None:
    X_a, X_b = d.X(d.ta), d.X(d.tb)
    if max(np.max(np.abs(X_a)), np.max(np.abs(X_b))) > 1e-6 * max(1.0, _sup(d)):
        warnings.warn("deformation does not vanish at the end-points", stacklevel=3)


def _sup(d) -> float:
    return float(max(np.max(np.abs(d.X(t))) for t in np.linspace(d.ta, d.tb, 33)))


def second_variation(e: Extremal, d, warn: bool = True) -> float:
    """``int N X X + G Y Y dt`` over the deformation's span."""
    if warn:
        _fixed_endpoint_warning(d)
    return bilinear_form(e, d, d)


def bilinear_form(e: Extremal, d1, d2) -> float:
    """Symmetric bilinear form of the second variation, ``int N X1 X2 + G Y1 Y2``."""
    fp = provider(e)
    a, b = max(d1.ta, d2.ta), min(d1.tb, d2.tb)

    def f(t):
        _, _, N, _, G, *_ = fp.matrices(t)
        return float(d1.X(t) @ N @ d2.X(t) + d1.Y(t) @ G @ d2.Y(t))

    breaks = tuple(getattr(d1, "breakpoints", ())) + tuple(getattr(d2, "breakpoints", ()))
    return _integrate_pieces(f, a, b, breaks)


def _fd_derivative(C, t, h):
    return (8 * (C(t + h) - C(t - h)) - (C(t + 2 * h) - C(t - 2 * h))) / (12 * h)


def gauge_shift_integrand(e: Extremal, d, C: Callable, dC: Callable | None = None) -> float:
    """Quadrature of ``(N + DC/Dt) X X + 2 C_ij B^i_A X^j Y^A + G Y Y``.

    ``DC/Dt = dC/dt - tau C - C tau^T``; ``dC`` defaults to a fourth-order
    central difference of ``C``.
    """
    fp = provider(e)
    h = 1e-3 * (d.tb - d.ta)
    dC = dC if dC is not None else (lambda t: _fd_derivative(C, t, h))

    def f(t):
        T, _, N, B, G, *_ = fp.matrices(t)
        X, Y = d.X(t), d.Y(t)
        Ct = np.asarray(C(t), dtype=float)
        DC = np.asarray(dC(t), dtype=float) - T @ Ct - Ct @ T.T
        return float(X @ (N + DC) @ X + 2 * (B @ Y) @ Ct @ X + Y @ G @ Y)

    return _integrate_pieces(f, d.ta, d.tb, getattr(d, "breakpoints", ()))


def boundary_pairing_check(j: JacobiPair, d, a: float | None = None, b: float | None = None) -> float:
    """``|int (N X_j Z + G Y_j Y_d) dt - [pi_j . Z]_a^b|``."""
    a = max(j.ta, d.ta) if a is None else a
    b = min(j.tb, d.tb) if b is None else b
    fp = provider(j.e)

    def f(t):
        _, _, N, B, G, Gi, _ = fp.matrices(t)
        Yj = Gi @ B.T @ j.pi(t)
        return float(j.X(t) @ N @ d.X(t) + Yj @ G @ d.Y(t))

    lhs = _integrate_pieces(f, a, b, getattr(d, "breakpoints", ()))
    rhs = float(j.pi(b) @ d.X(b) - j.pi(a) @ d.X(a))
    return abs(lhs - rhs)


# ---------------------------------------------------------------------------
# witnesses


class WitnessError(RuntimeError):
    pass


@dataclass
class Witness:
    deformation: Deformation
    value: float
    kind: str  # "conjugate" or "G_indefinite"
    tau: float | None = None
    trials: int = 0
    details: dict = field(default_factory=dict)

    def as_dict(self) -> dict:
        d = {"kind": self.kind, "value": self.value, "trials": self.trials}
        if self.tau is not None:
            d["tau"] = self.tau
        d.update(self.details)
        return d


def _smoothstep(s: float) -> float:
    """C1 ramp from 0 (s <= 0) to 1 (s >= 1)."""
    if s <= 0.0:
        return 0.0
    if s >= 1.0:
        return 1.0
    return s * s * (3.0 - 2.0 * s)


class _Steering:
    """Vertical fields ``Y = w(t) B^T Phi^-T c`` steering ``dX/dt = -tau^T X + B Y``.

    ``Phi`` is the h-transported frame; ``w`` a sin^2 bump on ``[a, b]`` so the
    correction vanishes, with its derivative, at both ends.
    """

    def __init__(self, e: Extremal, frame: HFrame, a: float, b: float):
        self.e, self.frame, self.a, self.b = e, frame, a, b
        fp = provider(e)
        self.fp = fp

        def integrand(t):
            Pi = np.linalg.inv(frame.trajectory(t).reshape(e.n, e.n))
            B = fp.matrices(t)[3]
            K = Pi @ B
            return self.weight(t) * (K @ K.T)

        W, _ = quad_vec(integrand, a, b, epsrel=1e-12, epsabs=1e-14)
        self.gramian = W
        s = np.linalg.svd(W, compute_uv=False)
        if s[-1] <= 1e-10 * max(s[0], 1e-300):
            raise WitnessError(f"steering Gramian singular on [{a:.6g}, {b:.6g}] (abnormal window)")

    def weight(self, t: float) -> float:
        if not self.a <= t <= self.b:
            return 0.0
        return math.sin(math.pi * (t - self.a) / (self.b - self.a)) ** 2

    def field(self, x_a, x_b) -> Callable[[float], np.ndarray]:
        """Y on [a, b] moving X(a) = x_a to X(b) = x_b (zero outside)."""
        n = self.e.n
        Pa = np.linalg.inv(self.frame.trajectory(self.a).reshape(n, n))
        Pb = np.linalg.inv(self.frame.trajectory(self.b).reshape(n, n))
        c = np.linalg.solve(self.gramian, Pb @ np.asarray(x_b, float) - Pa @ np.asarray(x_a, float))
        fp, frame = self.fp, self.frame

        def Y(t):
            w = self.weight(t)
            if w == 0.0:
                return np.zeros(self.e.r)
            Pi = np.linalg.inv(frame.trajectory(t).reshape(n, n))
            B = fp.matrices(t)[3]
            return w * (B.T @ Pi.T @ c)

        return Y


def _sum_fields(*fields):
    return lambda t: sum(np.asarray(f(t), dtype=float) for f in fields)


def _line_search(e, d1, d2, trials: int):
    """Search ``alpha`` with ``Q(alpha d1 + d2) < 0`` using the exact quadratic expansion."""
    q11 = bilinear_form(e, d1, d1)
    q12 = bilinear_form(e, d1, d2)
    q22 = bilinear_form(e, d2, d2)
    candidates = []
    if q11 > 0:
        candidates.append(-q12 / q11)
    sign = -1.0 if q12 > 0 else 1.0
    candidates += [sign * 2.0**k for k in range(-8, 40)]
    used = 0
    for alpha in candidates[:trials]:
        used += 1
        value = alpha * alpha * q11 + 2 * alpha * q12 + q22
        if value < 0:
            return alpha, value, used
    return None, None, used


def negative_witness(e: Extremal, tau: float, width: float | None = None, max_trials: int = 64) -> Witness:
    """Fixed-endpoint deformation with negative second variation past a conjugate point ``tau``.

    The Jacobi field vanishing at ``t0`` and ``tau`` is cut off smoothly over
    ``width`` before ``tau`` (its residual at ``tau`` and the end-point are
    steered back to zero), then combined with an auxiliary deformation whose
    value at ``tau`` pairs non-trivially with the Jacobi covector.
    """
    opts = e.problem.options
    t0, t1 = e.t0, e.t1
    if not t0 < tau < t1 - opts.root_tol:
        raise ValueError("negative_witness needs t0 < tau < t1 - root_tol")
    span = t1 - t0
    w = 1e-3 * span if width is None else width
    n = e.n

    tm = transition_matrices(e, t0, tau)
    _, _, vt = np.linalg.svd(tm.B(tau))
    pi0 = vt[-1]
    jac = propagate_jacobi(e, np.zeros(n), pi0, t0, tau)
    frame = h_frame(e, t0, t1)
    after = _Steering(e, frame, tau, t1)
    before = _Steering(e, frame, t0, tau)
    fp = provider(e)

    # auxiliary W: reach the Jacobi covector direction at tau, then return to 0 at t1
    target = jac.pi(tau)
    Y_w = _sum_fields(before.field(np.zeros(n), target), after.field(target, np.zeros(n)))
    W = deformation_from_vertical(e, Y_w, ta=t0, tb=t1, breakpoints=(tau,))

    trials = 0
    while trials < max_trials:
        a = tau - w

        def Y_cut(t, a=a):
            if t >= tau:
                return np.zeros(e.r)
            _, _, _, B, _, Gi, _ = fp.matrices(t)
            return (1.0 - _smoothstep((t - a) / w)) * (Gi @ B.T @ jac.pi(t))

        cut = deformation_from_vertical(e, Y_cut, ta=t0, tb=tau, breakpoints=(a,))
        fix = after.field(cut.X(tau), np.zeros(n))
        Y1 = lambda t, c=Y_cut, f=fix: c(t) + f(t)  # noqa: E731
        d1 = deformation_from_vertical(e, Y1, ta=t0, tb=t1, breakpoints=(a, tau))
        alpha, predicted, used = _line_search(e, d1, W, max_trials - trials)
        trials += used
        if alpha is not None:
            Y = lambda t, al=alpha, y1=Y1: al * np.asarray(y1(t)) + np.asarray(Y_w(t))  # noqa: E731
            d = deformation_from_vertical(e, Y, ta=t0, tb=t1, breakpoints=(a, tau))
            value = second_variation(e, d, warn=False)
            if value < 0:
                return Witness(
                    d,
                    value,
                    "conjugate",
                    tau=float(tau),
                    trials=trials,
                    details={
                        "alpha": float(alpha),
                        "width": float(w),
                        "predicted_value": float(predicted),
                        "endpoint_norm": float(np.max(np.abs(d.X(t1)))),
                    },
                )
        w *= 0.5
    raise WitnessError(f"no negative second variation found within {max_trials} line-search trials")


def g_indefinite_witness(e: Extremal, max_trials: int = 16, grid: int = 200) -> Witness:
    """Oscillating vertical field along a negative direction of G, steered to zero at t1."""
    fp = provider(e)
    ts = np.linspace(e.t0, e.t1, grid)
    eig = [np.linalg.eigh(fp.matrices(t)[4]) for t in ts]
    k = int(np.argmin([vals[0] for vals, _ in eig]))
    if eig[k][0][0] >= 0:
        raise WitnessError("G has no negative eigenvalue on the grid")
    v = eig[k][1][:, 0]
    # widest grid window around the minimum where v^T G v stays negative
    neg = [float(v @ fp.matrices(t)[4] @ v) < 0 for t in ts]
    lo = hi = k
    while lo > 0 and neg[lo - 1]:
        lo -= 1
    while hi < grid - 1 and neg[hi + 1]:
        hi += 1
    a, b = ts[lo], ts[hi]
    if b - a < 1e-9 * (e.t1 - e.t0):
        a, b = ts[max(k - 1, 0)], ts[min(k + 1, grid - 1)]
    frame = h_frame(e, e.t0, e.t1)
    steer = _Steering(e, frame, e.t0, e.t1)
    n = e.n
    for trial in range(max_trials):
        freq = 2 * math.pi * 2 ** (trial + 2) / (b - a)

        def Y_osc(t, freq=freq):
            if not a <= t <= b:
                return np.zeros(e.r)
            return math.sin(math.pi * (t - a) / (b - a)) ** 2 * math.sin(freq * (t - a)) * v

        raw = deformation_from_vertical(e, Y_osc, breakpoints=(a, b))
        fix = steer.field(np.zeros(n), -raw.X(e.t1))
        Y = _sum_fields(Y_osc, fix)
        d = deformation_from_vertical(e, Y, breakpoints=(a, b))
        value = second_variation(e, d, warn=False)
        if value < 0:
            return Witness(
                d,
                value,
                "G_indefinite",
                trials=trial + 1,
                details={"window": [float(a), float(b)], "direction": [float(x) for x in v]},
            )
    raise WitnessError(f"no negative second variation found within {max_trials} trials")
