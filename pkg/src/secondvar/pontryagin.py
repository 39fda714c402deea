"""Pontryagin extremals: control elimination, Hamiltonian flow, single shooting,
residual verification and regularity scans."""

from __future__ import annotations

import bisect
import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.interpolate import make_interp_spline

from . import numerics
from .problem import ControlProblem, DerivativeSet, derivative_oracle

# Extremal flows are integrated this much tighter than ode_tol so that the
# derivative of the dense output (one order lower than the state) still meets
# residual checks stated in units of ode_tol.
FLOW_TOL_FACTOR = 1e-2


class PontryaginError(RuntimeError):
    pass


class NewtonFailure(PontryaginError):
    def __init__(self, message: str, t: float | None = None):
        self.t = t
        super().__init__(message if t is None else f"{message} (t={t:.12g})")


class RegularityError(NewtonFailure):
    """The control Hessian of the Pontryagin Hamiltonian is singular."""


class ShootingError(PontryaginError):
    pass


# ---------------------------------------------------------------------------
# Hamiltonians


def pontryagin_hamiltonian(D: DerivativeSet, t, q, z, p) -> float:
    """Unreduced Hamiltonian ``p . psi - L`` as a function of (t, q, z, p)."""
    return float(np.dot(p, D.psi(t, q, z)) - D.L(t, q, z))


def control_gradient(D: DerivativeSet, t, q, z, p) -> np.ndarray:
    return p @ D.psi_z(t, q, z) - D.L_z(t, q, z)


def control_hessian(D: DerivativeSet, t, q, z, p) -> np.ndarray:
    zz = D.psi_zz(t, q, z)
    return (p @ zz.reshape(len(p), -1)).reshape(zz.shape[1:]) - D.L_zz(t, q, z)


@dataclass
class HamiltonianEval:
    value: float  # reduced Hamiltonian at the eliminated control
    dH_dq: np.ndarray
    dH_dp: np.ndarray
    z: np.ndarray
    dHz: np.ndarray  # z-gradient of the unreduced Hamiltonian (zero at z)
    dHzz: np.ndarray


def hamiltonian(problem: ControlProblem, t, q, p, z_guess=None) -> HamiltonianEval:
    D = derivative_oracle(problem)
    q = np.asarray(q, dtype=float)
    p = np.asarray(p, dtype=float)
    z = stationary_controls(problem, t, q, p, z_guess)
    return HamiltonianEval(
        value=pontryagin_hamiltonian(D, t, q, z, p),
        dH_dq=p @ D.psi_q(t, q, z) - D.L_q(t, q, z),
        dH_dp=np.asarray(D.psi(t, q, z), dtype=float),
        z=z,
        dHz=control_gradient(D, t, q, z, p),
        dHzz=control_hessian(D, t, q, z, p),
    )


# ---------------------------------------------------------------------------
# control elimination


def _newton_controls(D: DerivativeSet, problem: ControlProblem, t, q, p, z0):
    tol = problem.options.newton_tol
    max_iter = problem.options.newton_max_iter
    z = np.array(z0, dtype=float)
    start = z.copy()

    def residual(zz):
        a = p @ D.psi_z(t, q, zz)
        b = D.L_z(t, q, zz)
        F = a - b
        return F, float(F @ F), max(1.0, float(np.abs(a).max()), float(np.abs(b).max()))

    F, sq, scale = residual(z)
    for _ in range(max_iter + 1):
        J = control_hessian(D, t, q, z, p)
        if float(np.abs(F).max()) <= tol * scale:
            _check_regular(J, t)
            return z, float(np.abs(z - start).max())
        try:
            step = np.linalg.solve(J, -F)
        except np.linalg.LinAlgError:
            raise RegularityError("singular control Hessian d2H/dz2 (regularity failure)", t) from None
        if not np.all(np.isfinite(step)):
            _check_regular(J, t)
        lam = 1.0
        while True:
            z_try = z + lam * step
            F_try, sq_try, scale_try = residual(z_try)
            # sufficient decrease of |F|, compared through squares
            if sq_try < (1 - 1e-4 * lam) ** 2 * sq or lam < 1e-3:
                break
            lam *= 0.5
        z, F, sq, scale = z_try, F_try, sq_try, scale_try
    raise NewtonFailure(
        f"control elimination did not converge in {max_iter} iterations (|dH/dz|={np.max(np.abs(F)):.3e})", t
    )


def _check_regular(J: np.ndarray, t) -> None:
    if not np.all(np.isfinite(J)):
        raise RegularityError("non-finite control Hessian", t)
    if J.shape == (1, 1):
        s = np.abs(J[0])
    else:
        s = np.abs(np.linalg.eigvalsh(J))  # J is a symmetric hessian
    if s.max() == 0.0 or s.min() <= 1e-13 * max(1.0, s.max()):
        raise RegularityError("singular control Hessian d2H/dz2 (regularity failure)", t)


def stationary_controls(
    problem: ControlProblem, t, q, p, z_guess=None, derivs: DerivativeSet | None = None
) -> np.ndarray:
    """Solve ``p_i dpsi^i/dz^A = dL/dz^A`` for z by damped Newton from ``z_guess``."""
    D = derivs if derivs is not None else derivative_oracle(problem)
    if z_guess is None:
        z_guess = problem.z_guess if problem.z_guess is not None else np.zeros(problem.r)
    z, _ = _newton_controls(D, problem, float(t), np.asarray(q, float), np.asarray(p, float), z_guess)
    return z


# ---------------------------------------------------------------------------
# extremals


@dataclass
class Extremal:
    """A lifted extremal ``(q(t), p(t), z(t))`` on ``[t0, t1]``.

    Either backed by an integrated Hamiltonian flow (``trajectory`` set; z is
    re-eliminated at query time, warm-started from stored nodal controls) or by
    user-supplied callables.
    """

    problem: ControlProblem
    t0: float
    t1: float
    q_fn: Callable[[float], np.ndarray]
    p_fn: Callable[[float], np.ndarray]
    z_fn: Callable[[float], np.ndarray]
    dq_fn: Callable[[float], np.ndarray] | None = None
    dp_fn: Callable[[float], np.ndarray] | None = None
    trajectory: numerics.Trajectory | None = None
    p0: np.ndarray | None = None
    shooting_residual: float | None = None
    branch_jumps: list = field(default_factory=list)
    source: str = "flow"
    state_fn: Callable[[float], tuple] | None = None

    @property
    def n(self) -> int:
        return self.problem.n

    @property
    def r(self) -> int:
        return self.problem.r

    @property
    def extendable(self) -> bool:
        return self.trajectory is not None

    def q(self, t) -> np.ndarray:
        return self.q_fn(t)

    def p(self, t) -> np.ndarray:
        return self.p_fn(t)

    def z(self, t) -> np.ndarray:
        return self.z_fn(t)

    def state(self, t):
        """``(q, p, z)`` at time t."""
        if self.state_fn is not None:
            return self.state_fn(t)
        return self.q_fn(t), self.p_fn(t), self.z_fn(t)

    def qdot(self, t) -> np.ndarray:
        if self.dq_fn is None:
            raise PontryaginError("extremal carries no derivative information")
        return self.dq_fn(t)

    def pdot(self, t) -> np.ndarray:
        if self.dp_fn is None:
            raise PontryaginError("extremal carries no derivative information")
        return self.dp_fn(t)

    def extend(self, t_end: float) -> "Extremal":
        """Re-integrate the flow from ``t0`` over ``[t0, t_end]``."""
        if self.trajectory is None:
            raise PontryaginError("only flow-backed extremals can be extended")
        q0, p0 = self.q(self.t0), self.p(self.t0)
        ext = flow_extremal(self.problem, q0, p0, self.t0, t_end, z_guess=self.z(self.t0))
        ext.shooting_residual = self.shooting_residual
        return ext

    @classmethod
    def from_samples(cls, problem: ControlProblem, ts, q, p, z, order: int = 3) -> "Extremal":
        """Interpolate time-sampled ``q, p, z`` with splines of the given order."""
        ts = np.asarray(ts, dtype=float)
        qs = make_interp_spline(ts, np.asarray(q, float).reshape(len(ts), problem.n), k=order)
        ps = make_interp_spline(ts, np.asarray(p, float).reshape(len(ts), problem.n), k=order)
        zs = make_interp_spline(ts, np.asarray(z, float).reshape(len(ts), problem.r), k=order)
        dqs, dps = qs.derivative(), ps.derivative()
        return cls(
            problem=problem,
            t0=float(ts[0]),
            t1=float(ts[-1]),
            q_fn=lambda t: np.asarray(qs(t), float),
            p_fn=lambda t: np.asarray(ps(t), float),
            z_fn=lambda t: np.asarray(zs(t), float),
            dq_fn=lambda t: np.asarray(dqs(t), float),
            dp_fn=lambda t: np.asarray(dps(t), float),
            source="samples",
        )

    @classmethod
    def from_functions(cls, problem, t0, t1, q, p, z, dq=None, dp=None, source="analytic") -> "Extremal":
        def vec(fn):
            return lambda t: np.asarray(fn(t), dtype=float)

        return cls(
            problem=problem,
            t0=float(t0),
            t1=float(t1),
            q_fn=vec(q),
            p_fn=vec(p),
            z_fn=vec(z),
            dq_fn=None if dq is None else vec(dq),
            dp_fn=None if dp is None else vec(dp),
            source=source,
        )

    def sample(self, count: int = 401):
        ts = np.linspace(self.t0, self.t1, count)
        q = np.array([self.q(t) for t in ts])
        p = np.array([self.p(t) for t in ts])
        z = np.array([self.z(t) for t in ts])
        return ts, q, p, z

    def to_csv(self, samples: int = 401) -> str:
        ts, q, p, z = self.sample(samples)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(
            ["t"]
            + [f"q{i + 1}" for i in range(self.n)]
            + [f"p{i + 1}" for i in range(self.n)]
            + [f"z{a + 1}" for a in range(self.r)]
        )
        for k in range(len(ts)):
            w.writerow([repr(float(v)) for v in np.concatenate([[ts[k]], q[k], p[k], z[k]])])
        return buf.getvalue()


class _FlowRhs:
    """Right-hand side of the reduced Hamiltonian system with warm-started control elimination."""

    def __init__(self, problem: ControlProblem, z_guess):
        self.problem = problem
        self.D = derivative_oracle(problem)
        self.n = problem.n
        self.z = np.array(z_guess, dtype=float)
        self.jumps: list[tuple[float, float]] = []

    def controls(self, t, q, p):
        z, jump = _newton_controls(self.D, self.problem, t, q, p, self.z)
        scale = max(1.0, float(np.max(np.abs(q))), float(np.max(np.abs(p))))
        if jump > 10 * scale:
            self.jumps.append((float(t), jump))
        self.z = z
        return z

    def __call__(self, t, y):
        n = self.n
        q, p = y[:n], y[n:]
        z = self.controls(t, q, p)
        D = self.D
        dq = D.psi(t, q, z)
        dp = -(p @ D.psi_q(t, q, z)) + D.L_q(t, q, z)
        return np.concatenate([dq, dp])


def _default_z(problem: ControlProblem):
    return np.zeros(problem.r) if problem.z_guess is None else np.asarray(problem.z_guess, float)


def hamilton_flow(problem: ControlProblem, q0, p0, ta, tb, z_guess=None, rtol=None):
    """Integrate ``dq/dt = dH/dp, dp/dt = -dH/dq`` with z eliminated at every call.

    Returns ``(trajectory, z_nodes, jumps)`` where ``z_nodes`` are the controls
    at the accepted step times.
    """
    rtol = problem.options.ode_tol * FLOW_TOL_FACTOR if rtol is None else rtol
    z_guess = _default_z(problem) if z_guess is None else np.asarray(z_guess, float)
    rhs = _FlowRhs(problem, z_guess)
    y0 = np.concatenate([np.asarray(q0, float), np.asarray(p0, float)])
    z_start = rhs.controls(float(ta), y0[: problem.n], y0[problem.n :])
    rhs.z = z_start
    try:
        traj = numerics.integrate(rhs, y0, ta, tb, rtol=rtol)
    except numerics.RhsEvaluationError as exc:
        cause = exc.__cause__
        if isinstance(cause, NewtonFailure):
            raise type(cause)(str(cause).split(" (t=")[0], exc.t) from exc
        raise
    # controls at nodes, continued sequentially from the initial control
    z_nodes = np.empty((len(traj.ts), problem.r))
    node = _FlowRhs(problem, z_start)
    for i, (t, y) in enumerate(zip(traj.ts, traj.ys)):
        z_nodes[i] = node.controls(t, y[: problem.n], y[problem.n :])
    return traj, z_nodes, rhs.jumps + node.jumps


def _dense_derivative_error(problem: ControlProblem, traj, z_nodes) -> float:
    """Largest gap between the interpolant's derivative and the flow field inside steps."""
    n = problem.n
    rhs = _FlowRhs(problem, z_nodes[0])
    worst = 0.0
    for i in range(traj.steps):
        rhs.z = z_nodes[i]
        t = 0.5 * (traj.ts[i] + traj.ts[i + 1])  # mid-step, farthest from the nodes
        gap = traj.derivative(t) - rhs(t, traj(t))
        worst = max(worst, float(np.max(np.abs(gap[:n]))), float(np.max(np.abs(gap[n:]))))
    return worst


def flow_extremal(problem: ControlProblem, q0, p0, ta, tb, z_guess=None) -> Extremal:
    """Flow-backed extremal whose dense derivative is validated against the flow field.

    The integration tolerance is tightened (down to ``1e-4 * ode_tol``) until the
    derivative of the interpolant agrees with the right-hand side to ``5 * ode_tol``.
    """
    ode_tol = problem.options.ode_tol
    rtol = ode_tol * FLOW_TOL_FACTOR
    while True:
        traj, z_nodes, jumps = hamilton_flow(problem, q0, p0, ta, tb, z_guess, rtol=rtol)
        if rtol <= ode_tol * 1e-4 or _dense_derivative_error(problem, traj, z_nodes) <= 5 * ode_tol:
            break
        rtol /= 10
    n = problem.n
    D = derivative_oracle(problem)
    order = np.argsort(traj.ts)
    t_nodes = traj.ts[order]
    z_sorted = z_nodes[order]

    node_list = t_nodes.tolist()

    def state_at(t):
        t = float(t)
        y = traj(t)
        if len(node_list) > 1:
            i = min(max(bisect.bisect_right(node_list, t) - 1, 0), len(node_list) - 2)
            w = (t - node_list[i]) / (node_list[i + 1] - node_list[i])
            guess = (1 - w) * z_sorted[i] + w * z_sorted[i + 1]
        else:
            guess = z_sorted[0]
        z, _ = _newton_controls(D, problem, t, y[:n], y[n:], guess)
        return y[:n], y[n:], z

    def z_at(t):
        return state_at(t)[2]

    return Extremal(
        problem=problem,
        t0=float(min(ta, tb)),
        t1=float(max(ta, tb)),
        q_fn=lambda t: traj(t)[:n],
        p_fn=lambda t: traj(t)[n:],
        z_fn=z_at,
        dq_fn=lambda t: traj.derivative(t)[:n],
        dp_fn=lambda t: traj.derivative(t)[n:],
        trajectory=traj,
        p0=np.asarray(p0, float) if ta <= tb else None,
        branch_jumps=jumps,
        source="flow",
        state_fn=state_at,
    )


# ---------------------------------------------------------------------------
# shooting

SHOOT_TOL = 1e-8
SHOOT_MAX_ITER = 50


def shoot(problem: ControlProblem, p0_guess: Sequence[float] | None = None) -> Extremal:
    """Single shooting on ``p0 -> q(t1; qa, p0) - qb`` with a finite-difference Jacobian."""
    n = problem.n
    if p0_guess is None:
        p0_guess = problem.p0_guess if problem.p0_guess is not None else np.zeros(n)
    p0 = np.array(p0_guess, dtype=float)
    if p0.shape != (n,):
        raise ValueError(f"p0_guess must have {n} entries")
    qa = np.asarray(problem.qa, float)
    qb = np.asarray(problem.qb, float)
    t0, t1 = problem.t0, problem.t1

    def endpoint(pp):
        traj, _, _ = hamilton_flow(problem, qa, pp, t0, t1)
        return traj.ys[-1][:n]

    try:
        F = endpoint(p0) - qb
    except (numerics.IntegrationError, NewtonFailure) as exc:
        raise ShootingError(f"flow failed at the initial guess: {exc}") from exc
    # finite-difference noise floor of the Jacobian: flow error over the probe step
    noise = 100 * problem.options.ode_tol * FLOW_TOL_FACTOR * (1.0 + float(np.max(np.abs(qb))))
    J = None
    stalled = 0
    for _ in range(SHOOT_MAX_ITER):
        if np.max(np.abs(F)) <= SHOOT_TOL:
            break
        J = np.empty((n, n))
        h_min = np.inf
        for j in range(n):
            h = 1e-7 * (1.0 + abs(p0[j]))
            h_min = min(h_min, h)
            pj = p0.copy()
            pj[j] += h
            try:
                J[:, j] = (endpoint(pj) - qb - F) / h
            except (numerics.IntegrationError, NewtonFailure) as exc:
                raise ShootingError(f"flow failed inside a Jacobian probe: {exc}") from exc
        s = np.linalg.svd(J, compute_uv=False)
        if s[-1] <= max(1e-9 * max(1.0, s[0]), noise / h_min):
            raise ShootingError(
                f"shooting Jacobian is singular (sigma_min={s[-1]:.3e}); "
                "the end-point is conjugate to the start or unreachable"
            )
        step = np.linalg.solve(J, -F)
        norm0 = np.linalg.norm(F)
        lam = 1.0
        while True:
            trial = p0 + lam * step
            try:
                F_trial = endpoint(trial) - qb
                ok = np.linalg.norm(F_trial) < norm0 or lam < 1e-3
            except (numerics.IntegrationError, NewtonFailure):
                ok = lam < 1e-3
                F_trial = None
            if ok:
                break
            lam *= 0.5
        if F_trial is None:
            raise ShootingError("flow failed along every damped Newton step")
        stalled = stalled + 1 if np.linalg.norm(F_trial) > (1 - 1e-4) * norm0 else 0
        if stalled >= 3:
            raise ShootingError(f"shooting stalled (|q(t1)-qb|={np.max(np.abs(F_trial)):.3e})")
        p0, F = trial, F_trial
    else:
        raise ShootingError(
            f"shooting did not converge in {SHOOT_MAX_ITER} iterations (|q(t1)-qb|={np.max(np.abs(F)):.3e})"
        )
    if np.max(np.abs(F)) > SHOOT_TOL:
        raise ShootingError(f"shooting did not converge (|q(t1)-qb|={np.max(np.abs(F)):.3e})")
    # polish with the last Jacobian while that still pays off
    for _ in range(2 if J is not None else 0):
        trial = p0 + np.linalg.solve(J, -F)
        try:
            F_trial = endpoint(trial) - qb
        except (numerics.IntegrationError, NewtonFailure):
            break
        if not np.linalg.norm(F_trial) < 0.5 * np.linalg.norm(F):
            break
        p0, F = trial, F_trial
    ext = flow_extremal(problem, qa, p0, t0, t1)
    ext.shooting_residual = float(np.max(np.abs(F)))
    report = verify_extremal(ext)
    if not report.passed:
        raise ShootingError(f"shot extremal failed verification: {report}")
    return ext


# ---------------------------------------------------------------------------
# verification


@dataclass
class ResidualReport:
    admissibility: float
    costate: float
    stationarity: float
    threshold: float

    @property
    def passed(self) -> bool:
        return max(self.admissibility, self.costate, self.stationarity) <= self.threshold

    def as_dict(self) -> dict:
        return {
            "admissibility": self.admissibility,
            "costate": self.costate,
            "stationarity": self.stationarity,
            "threshold": self.threshold,
            "passed": self.passed,
        }


def verify_extremal(e: Extremal, grid: int = 200) -> ResidualReport:
    """Sup-norms of the three Pontryagin residuals over a uniform grid."""
    D = derivative_oracle(e.problem)
    adm = cost = stat = 0.0
    for t in np.linspace(e.t0, e.t1, grid):
        q, p, z = e.state(t)
        stat = max(stat, float(np.max(np.abs(control_gradient(D, t, q, z, p)))))
        if e.dq_fn is not None:
            adm = max(adm, float(np.max(np.abs(e.qdot(t) - D.psi(t, q, z)))))
        if e.dp_fn is not None:
            res = e.pdot(t) + p @ D.psi_q(t, q, z) - D.L_q(t, q, z)
            cost = max(cost, float(np.max(np.abs(res))))
    return ResidualReport(adm, cost, stat, 10 * e.problem.options.ode_tol)


@dataclass
class RegularityScan:
    min_abs_det: float
    t_min: float


def regularity_scan(e: Extremal, grid: int = 200) -> RegularityScan:
    D = derivative_oracle(e.problem)
    best, where = np.inf, e.t0
    for t in np.linspace(e.t0, e.t1, grid):
        q, p, z = e.state(t)
        d = abs(float(np.linalg.det(control_hessian(D, t, q, z, p))))
        if d < best:
            best, where = d, float(t)
    return RegularityScan(best, where)
