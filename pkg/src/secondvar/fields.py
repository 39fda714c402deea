"""Second-order field matrices along an extremal: hessian blocks of the adapted
Lagrangian, G, h, tau, N, M, and the h-transported frame."""

from __future__ import annotations

import csv
import io
import threading
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline

from . import numerics
from .pontryagin import Extremal, RegularityError, control_hessian
from .problem import derivative_oracle

CACHE_CELLS = (128, 512)  # coarse grid first, then a nested 4x refinement
CACHE_CHECKS = 128


@dataclass(frozen=True)
class AdaptedHessianBlocks:
    t: float
    Hqq: np.ndarray  # n x n
    Hqz: np.ndarray  # n x r
    Hzz: np.ndarray  # r x r


@dataclass(frozen=True)
class FieldSample:
    """Field matrices at one time.

    ``tau[k, i]`` stores the connection coefficient with lower index k and
    upper index i, so transported vectors obey ``dX/dt = -tau.T @ X`` and
    transported covectors ``dpi/dt = tau @ pi``.  ``B[i, A]`` is dpsi^i/dz^A.
    """

    t: float
    G: np.ndarray
    G_inv: np.ndarray
    h: np.ndarray  # r x n
    tau: np.ndarray
    N: np.ndarray
    M: np.ndarray
    B: np.ndarray
    Hqz: np.ndarray


def adapted_hessian(e: Extremal, t: float) -> AdaptedHessianBlocks:
    """Blocks ``L_ab - p_k psi^k_ab`` at the lifted point of the extremal."""
    return _blocks(e, t, *e.state(t))


def _blocks(e: Extremal, t, q, p, z) -> AdaptedHessianBlocks:
    D = derivative_oracle(e.problem)
    n, r = e.n, e.r
    Hqq = D.L_qq(t, q, z) - (p @ D.psi_qq(t, q, z).reshape(n, -1)).reshape(n, n)
    Hqz = D.L_qz(t, q, z) - (p @ D.psi_qz(t, q, z).reshape(n, -1)).reshape(n, r)
    Hzz = D.L_zz(t, q, z) - (p @ D.psi_zz(t, q, z).reshape(n, -1)).reshape(r, r)
    return AdaptedHessianBlocks(float(t), Hqq, Hqz, Hzz)


def G_from_pontryagin(e: Extremal, t: float) -> np.ndarray:
    """G as minus the control hessian of ``p . psi - L`` with p frozen along the extremal."""
    q, p, z = e.state(t)
    return -control_hessian(derivative_oracle(e.problem), t, q, z, p)


def _sym(a: np.ndarray) -> np.ndarray:
    return 0.5 * (a + a.T)


def field_sample(e: Extremal, t: float) -> FieldSample:
    D = derivative_oracle(e.problem)
    q, p, z = e.state(t)
    blocks = _blocks(e, t, q, p, z)
    G = blocks.Hzz
    s = np.abs(np.linalg.eigvalsh(G)) if np.all(np.isfinite(G)) else np.array([np.nan])
    if not np.all(np.isfinite(s)) or s.min() <= 1e-13 * max(1.0, s.max()):
        raise RegularityError("singular G", t)
    G_inv = _sym(np.linalg.inv(G))
    B = np.asarray(D.psi_z(t, q, z), dtype=float)
    psi_q = np.asarray(D.psi_q(t, q, z), dtype=float)
    Hqz = blocks.Hqz
    GiHt = G_inv @ Hqz.T  # r x n
    return FieldSample(
        t=float(t),
        G=G,
        G_inv=G_inv,
        h=-GiHt,
        tau=-psi_q.T + (B @ GiHt).T,
        N=_sym(blocks.Hqq - Hqz @ GiHt),
        M=_sym(B @ G_inv @ B.T),
        B=B,
        Hqz=Hqz,
    )


# ---------------------------------------------------------------------------
# memoized provider


class FieldProvider:
    """Fast access to ``(tau, M, N, B, G, G_inv, h)`` along an extremal.

    A cubic spline through a uniform grid (128 cells, refined to 512 if needed)
    is used when its error against direct evaluation at sampled cell midpoints
    is within ``100 * ode_tol``; otherwise every query is evaluated directly.
    """

    def __init__(self, e: Extremal, use_cache: bool = True):
        self.e = e
        self.n, self.r = e.n, e.r
        self._use_cache = use_cache
        self._lock = threading.Lock()
        self._spline = None
        self.cache_error: float | None = None

    def _pack(self, s: FieldSample) -> np.ndarray:
        return np.concatenate([a.ravel() for a in (s.tau, s.M, s.N, s.B, s.G, s.G_inv, s.h)])

    def _unpack(self, v: np.ndarray):
        n, r = self.n, self.r
        sizes = [(n, n), (n, n), (n, n), (n, r), (r, r), (r, r), (r, n)]
        out, pos = [], 0
        for shape in sizes:
            size = shape[0] * shape[1]
            out.append(v[pos : pos + size].reshape(shape))
            pos += size
        return out

    def _build(self):
        e = self.e
        limit = 100 * e.problem.options.ode_tol
        memo: dict[float, np.ndarray] = {}

        def sample(t):
            t = float(t)
            if t not in memo:
                memo[t] = self._pack(field_sample(e, t))
            return memo[t]

        # probe a few fine cells first (4-point cubic midpoint rule) so rough fields skip the build
        fine = np.linspace(e.t0, e.t1, CACHE_CELLS[-1] + 1)
        for i in np.linspace(1, CACHE_CELLS[-1] - 2, 8).astype(int):
            f = [sample(fine[k]) for k in range(i - 1, i + 3)]
            mid = sample(0.5 * (fine[i] + fine[i + 1]))
            est = (9 * (f[1] + f[2]) - f[0] - f[3]) / 16
            if np.max(np.abs(est - mid) / np.maximum(1.0, np.abs(mid))) > limit:
                self._use_cache = False
                return
        for cells in CACHE_CELLS:
            ts = np.linspace(e.t0, e.t1, cells + 1)
            spline = CubicSpline(ts, np.array([sample(t) for t in ts]), axis=0)
            checked = np.linspace(0, cells - 1, min(cells, CACHE_CHECKS)).astype(int)
            mids = 0.5 * (ts[checked] + ts[checked + 1])
            direct = np.array([sample(t) for t in mids])
            scale = np.maximum(1.0, np.abs(direct))
            self.cache_error = float(np.max(np.abs(spline(mids) - direct) / scale))
            if self.cache_error <= limit:
                self._spline = spline
                return
        self._use_cache = False

    @property
    def cached(self) -> bool:
        if self._use_cache and self._spline is None:
            with self._lock:
                if self._use_cache and self._spline is None:
                    self._build()
        return self._use_cache

    def matrices(self, t: float):
        """``(tau, M, N, B, G, G_inv, h)`` at time t."""
        if self.cached and self.e.t0 <= t <= self.e.t1:
            return self._unpack(self._spline(t))
        return self._unpack(self._pack(field_sample(self.e, t)))


def provider(e: Extremal) -> FieldProvider:
    """The memoized field provider attached to an extremal."""
    fp = getattr(e, "_field_provider", None)
    if fp is None:
        fp = FieldProvider(e)
        e._field_provider = fp
    return fp


# ---------------------------------------------------------------------------
# h-transported frame


class FrameDegeneracyError(RuntimeError):
    def __init__(self, message: str, t: float):
        self.t = t
        super().__init__(f"{message} (t={t:.12g})")


@dataclass
class HFrame:
    """Frame ``e[i, a]`` (column a is the transported vector e_a) and its inverse."""

    trajectory: numerics.Trajectory
    n: int

    def frame(self, t) -> np.ndarray:
        E = self.trajectory(t).reshape(self.n, self.n)
        if np.linalg.cond(E) > 1e8:
            raise FrameDegeneracyError("h-frame condition number exceeds 1e8", float(t))
        return E

    def inverse(self, t) -> np.ndarray:
        return np.linalg.inv(self.frame(t))


def h_frame(e: Extremal, ta: float | None = None, tb: float | None = None, tau=None) -> HFrame:
    """Integrate ``de_a/dt = -tau.T e_a`` from the identity at ``ta``.

    ``tau`` may be given as a callable of t to override the extremal's connection.
    """
    ta = e.t0 if ta is None else ta
    tb = e.t1 if tb is None else tb
    n = e.n
    fp = provider(e)
    tau_fn = tau if tau is not None else (lambda t: fp.matrices(t)[0])

    def rhs(t, y):
        return (-tau_fn(t).T @ y.reshape(n, n)).ravel()

    tol = e.problem.options.ode_tol
    traj = numerics.integrate(rhs, np.eye(n).ravel(), ta, tb, rtol=tol, atol=tol * 1e-3)
    for t, y in zip(traj.ts, traj.ys):
        if np.linalg.cond(y.reshape(n, n)) > 1e8:
            raise FrameDegeneracyError("h-frame condition number exceeds 1e8", float(t))
    return HFrame(traj, n)


# ---------------------------------------------------------------------------
# export


def _labels(prefix: str, rows: int, cols: int) -> list[str]:
    return [f"{prefix}{i + 1}{j + 1}" for i in range(rows) for j in range(cols)]


def fields_csv(e: Extremal, samples: int = 401) -> str:
    """Columns: t, vec(G), vec(N), vec(M), vec(tau), all row-major."""
    n, r = e.n, e.r
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["t"] + _labels("G", r, r) + _labels("N", n, n) + _labels("M", n, n) + _labels("tau", n, n))
    for t in np.linspace(e.t0, e.t1, samples):
        s = field_sample(e, t)
        row = np.concatenate([[t], s.G.ravel(), s.N.ravel(), s.M.ravel(), s.tau.ravel()])
        w.writerow([repr(float(v)) for v in row])
    return buf.getvalue()
