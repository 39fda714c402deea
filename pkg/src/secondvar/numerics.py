"""Adaptive ODE integration with dense output, event location and small linear algebra.

The integrator is the Dormand-Prince 5(4) pair with a proportional-integral step
size controller and Hairer's fourth-order continuous extension.  Step-size
collapse is an error carrying the last reached time, which callers use to detect
finite-time blow-up.
"""

from __future__ import annotations

import bisect
import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np
from scipy.optimize import brentq

# Dormand-Prince tableau
_C = (0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0)
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_E = np.array([71 / 57600, 0.0, -71 / 16695, 71 / 1920, -17253 / 339200, 22 / 525, -1 / 40])
_D = np.array(
    [
        -12715105075 / 11282082432,
        0.0,
        87487479700 / 32700410799,
        -10690763975 / 1880347072,
        701980252875 / 199316789632,
        -1453857185 / 822651844,
        69997945 / 29380423,
    ]
)

_SAFE = 0.9
_FAC_MIN = 0.2  # h_new / h bounded to [_FAC_MIN, _FAC_MAX]
_FAC_MAX = 10.0
_BETA = 0.04
_EXPO = 0.2 - 0.75 * _BETA
_COLLAPSE = 1e-14
_MAX_STEPS = 200_000


class IntegrationError(RuntimeError):
    def __init__(self, message: str, t: float):
        self.t = t
        super().__init__(f"{message} (at t={t:.15g})")


class StepCollapseError(IntegrationError):
    """Step size fell below ``1e-14 * |tb - ta|``; ``t`` is the last reached time."""


class RhsEvaluationError(IntegrationError):
    """The right-hand side raised; the original exception is chained."""


class Trajectory:
    """Accepted steps of an integration with a per-step quartic interpolant.

    ``ts`` runs in the direction of integration (decreasing for backward runs).
    """

    def __init__(self, ts: np.ndarray, ys: np.ndarray, coeffs: np.ndarray, terminated: bool = False):
        self.ts = ts
        self.ys = ys
        self.coeffs = coeffs  # shape (steps, 5, dim)
        self.terminated = terminated
        self.direction = 1.0 if ts[-1] >= ts[0] else -1.0
        self._ascending = ts if self.direction > 0 else ts[::-1]
        self._asc_list = self._ascending.tolist()

    @classmethod
    def concatenate(cls, pieces: list["Trajectory"]) -> "Trajectory":
        """Join runs that continue one another in the same direction."""
        if len(pieces) == 1:
            return pieces[0]
        ts = np.concatenate([pieces[0].ts] + [p.ts[1:] for p in pieces[1:]])
        ys = np.concatenate([pieces[0].ys] + [p.ys[1:] for p in pieces[1:]])
        coeffs = np.concatenate([p.coeffs for p in pieces])
        return cls(ts, ys, coeffs, terminated=pieces[-1].terminated)

    @property
    def ta(self) -> float:
        return float(self.ts[0])

    @property
    def tb(self) -> float:
        return float(self.ts[-1])

    @property
    def t_min(self) -> float:
        return float(min(self.ts[0], self.ts[-1]))

    @property
    def t_max(self) -> float:
        return float(max(self.ts[0], self.ts[-1]))

    @property
    def dim(self) -> int:
        return self.ys.shape[1]

    @property
    def steps(self) -> int:
        return len(self.ts) - 1

    def _locate(self, t: np.ndarray):
        span = self.t_max - self.t_min
        slack = 1e-12 * max(span, 1.0)
        if np.any(t < self.t_min - slack) or np.any(t > self.t_max + slack):
            bad = t[(t < self.t_min - slack) | (t > self.t_max + slack)][0]
            raise ValueError(f"query t={bad!r} outside trajectory domain [{self.t_min}, {self.t_max}]")
        t = np.clip(t, self.t_min, self.t_max)
        if self.steps == 0:
            return np.zeros(t.shape, dtype=int), np.zeros(t.shape)
        if self.direction > 0:
            idx = np.searchsorted(self.ts, t, side="right") - 1
        else:
            idx = len(self.ts) - 1 - np.searchsorted(self._ascending, t, side="left")
        idx = np.clip(idx, 0, self.steps - 1)
        h = self.ts[idx + 1] - self.ts[idx]
        theta = (t - self.ts[idx]) / h
        return idx, theta

    def _locate_scalar(self, t: float):
        lo, hi = self._asc_list[0], self._asc_list[-1]
        slack = 1e-12 * max(hi - lo, 1.0)
        if not lo - slack <= t <= hi + slack:
            raise ValueError(f"query t={t!r} outside trajectory domain [{lo}, {hi}]")
        t = min(max(t, lo), hi)
        k = min(max(bisect.bisect_right(self._asc_list, t) - 1, 0), self.steps - 1)
        idx = k if self.direction > 0 else self.steps - 1 - k
        h = self.ts[idx + 1] - self.ts[idx]
        return idx, (t - self.ts[idx]) / h, h

    def __call__(self, t):
        scalar = np.ndim(t) == 0
        if scalar and self.steps > 0:
            idx, th, _ = self._locate_scalar(float(t))
            c = self.coeffs[idx]
            th1 = 1.0 - th
            return c[0] + th * (c[1] + th1 * (c[2] + th * (c[3] + th1 * c[4])))
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        if self.steps == 0:
            out = np.repeat(self.ys[:1], tt.size, axis=0)
            return out[0] if scalar else out
        idx, th = self._locate(tt)
        c = self.coeffs[idx]
        th = th[:, None]
        th1 = 1.0 - th
        out = c[:, 0] + th * (c[:, 1] + th1 * (c[:, 2] + th * (c[:, 3] + th1 * c[:, 4])))
        return out[0] if scalar else out

    def derivative(self, t):
        """Time derivative of the interpolant."""
        scalar = np.ndim(t) == 0
        if scalar and self.steps > 0:
            idx, th, h = self._locate_scalar(float(t))
            c = self.coeffs[idx]
            th1 = 1.0 - th
            d = c[1] + (1 - 2 * th) * c[2] + th * (2 - 3 * th) * c[3] + 2 * th * th1 * (1 - 2 * th) * c[4]
            return d / h
        tt = np.atleast_1d(np.asarray(t, dtype=float))
        idx, th = self._locate(tt)
        c = self.coeffs[idx]
        h = (self.ts[idx + 1] - self.ts[idx])[:, None]
        th = th[:, None]
        th1 = 1.0 - th
        d = c[:, 1] + (1 - 2 * th) * c[:, 2] + th * (2 - 3 * th) * c[:, 3] + 2 * th * th1 * (1 - 2 * th) * c[:, 4]
        out = d / h
        return out[0] if scalar else out

    def grid(self, per_step: int = 8) -> np.ndarray:
        """Times with ``per_step`` subintervals inside every accepted step."""
        if self.steps == 0:
            return self.ts.copy()
        frac = np.arange(per_step) / per_step
        inner = self.ts[:-1, None] + frac[None, :] * np.diff(self.ts)[:, None]
        return np.concatenate([inner.ravel(), self.ts[-1:]])


def _initial_step(f, t0, y0, f0, direction, rtol, atol, span):
    sk = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / sk) ** 2))
    d1 = np.sqrt(np.mean((f0 / sk) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, span)
    y1 = y0 + direction * h0 * f0
    f1 = np.asarray(f(t0 + direction * h0, y1), dtype=float)
    d2 = np.sqrt(np.mean(((f1 - f0) / sk) ** 2)) / h0
    if not np.isfinite(d2):
        return h0 * 1e-3
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def integrate(
    f: Callable[[float, np.ndarray], np.ndarray],
    y0: Sequence[float],
    ta: float,
    tb: float,
    rtol: float = 1e-10,
    atol: float | None = None,
    terminate: Callable[[float, np.ndarray], bool] | None = None,
    h_max: float | None = None,
) -> Trajectory:
    """Integrate ``dy/dt = f(t, y)`` from ``ta`` to ``tb`` (``tb < ta`` allowed).

    ``terminate(t, y)`` is consulted after every accepted step; returning true
    ends the run early with ``Trajectory.terminated`` set.
    """
    atol = rtol if atol is None else atol
    y = np.array(y0, dtype=float).ravel()
    ta, tb = float(ta), float(tb)
    span = abs(tb - ta)
    direction = 1.0 if tb >= ta else -1.0
    dim = y.size
    if span == 0.0:
        coeffs = np.zeros((0, 5, dim))
        return Trajectory(np.array([ta]), y[None, :].copy(), coeffs)
    h_max = span if h_max is None else min(h_max, span)
    h_min = _COLLAPSE * span

    def rhs(t, yy):
        try:
            return np.asarray(f(t, yy), dtype=float).ravel()
        except IntegrationError:
            raise
        except Exception as exc:
            raise RhsEvaluationError(f"right-hand side failed: {exc}", t) from exc

    t = ta
    k = np.empty((7, dim))
    k[0] = rhs(t, y)
    if not np.all(np.isfinite(k[0])):
        raise RhsEvaluationError("non-finite right-hand side at the initial point", t)
    h = min(_initial_step(rhs, t, y, k[0], direction, rtol, atol, span), h_max)
    facold = 1e-4
    reject = False

    ts = [t]
    ys = [y.copy()]
    coeffs = []
    terminated = False
    for _ in range(_MAX_STEPS):
        if abs(tb - t) <= 1e-15 * max(1.0, abs(tb)):
            break
        if h < h_min:
            raise StepCollapseError("step size collapse", t)
        last = False
        if h >= abs(tb - t):
            h = abs(tb - t)
            last = True
        dt = direction * h
        try:
            for s in range(1, 7):
                ys_ = y + dt * np.dot(_A[s], k[:s])
                k[s] = rhs(t + _C[s] * dt, ys_)
            y_new = ys_  # stage 7 is evaluated at the 5th-order solution
            finite = np.all(np.isfinite(k)) and np.all(np.isfinite(y_new))
        except RhsEvaluationError:
            # a failing rhs inside a trial step is treated as a rejection; a
            # failure that persists down to the collapse threshold surfaces
            # as the chained error
            if h * 0.2 < h_min:
                raise
            h *= 0.2
            reject = True
            continue
        if not finite:
            h *= 0.2
            reject = True
            continue
        err_vec = dt * np.dot(_E, k)
        sk = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = math.sqrt(float(np.mean((err_vec / sk) ** 2)))
        fac11 = err**_EXPO if err > 0 else 0.0
        if err <= 1.0:
            fac = fac11 / facold**_BETA
            fac = max(1 / _FAC_MAX, min(1 / _FAC_MIN, fac / _SAFE))
            h_new = h / fac
            facold = max(err, 1e-4)
            ydiff = y_new - y
            bspl = dt * k[0] - ydiff
            coeffs.append(
                np.stack([y, ydiff, bspl, ydiff - dt * k[6] - bspl, dt * np.dot(_D, k)])
            )
            t = tb if last else t + dt
            y = y_new
            k[0] = k[6]
            ts.append(t)
            ys.append(y.copy())
            if reject:
                h_new = min(h_new, h)
            reject = False
            h = min(h_new, h_max)
            if terminate is not None and terminate(t, y):
                terminated = True
                break
        else:
            h = h / min(1 / _FAC_MIN, fac11 / _SAFE)
            reject = True
    else:
        raise IntegrationError("maximum number of steps exceeded", t)

    return Trajectory(np.array(ts), np.array(ys), np.array(coeffs).reshape(-1, 5, dim), terminated)


def integrate_consistent(
    f: Callable[[float, np.ndarray], np.ndarray],
    y0: Sequence[float],
    ta: float,
    tb: float,
    tol: float,
    atol_factor: float = 1.0,
    start: float = 1e-2,
    floor: float = 1e-4,
) -> Trajectory:
    """Integrate at ``rtol = start * tol`` and tighten (down to ``floor * tol``)
    until the dense-output derivative matches ``f`` at every step midpoint to
    ``5 * tol`` relative to ``max(1, |y|)``.

    The interpolant's derivative is an order less accurate than the step values,
    so residual checks on dense output need integration below the target. The
    derivative error scales like ``rtol**0.8``, which sizes each tightening.
    """
    rtol = start * tol
    while True:
        traj = integrate(f, y0, ta, tb, rtol=rtol, atol=rtol * atol_factor)
        scale = max(1.0, float(np.max(np.abs(traj.ys))))
        worst = 0.0
        for t in 0.5 * (traj.ts[1:] + traj.ts[:-1]):
            worst = max(worst, float(np.max(np.abs(traj.derivative(t) - f(t, traj(t))))))
        target = 5 * tol * scale
        if worst <= target or rtol <= floor * tol:
            return traj
        rtol = max(floor * tol, min(rtol / 10, 0.5 * rtol * (target / worst) ** 1.25))


def locate_roots(
    traj: Trajectory,
    g: Callable[[float, np.ndarray], float],
    root_tol: float = 1e-9,
    per_step: int = 8,
    start: float | None = None,
    end: float | None = None,
) -> list[float]:
    """All sign changes of ``g(t, traj(t))`` on the step grid, refined by Brent's method.

    ``start``/``end`` restrict the scan to a sub-interval.  Roots are returned
    in increasing time order.
    """
    grid = np.sort(traj.grid(per_step))
    lo = traj.t_min if start is None else max(start, traj.t_min)
    hi = traj.t_max if end is None else min(end, traj.t_max)
    if hi <= lo:
        return []
    grid = grid[(grid > lo) & (grid < hi)]
    grid = np.concatenate([[lo], grid, [hi]])

    def gt(s):
        return float(g(s, traj(s)))

    states = traj(grid)
    vals = np.array([float(g(s, y)) for s, y in zip(grid, states)])
    roots: list[float] = []
    for i in range(len(grid)):
        if vals[i] == 0.0:
            roots.append(float(grid[i]))
        if i + 1 < len(grid) and vals[i] * vals[i + 1] < 0:
            a, b = grid[i], grid[i + 1]
            xtol = min(root_tol, 1e-3 * (b - a)) * 1e-3
            roots.append(float(brentq(gt, a, b, xtol=max(xtol, 4e-16 * abs(b)), rtol=4 * np.finfo(float).eps)))
    roots.sort()
    merged: list[float] = []
    for r in roots:
        if not merged or r - merged[-1] > root_tol:
            merged.append(r)
    return merged


def numerical_rank(M, rtol: float = 1e-8) -> int:
    """Number of singular values above ``rtol * sigma_max``."""
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    if M.size == 0:
        return 0
    s = np.linalg.svd(M, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.sum(s > rtol * s[0]))


def sym_eig_range(M) -> tuple[float, float]:
    M = np.asarray(M, dtype=float)
    if not np.all(np.isfinite(M)):
        raise ValueError("matrix has non-finite entries")
    w = np.linalg.eigvalsh(0.5 * (M + M.T))
    return float(w[0]), float(w[-1])


@dataclass(frozen=True)
class Interp1:
    """Piecewise-linear vector interpolation on a fixed increasing grid."""

    ts: np.ndarray
    values: np.ndarray

    def __call__(self, t: float) -> np.ndarray:
        i = int(np.clip(np.searchsorted(self.ts, t) - 1, 0, len(self.ts) - 2))
        w = (t - self.ts[i]) / (self.ts[i + 1] - self.ts[i])
        return (1 - w) * self.values[i] + w * self.values[i + 1]
