"""Abnormality space of an admissible section and windowed local-normality scans."""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import numerics
from .pontryagin import Extremal
from .problem import derivative_oracle


@dataclass
class AbnormalityResult:
    interval: tuple[float, float]
    dim: int
    basis: list[np.ndarray]  # unit costates p(a) spanning the space
    singular_values: np.ndarray
    rank_rtol: float
    constraint_residual: float = 0.0  # max |p . dpsi/dz| of basis solutions on a dense grid
    costate_residual: float = 0.0  # max |dp/dt + psi_q^T p| / max(1, |p|) of basis solutions
    gap: float = float("nan")  # ratio of the last kept to the first dropped singular value

    def as_dict(self) -> dict:
        return {
            "interval": [float(self.interval[0]), float(self.interval[1])],
            "dim": int(self.dim),
            "basis": [[float(x) for x in v] for v in self.basis],
            "singular_values": [float(s) for s in self.singular_values],
            "rank_rtol": self.rank_rtol,
            "singular_value_gap": None if not np.isfinite(self.gap) else float(self.gap),
            "constraint_residual": self.constraint_residual,
            "costate_residual": self.costate_residual,
        }


@dataclass
class NormalityScan:
    windows: list[AbnormalityResult] = field(default_factory=list)

    @property
    def locally_normal(self) -> bool:
        return all(w.dim == 0 for w in self.windows)

    def as_dict(self) -> dict:
        return {"locally_normal": self.locally_normal, "windows": [w.as_dict() for w in self.windows]}


def _canonical_sign(v: np.ndarray) -> np.ndarray:
    k = int(np.argmax(np.abs(v)))
    return v if v[k] >= 0 else -v


def abnormality_space(e: Extremal, a: float | None = None, b: float | None = None, grid_size: int = 128):
    """Costates with ``dp/dt = -psi_q^T p`` and ``p . dpsi/dz = 0`` on ``[a, b]``.

    The fundamental matrix is integrated from the identity at ``a`` and the
    annihilation constraint is sampled on ``grid_size`` points; the dimension
    is the nullity of the stacked constraint rows at relative tolerance
    ``rank_rtol``.
    """
    a = e.t0 if a is None else float(a)
    b = e.t1 if b is None else float(b)
    if not e.t0 - 1e-12 <= a < b <= e.t1 + 1e-12:
        raise ValueError(f"interval [{a}, {b}] not inside [{e.t0}, {e.t1}]")
    if grid_size < 32:
        raise ValueError("grid_size must be at least 32")
    D = derivative_oracle(e.problem)
    n = e.n
    opts = e.problem.options

    def rhs(t, y):
        q, _, z = e.state(t)
        return (-D.psi_q(t, q, z).T @ y.reshape(n, n)).ravel()

    # tighter than ode_tol so that the dense-output derivative meets the 10*ode_tol residual bound
    traj = numerics.integrate(rhs, np.eye(n).ravel(), a, b, rtol=opts.ode_tol * 1e-2, atol=opts.ode_tol * 1e-4)

    def rows(t):
        q, _, z = e.state(t)
        return np.asarray(D.psi_z(t, q, z)).T @ traj(t).reshape(n, n)

    stack = np.vstack([rows(t) for t in np.linspace(a, b, grid_size)])
    if not np.all(np.isfinite(stack)):
        raise ValueError("non-finite constraint rows")
    _, s, vt = np.linalg.svd(stack)
    smax = s[0] if s.size else 0.0
    keep = s > opts.rank_rtol * smax if smax > 0 else np.zeros_like(s, dtype=bool)
    rank = int(np.count_nonzero(keep))
    basis = [_canonical_sign(vt[k]) for k in range(rank, n)]
    gap = float(s[rank - 1] / s[rank]) if 0 < rank < len(s) and s[rank] > 0 else float("nan")

    con = cost = 0.0
    if basis:
        V = np.array(basis).T
        for t in np.linspace(a, b, 4 * grid_size):
            q, _, z = e.state(t)
            P = traj(t).reshape(n, n) @ V
            dP = traj.derivative(t).reshape(n, n) @ V
            con = max(con, float(np.max(np.abs(np.asarray(D.psi_z(t, q, z)).T @ P))))
            res = float(np.max(np.abs(dP + D.psi_q(t, q, z).T @ P)))
            cost = max(cost, res / max(1.0, float(np.max(np.abs(P)))))
    return AbnormalityResult(
        interval=(a, b),
        dim=n - rank,
        basis=basis,
        singular_values=s,
        rank_rtol=opts.rank_rtol,
        constraint_residual=con,
        costate_residual=cost,
        gap=gap,
    )


def windows(t0: float, t1: float, count: int) -> list[tuple[float, float]]:
    """``count`` windows of equal length with 50% overlap covering ``[t0, t1]``."""
    if count < 2:
        raise ValueError("window_count must be at least 2")
    length = 2 * (t1 - t0) / (count + 1)
    out = []
    for k in range(count):
        a = t0 + k * length / 2
        out.append((a, t1 if k == count - 1 else a + length))
    return out


def local_normality_scan(e: Extremal, window_count: int = 8, grid_size: int = 128, jobs: int = 1) -> NormalityScan:
    spans = windows(e.t0, e.t1, window_count)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(lambda ab: abnormality_space(e, ab[0], ab[1], grid_size), spans))
    else:
        results = [abnormality_space(e, a, b, grid_size) for a, b in spans]
    return NormalityScan(results)
