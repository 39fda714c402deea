"""Built-in problems and their closed-form oracles."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from . import exprdsl
from .problem import ControlProblem, DerivativeSet, NativeModel


@dataclass(frozen=True)
class Oracle:
    """A closed-form reference value together with how it was obtained."""

    value: object
    kind: str  # "trivial", "derived" or "reference-example"
    note: str = ""


@dataclass(frozen=True)
class BuiltinProblem:
    name: str
    problem: ControlProblem
    description: str
    oracles: dict[str, Oracle] = field(default_factory=dict)
    section: Callable[[ControlProblem], object] | None = None  # prescribed admissible section

    def coverage(self) -> list[str]:
        return sorted(self.oracles)


def _expr_problem(name, n, r, psi, lagrangian, t0, t1, qa, qb, **extra) -> ControlProblem:
    return ControlProblem(
        n=n,
        r=r,
        psi=tuple(exprdsl.parse(s, n, r) for s in psi),
        lagrangian=exprdsl.parse(lagrangian, n, r),
        t0=t0,
        t1=t1,
        qa=tuple(qa),
        qb=tuple(qb),
        builtin=name,
        **extra,
    )


# ---------------------------------------------------------------------------
# free particle


def _free_particle() -> BuiltinProblem:
    p = _expr_problem("free-particle", 1, 1, ["z1"], "0.5*z1^2", 0.0, 1.0, [0.0], [1.0])

    def extremal(t0, t1, qa, qb):
        v = (qb - qa) / (t1 - t0)
        return (
            lambda t: np.array([qa + v * (t - t0)]),
            lambda t: np.array([v]),
            lambda t: np.array([v]),
        )

    return BuiltinProblem(
        name="free-particle",
        problem=p,
        description="psi = z, L = z^2/2: straight lines, no conjugate points",
        oracles={
            "extremal": Oracle(extremal, "trivial", "q linear, p = z = (qb-qa)/(t1-t0)"),
            "conjugate_times": Oracle(lambda t0, t_end: [], "trivial", "B(t, t0) = (t - t0) I"),
            "riccati": Oracle(lambda t0: (lambda t: np.zeros((1, 1)), None), "trivial", "C = 0 is a fixed point"),
            "abnormality": Oracle(lambda a, b: 0, "trivial", "p . 1 = 0 forces p = 0"),
        },
    )


# ---------------------------------------------------------------------------
# harmonic oscillator


def _harmonic() -> BuiltinProblem:
    p = _expr_problem(
        "harmonic-oscillator", 1, 1, ["z1"], "0.5*z1^2 - 0.5*q1^2", 0.0, 1.0, [0.0], [1.0], p0_guess=(1.0,)
    )

    def extremal(t0, t1, qa, qb):
        a = (qb - qa * math.cos(t1 - t0)) / math.sin(t1 - t0)

        def q(t):
            return np.array([qa * math.cos(t - t0) + a * math.sin(t - t0)])

        def v(t):
            return np.array([-qa * math.sin(t - t0) + a * math.cos(t - t0)])

        return q, v, v

    def conjugate(t0, t_end):
        k = 1
        out = []
        while t0 + k * math.pi <= t_end:
            out.append(t0 + k * math.pi)
            k += 1
        return out

    return BuiltinProblem(
        name="harmonic-oscillator",
        problem=p,
        description="psi = z, L = z^2/2 - q^2/2: conjugate points at t0 + k*pi",
        oracles={
            "extremal": Oracle(extremal, "derived", "q'' = -q with sin/cos solution"),
            "conjugate_times": Oracle(conjugate, "derived", "Jacobi field sin(t - t0)"),
            "riccati": Oracle(
                lambda t0: (lambda t: np.array([[math.tan(t - t0)]]), t0 + math.pi / 2),
                "derived",
                "C' = C^2 + 1 from C(t0) = 0",
            ),
            "abnormality": Oracle(lambda a, b: 0, "derived", "dpsi/dz = 1 forces p = 0 pointwise"),
        },
    )


# ---------------------------------------------------------------------------
# bump-function example


def bump(t: float) -> float:
    """f(t) = exp(1/(t^2-1)) inside |t| < 1, zero outside."""
    if abs(t) >= 1.0:
        return 0.0
    u = 1.0 / (t * t - 1.0)
    return math.exp(u) if u > -700.0 else 0.0


def bump_derivative(t: float) -> float:
    """g = f' = -2t (t^2-1)^-2 exp(1/(t^2-1)) inside |t| < 1, zero outside."""
    if abs(t) >= 1.0:
        return 0.0
    u = 1.0 / (t * t - 1.0)
    if u < -700.0:
        return 0.0
    return -2.0 * t * u * u * math.exp(u)


def _bump_native() -> NativeModel:
    n, r = 3, 2
    zeros = np.zeros

    def psi(t, q, z):
        return np.array([z[0], z[1], bump_derivative(t) * z[1]])

    def psi_z(t, q, z):
        return np.array([[1.0, 0.0], [0.0, 1.0], [0.0, bump_derivative(t)]])

    return NativeModel(
        DerivativeSet(
            psi=psi,
            L=lambda t, q, z: 0.5 * float(z[0] ** 2 + z[1] ** 2),
            psi_q=lambda t, q, z: zeros((n, n)),
            psi_z=psi_z,
            psi_qq=lambda t, q, z: zeros((n, n, n)),
            psi_qz=lambda t, q, z: zeros((n, n, r)),
            psi_zz=lambda t, q, z: zeros((n, r, r)),
            L_q=lambda t, q, z: zeros(n),
            L_z=lambda t, q, z: np.array(z, dtype=float),
            L_qq=lambda t, q, z: zeros((n, n)),
            L_qz=lambda t, q, z: zeros((n, r)),
            L_zz=lambda t, q, z: np.eye(r),
        )
    )


def _bump_example() -> BuiltinProblem:
    p = ControlProblem(
        n=3,
        r=2,
        psi=None,
        lagrangian=None,
        t0=-2.0,
        t1=2.0,
        qa=(4.0, -2.0, 0.0),
        qb=(4.0, 2.0, 0.0),
        builtin="paper-example-1",
        native=_bump_native(),
        p0_guess=(0.0, 1.0, 0.0),
        z_guess=(0.0, 1.0),
    )

    def section(problem):
        from .pontryagin import Extremal

        return Extremal.from_functions(
            problem,
            problem.t0,
            problem.t1,
            q=lambda t: [t * t, t, bump(t)],
            p=lambda t: [0.0, 0.0, 0.0],
            z=lambda t: [2 * t, 1.0],
            dq=lambda t: [2 * t, 1.0, bump_derivative(t)],
            source="section",
        )

    def extremal(t0, t1, qa, qb):
        # valid for the default boundary data, where the bump integrates out
        return (
            lambda t: np.array([4.0, t, bump(t)]),
            lambda t: np.array([0.0, 1.0, 0.0]),
            lambda t: np.array([0.0, 1.0]),
        )

    def abnormality(a, b):
        # g vanishes identically on any window avoiding (-1, 1): p = (0, 0, alpha) survives
        if b <= -1.0 or a >= 1.0:
            return 1
        return 0

    return BuiltinProblem(
        name="paper-example-1",
        problem=p,
        description="psi = (z1, z2, g(t) z2) with g the derivative of a bump; abnormal on [t0, -1], normal overall",
        oracles={
            "extremal": Oracle(extremal, "derived", "p constant; default data gives p = (0, 1, 0)"),
            "abnormality": Oracle(abnormality, "reference-example", "costate (0, 0, alpha) wherever g = 0"),
        },
        section=section,
    )


# ---------------------------------------------------------------------------
# Heisenberg


def _heisenberg() -> BuiltinProblem:
    p = _expr_problem(
        "heisenberg",
        3,
        2,
        ["z1", "z2", "q1*z2 - q2*z1"],
        "0.5*(z1^2 + z2^2)",
        0.0,
        1.0,
        [0.0, 0.0, 0.0],
        [1.0, 0.0, 0.1],
        p0_guess=(1.0, 0.0, 0.0),
    )
    return BuiltinProblem(
        name="heisenberg",
        problem=p,
        description="sub-Riemannian Heisenberg geodesics; exercised by property tests only",
        oracles={},
    )


_REGISTRY: dict[str, Callable[[], BuiltinProblem]] = {
    "free-particle": _free_particle,
    "harmonic-oscillator": _harmonic,
    "paper-example-1": _bump_example,
    "heisenberg": _heisenberg,
}
_CACHE: dict[str, BuiltinProblem] = {}


def names() -> list[str]:
    return list(_REGISTRY)


def builtin(name: str) -> BuiltinProblem:
    if name not in _REGISTRY:
        raise KeyError(f"unknown builtin {name!r}; choose from {', '.join(_REGISTRY)}")
    if name not in _CACHE:
        _CACHE[name] = _REGISTRY[name]()
    return _CACHE[name]
