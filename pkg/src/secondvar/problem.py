"""Problem definition: constraints ``dq/dt = psi(t, q, z)``, Lagrangian ``L(t, q, z)``,
fixed end-points, tolerances, and a uniform derivative oracle."""

from __future__ import annotations

import dataclasses
import functools
import math
import sys
from dataclasses import dataclass, field
from typing import Any, Callable, Mapping

import numpy as np

from . import exprdsl
from .exprdsl import Expr, Var

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

import tomli_w


class ProblemError(ValueError):
    """Invalid problem configuration; ``key`` names the offending entry."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


@dataclass(frozen=True)
class ToleranceSet:
    ode_tol: float = 1e-10
    newton_tol: float = 1e-12
    newton_max_iter: int = 50
    rank_rtol: float = 1e-8
    root_tol: float = 1e-9
    psd_tol: float = 1e-9
    riccati_cap: float = 1e8
    extension_fraction: float = 0.02

    def __post_init__(self):
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not (isinstance(value, (int, float)) and math.isfinite(value) and value > 0):
                raise ProblemError(f"must be a positive number, got {value!r}", f"tolerances.{f.name}")

    def replace(self, **changes) -> "ToleranceSet":
        known = {f.name for f in dataclasses.fields(self)}
        unknown = set(changes) - known
        if unknown:
            raise ProblemError(f"unknown tolerance(s) {sorted(unknown)}", "tolerances")
        if "newton_max_iter" in changes:
            changes["newton_max_iter"] = int(changes["newton_max_iter"])
        return dataclasses.replace(self, **changes)

    def as_dict(self) -> dict[str, float]:
        return dataclasses.asdict(self)


Fn = Callable[[float, np.ndarray, np.ndarray], Any]


@dataclass(frozen=True, eq=False)
class DerivativeSet:
    """Callables of ``(t, q, z)``.

    Index layout: ``psi_q[i, k] = d psi^i / d q^k``, ``psi_z[i, A]``,
    ``psi_qq[i, k, l]``, ``psi_qz[i, k, A]``, ``psi_zz[i, A, B]``,
    ``L_qz[k, A]`` and so on.
    """

    psi: Fn
    L: Fn
    psi_q: Fn
    psi_z: Fn
    psi_qq: Fn
    psi_qz: Fn
    psi_zz: Fn
    L_q: Fn
    L_z: Fn
    L_qq: Fn
    L_qz: Fn
    L_zz: Fn

    def replace(self, **changes) -> "DerivativeSet":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True, eq=False)
class NativeModel:
    """Problem functions supplied as Python closures instead of expressions."""

    derivatives: DerivativeSet


@dataclass(frozen=True)
class ControlProblem:
    n: int
    r: int
    psi: tuple[Expr, ...] | None
    lagrangian: Expr | None
    t0: float
    t1: float
    qa: tuple[float, ...]
    qb: tuple[float, ...]
    options: ToleranceSet = field(default_factory=ToleranceSet)
    builtin: str | None = None
    native: NativeModel | None = field(default=None, compare=False)
    p0_guess: tuple[float, ...] | None = None
    z_guess: tuple[float, ...] | None = None

    def __post_init__(self):
        if self.n < 1 or self.r < 1:
            raise ProblemError(f"dimensions must be positive, got n={self.n}, r={self.r}")
        if not self.t0 < self.t1:
            raise ProblemError(f"need t0 < t1, got t0={self.t0}, t1={self.t1}", "t1")
        for key in ("qa", "qb"):
            if len(getattr(self, key)) != self.n:
                raise ProblemError(f"expected {self.n} entries, got {len(getattr(self, key))}", key)
        if self.p0_guess is not None and len(self.p0_guess) != self.n:
            raise ProblemError(f"expected {self.n} entries", "p0_guess")
        if self.z_guess is not None and len(self.z_guess) != self.r:
            raise ProblemError(f"expected {self.r} entries", "z_guess")
        if self.native is None:
            if self.psi is None or self.lagrangian is None:
                raise ProblemError("expression problems need psi and lagrangian")
            if len(self.psi) != self.n:
                raise ProblemError(f"expected {self.n} expressions, got {len(self.psi)}", "psi")
            for i, e in enumerate(self.psi):
                _check_context(e, self.n, self.r, f"psi[{i}]")
            _check_context(self.lagrangian, self.n, self.r, "lagrangian")

    @property
    def span(self) -> float:
        return self.t1 - self.t0

    def with_options(self, **changes) -> "ControlProblem":
        """Copy with tolerance overrides; ``t0``/``t1`` and ``qa``/``qb`` are accepted here as well."""
        data = {k: float(changes.pop(k)) for k in ("t0", "t1") if k in changes}
        for k in ("qa", "qb"):
            if k in changes:
                v = tuple(float(x) for x in changes.pop(k))
                if len(v) != self.n:
                    raise ProblemError(f"expected {self.n} values, got {len(v)}", k)
                data[k] = v
        return dataclasses.replace(self, options=self.options.replace(**changes), **data)

    def derivatives(self) -> DerivativeSet:
        return derivative_oracle(self)


def _check_context(e: Expr, n: int, r: int, key: str) -> None:
    for v in exprdsl.variables(e):
        limit = n if v.kind == "q" else r if v.kind == "z" else 0
        if v.kind != "t" and not 1 <= v.index <= limit:
            raise ProblemError(f"variable {v.kind}{v.index} outside declared range", key)


# ---------------------------------------------------------------------------
# loading and rendering

_REQUIRED = ("n", "r", "psi", "lagrangian", "t0", "t1", "qa", "qb")


def _vector(cfg: Mapping[str, Any], key: str) -> tuple[float, ...] | None:
    if key not in cfg:
        return None
    value = cfg[key]
    if isinstance(value, (int, float)):
        value = [value]
    try:
        return tuple(float(v) for v in value)
    except (TypeError, ValueError) as exc:
        raise ProblemError(f"expected an array of numbers, got {value!r}", key) from exc


def problem_from_mapping(cfg: Mapping[str, Any]) -> ControlProblem:
    """Build a problem from an already-parsed config table."""
    tol_cfg = cfg.get("tolerances", {})
    if not isinstance(tol_cfg, Mapping):
        raise ProblemError("must be a table", "tolerances")
    try:
        options = ToleranceSet().replace(**dict(tol_cfg))
    except TypeError as exc:
        raise ProblemError(str(exc), "tolerances") from exc

    extras = {
        "p0_guess": _vector(cfg, "p0_guess"),
        "z_guess": _vector(cfg, "z_guess"),
    }
    if "builtin" in cfg:
        from .examples import builtin

        base = builtin(str(cfg["builtin"])).problem
        overrides = {k: float(cfg[k]) for k in ("t0", "t1") if k in cfg}
        for key in ("qa", "qb"):
            if key in cfg:
                overrides[key] = _vector(cfg, key)
        overrides.update({k: v for k, v in extras.items() if v is not None})
        return dataclasses.replace(base, options=options, **overrides)

    for key in _REQUIRED:
        if key not in cfg:
            raise ProblemError("missing key", key)
    try:
        n, r = int(cfg["n"]), int(cfg["r"])
    except (TypeError, ValueError) as exc:
        raise ProblemError("n and r must be integers") from exc
    psi_src = cfg["psi"]
    if isinstance(psi_src, str) or not isinstance(psi_src, (list, tuple)):
        raise ProblemError("expected an array of strings", "psi")
    if len(psi_src) != n:
        raise ProblemError(f"dimension mismatch: n={n} but {len(psi_src)} expressions", "psi")
    psi = []
    for i, text in enumerate(psi_src):
        try:
            psi.append(exprdsl.parse(str(text), n, r))
        except exprdsl.ExprError as exc:
            raise ProblemError(str(exc), f"psi[{i}]") from exc
    try:
        lag = exprdsl.parse(str(cfg["lagrangian"]), n, r)
    except exprdsl.ExprError as exc:
        raise ProblemError(str(exc), "lagrangian") from exc
    qa, qb = _vector(cfg, "qa"), _vector(cfg, "qb")
    for key, vec in (("qa", qa), ("qb", qb)):
        if len(vec) != n:
            raise ProblemError(f"dimension mismatch: n={n} but {len(vec)} entries", key)
    return ControlProblem(
        n=n,
        r=r,
        psi=tuple(psi),
        lagrangian=lag,
        t0=float(cfg["t0"]),
        t1=float(cfg["t1"]),
        qa=qa,
        qb=qb,
        options=options,
        **extras,
    )


def load_problem(config: str | Mapping[str, Any]) -> ControlProblem:
    """Load a problem from TOML text (or an already-parsed mapping)."""
    if isinstance(config, Mapping):
        return problem_from_mapping(config)
    try:
        cfg = tomllib.loads(config)
    except tomllib.TOMLDecodeError as exc:
        raise ProblemError(f"malformed config: {exc}") from exc
    return problem_from_mapping(cfg)


def load_problem_file(path) -> ControlProblem:
    with open(path, "r", encoding="utf-8") as fh:
        return load_problem(fh.read())


def config_mapping(p: ControlProblem) -> dict[str, Any]:
    cfg: dict[str, Any] = {}
    if p.builtin is not None:
        cfg["builtin"] = p.builtin
    else:
        cfg["n"] = p.n
        cfg["r"] = p.r
        cfg["psi"] = [exprdsl.render(e) for e in p.psi]
        cfg["lagrangian"] = exprdsl.render(p.lagrangian)
    cfg["t0"] = p.t0
    cfg["t1"] = p.t1
    cfg["qa"] = list(p.qa)
    cfg["qb"] = list(p.qb)
    if p.p0_guess is not None:
        cfg["p0_guess"] = list(p.p0_guess)
    if p.z_guess is not None:
        cfg["z_guess"] = list(p.z_guess)
    cfg["tolerances"] = p.options.as_dict()
    return cfg


def render_config(p: ControlProblem) -> str:
    """TOML text that :func:`load_problem` maps back to an equivalent problem."""
    return tomli_w.dumps(config_mapping(p))


# ---------------------------------------------------------------------------
# derivative oracle


def _block_fn(exprs, shape):
    block = exprdsl.compile_block(exprs)
    if shape == ():
        return lambda t, q, z: block(t, q, z)[0]

    def fn(t, q, z):
        return np.array(block(t, q, z), dtype=float).reshape(shape)

    return fn


def derivative_oracle(p: ControlProblem) -> DerivativeSet:
    """All first and second partials of psi and L, as callables of (t, q, z)."""
    oracle = p.__dict__.get("_oracle")
    if oracle is None:
        oracle = _build_oracle(p)
        object.__setattr__(p, "_oracle", oracle)  # memo on the immutable problem
    return oracle


@functools.lru_cache(maxsize=128)
def _build_oracle(p: ControlProblem) -> DerivativeSet:
    if p.native is not None:
        return p.native.derivatives
    n, r = p.n, p.r
    qs = [Var("q", k) for k in range(1, n + 1)]
    zs = [Var("z", a) for a in range(1, r + 1)]
    d = exprdsl.differentiate
    psi = list(p.psi)
    lag = p.lagrangian
    psi_q = [[d(f, x) for x in qs] for f in psi]
    psi_z = [[d(f, x) for x in zs] for f in psi]
    L_q = [d(lag, x) for x in qs]
    L_z = [d(lag, x) for x in zs]

    def flat(nested):
        out = []
        for item in nested:
            out.extend(flat(item) if isinstance(item, list) else [item])
        return out

    psi_qq = [[[d(fk, y) for y in qs] for fk in row] for row in psi_q]
    psi_qz = [[[d(fk, y) for y in zs] for fk in row] for row in psi_q]
    psi_zz = [[[d(fa, y) for y in zs] for fa in row] for row in psi_z]
    L_qq = [[d(f, y) for y in qs] for f in L_q]
    L_qz = [[d(f, y) for y in zs] for f in L_q]
    L_zz = [[d(f, y) for y in zs] for f in L_z]
    return DerivativeSet(
        psi=_block_fn(psi, (n,)),
        L=_block_fn([lag], ()),
        psi_q=_block_fn(flat(psi_q), (n, n)),
        psi_z=_block_fn(flat(psi_z), (n, r)),
        psi_qq=_block_fn(flat(psi_qq), (n, n, n)),
        psi_qz=_block_fn(flat(psi_qz), (n, n, r)),
        psi_zz=_block_fn(flat(psi_zz), (n, r, r)),
        L_q=_block_fn(L_q, (n,)),
        L_z=_block_fn(L_z, (r,)),
        L_qq=_block_fn(flat(L_qq), (n, n)),
        L_qz=_block_fn(flat(L_qz), (n, r)),
        L_zz=_block_fn(flat(L_zz), (r, r)),
    )


@dataclass
class DerivativeCheck:
    point: tuple[float, tuple[float, ...], tuple[float, ...]]
    step: float
    deviations: dict[str, float]
    threshold: float = 1e-6

    @property
    def max_deviation(self) -> float:
        return max(self.deviations.values())

    @property
    def passed(self) -> bool:
        return self.max_deviation <= self.threshold


def _deviation(a, b) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    return float(np.max(np.abs(a - b) / np.maximum(1.0, np.abs(b))))


def _central(f, x: np.ndarray, h: float) -> np.ndarray:
    """Central differences of ``f`` (array-valued) along every coordinate of ``x``;
    the differentiation index is appended last."""
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e[k] = h
        cols.append((np.asarray(f(x + e), dtype=float) - np.asarray(f(x - e), dtype=float)) / (2 * h))
    return np.stack(cols, axis=-1)


def check_derivatives(p: ControlProblem, point, h: float = 1e-5) -> DerivativeCheck:
    """Compare every oracle partial with central finite differences at ``point``.

    First partials are differenced from psi and L themselves; second partials
    from the (already checked) first partials, which keeps rounding error at
    ``eps/h`` instead of ``eps/h**2``.  Deviations are relative to
    ``max(1, |finite difference|)``.
    """
    if not (h > 0 and math.isfinite(h)):
        raise ValueError(f"invalid finite-difference step h={h!r}")
    t, q, z = point
    t = float(t)
    q = np.asarray(q, dtype=float).reshape(p.n)
    z = np.asarray(z, dtype=float).reshape(p.r)
    D = derivative_oracle(p)

    dev: dict[str, float] = {}
    dev["psi_q"] = _deviation(D.psi_q(t, q, z), _central(lambda x: D.psi(t, x, z), q, h))
    dev["psi_z"] = _deviation(D.psi_z(t, q, z), _central(lambda x: D.psi(t, q, x), z, h))
    dev["L_q"] = _deviation(D.L_q(t, q, z), _central(lambda x: D.L(t, x, z), q, h))
    dev["L_z"] = _deviation(D.L_z(t, q, z), _central(lambda x: D.L(t, q, x), z, h))
    dev["psi_qq"] = _deviation(D.psi_qq(t, q, z), _central(lambda x: D.psi_q(t, x, z), q, h))
    dev["psi_qz"] = _deviation(D.psi_qz(t, q, z), _central(lambda x: D.psi_q(t, q, x), z, h))
    dev["psi_zz"] = _deviation(D.psi_zz(t, q, z), _central(lambda x: D.psi_z(t, q, x), z, h))
    dev["L_qq"] = _deviation(D.L_qq(t, q, z), _central(lambda x: D.L_q(t, x, z), q, h))
    dev["L_qz"] = _deviation(D.L_qz(t, q, z), _central(lambda x: D.L_q(t, q, x), z, h))
    dev["L_zz"] = _deviation(D.L_zz(t, q, z), _central(lambda x: D.L_z(t, q, x), z, h))
    return DerivativeCheck(point=(t, tuple(q), tuple(z)), step=h, deviations=dev)
