import math
import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secondvar import examples
from secondvar.jacobi import (
    WitnessError,
    bilinear_form,
    boundary_pairing_check,
    conjugate_points,
    conjugate_scan_csv,
    deformation_from_vertical,
    frame_transition_matrices,
    g_indefinite_witness,
    gauge_shift_integrand,
    lagrange_bracket,
    negative_witness,
    propagate_jacobi,
    second_variation,
    transition_matrices,
)
from secondvar.fields import provider
from secondvar.pontryagin import flow_extremal
from secondvar.problem import load_problem

from . import lqr
from .helpers import random_vertical, sine_series
from .conftest import problem


@pytest.fixture(scope="module")
def ho_half_pi():
    return flow_extremal(problem("harmonic-oscillator", t1=math.pi / 2), [0.0], [1.0], 0.0, math.pi / 2)


@pytest.fixture(scope="module")
def ho_35():
    return flow_extremal(problem("harmonic-oscillator", t1=3.5), [0.0], [1.0], 0.0, 3.5)


# ---------------------------------------------------------------------------
# Jacobi pairs


def test_jacobi_harmonic_oscillator(ho_long):
    j = propagate_jacobi(ho_long, [0.0], [1.0], 0.0, 3.0)
    for t in np.linspace(0, 3, 13):
        assert abs(j.X(t)[0] - math.sin(t)) <= 1e-8
        assert abs(j.pi(t)[0] - math.cos(t)) <= 1e-8


def test_jacobi_zero(heis):
    j = propagate_jacobi(heis, np.zeros(3), np.zeros(3))
    assert np.max(np.abs(j.trajectory.ys)) == 0.0


def test_jacobi_free_particle(fp):
    j = propagate_jacobi(fp, [0.0], [1.0])
    for t in np.linspace(0, 1, 5):
        assert j.X(t)[0] == pytest.approx(t, abs=1e-12)
        assert j.pi(t)[0] == pytest.approx(1.0, abs=1e-12)


def test_jacobi_backward(ho):
    j = propagate_jacobi(ho, [math.sin(1.0)], [math.cos(1.0)], 1.0, 0.0)
    assert abs(j.X(0.0)[0]) <= 1e-9 and abs(j.pi(0.0)[0] - 1.0) <= 1e-9


@pytest.mark.parametrize("fixture", ["heis", "ex1", "ho"])
def test_jacobi_residuals(fixture, request):
    e = request.getfixturevalue(fixture)
    rng = np.random.default_rng(3)
    j = propagate_jacobi(e, rng.normal(size=e.n), rng.normal(size=e.n))
    tol = 10 * e.problem.options.ode_tol
    scale = max(1.0, float(np.max(np.abs(j.trajectory.ys))))
    assert j.jacobi_residual() <= tol * scale
    assert j.variational_residual() <= tol * scale


@settings(max_examples=6)
@given(st.sampled_from(["ho", "heis", "fp", "ex1"]), st.integers(0, 2**32 - 1))
def test_lagrange_bracket_constant(request, fixture, seed):
    e = request.getfixturevalue(fixture)
    rng = np.random.default_rng(seed)
    j1 = propagate_jacobi(e, rng.normal(size=e.n), rng.normal(size=e.n))
    j2 = propagate_jacobi(e, rng.normal(size=e.n), rng.normal(size=e.n))
    vals = [lagrange_bracket(j1, j2, t) for t in np.linspace(e.t0, e.t1, 21)]
    assert max(vals) - min(vals) <= 1e-8


@settings(max_examples=8)
@given(st.integers(0, 2**32 - 1))
def test_jacobi_hamiltonian_constant_lqr(seed):
    rng = np.random.default_rng(seed)
    m = lqr.random_lqr(rng, scale=0.5)
    e = lqr.extremal(m)
    j = propagate_jacobi(e, rng.normal(size=m.n), rng.normal(size=m.n))
    M = m.B @ np.linalg.solve(m.G, m.B.T)

    def energy(t):
        X, P = j.X(t), j.pi(t)
        return 0.5 * P @ M @ P - 0.5 * X @ m.Q @ X + P @ m.A @ X

    vals = [energy(t) for t in np.linspace(0, 1, 21)]
    assert max(vals) - min(vals) <= 1e-8 * max(1.0, max(abs(v) for v in vals))


# ---------------------------------------------------------------------------
# transition matrices and conjugate points


def test_transition_harmonic_oscillator(ho_long):
    tm = transition_matrices(ho_long, 0.0, 7.0)
    for t in np.linspace(0, 7, 15):
        assert tm.A(t)[0, 0] == pytest.approx(math.cos(t), abs=1e-8)
        assert tm.B(t)[0, 0] == pytest.approx(math.sin(t), abs=1e-8)
        assert tm.C(t)[0, 0] == pytest.approx(-math.sin(t), abs=1e-8)
        assert tm.D(t)[0, 0] == pytest.approx(math.cos(t), abs=1e-8)


@pytest.mark.parametrize("fixture", ["heis", "ex1", "ho"])
def test_transition_initial_data(fixture, request):
    e = request.getfixturevalue(fixture)
    tm = transition_matrices(e)
    I, Z = np.eye(e.n), np.zeros((e.n, e.n))
    assert np.array_equal(tm.A(e.t0), I) and np.array_equal(tm.D(e.t0), I)
    assert np.array_equal(tm.B(e.t0), Z) and np.array_equal(tm.C(e.t0), Z)


def test_transition_free_particle(fp):
    tm = transition_matrices(fp)
    for t in np.linspace(0, 1, 5):
        assert tm.B(t)[0, 0] == pytest.approx(t, abs=1e-12)


def test_conjugate_harmonic_oscillator_first(ho_long):
    cps = conjugate_points(ho_long, 3.5)
    assert len(cps) == 1 and abs(cps[0].time - math.pi) <= 1e-6
    assert cps[0].multiplicity == 1


def test_conjugate_harmonic_oscillator_two(ho_long):
    times = [c.time for c in conjugate_points(ho_long, 7.0)]
    assert len(times) == 2
    assert abs(times[0] - math.pi) <= 1e-6 and abs(times[1] - 2 * math.pi) <= 1e-6


def test_conjugate_free_particle():
    e = flow_extremal(problem("free-particle", t1=10.0), [0.0], [1.0], 0.0, 10.0)
    assert conjugate_points(e) == []


def test_conjugate_oracles(ho_long):
    oracle = examples.builtin("harmonic-oscillator").oracles["conjugate_times"].value
    got = [c.time for c in conjugate_points(ho_long, 7.0)]
    assert np.allclose(got, oracle(0.0, 7.0), atol=1e-6)
    assert examples.builtin("free-particle").oracles["conjugate_times"].value(0.0, 10.0) == []


@given(st.floats(0.5, 7.0))
def test_harmonic_root_count(ho_long, T):
    k = T / math.pi
    if abs(k - round(k)) * math.pi <= 1e-3:
        return
    assert len(conjugate_points(ho_long, T)) == math.floor(k)


def test_frame_cross_check_harmonic(ho_long):
    a = [c.time for c in conjugate_points(ho_long, 7.0)]
    b = [c.time for c in conjugate_points(ho_long, 7.0, frame=True)]
    assert len(a) == len(b) == 2
    assert np.max(np.abs(np.array(a) - b)) <= 1e-7


def test_frame_cross_check_heisenberg(heis_conj):
    a = [c.time for c in conjugate_points(heis_conj)]
    b = [c.time for c in conjugate_points(heis_conj, frame=True)]
    assert len(a) == len(b) >= 1
    assert abs(a[0] - 1.0) <= 1e-6  # rotation rate 2 p3 with p3 = pi
    assert np.max(np.abs(np.array(a) - b)) <= 1e-7


def test_frame_transition_matches_coordinates(heis):
    tm = transition_matrices(heis)
    fm = frame_transition_matrices(heis)
    for t in np.linspace(heis.t0, heis.t1, 7):
        assert np.allclose(fm.frame.inverse(t) @ tm.B(t), fm.B(t), atol=1e-8)


def test_conjugate_scan_csv(ho):
    lines = conjugate_scan_csv(ho, samples=5).strip().splitlines()
    assert lines[0] == "t,det_B,sigma_min_B"
    t, det, smin = map(float, lines[-1].split(","))
    assert t == 1.0 and det == pytest.approx(math.sin(1.0), abs=1e-8) and smin == pytest.approx(math.sin(1.0), abs=1e-8)


# ---------------------------------------------------------------------------
# deformations and the second variation


def test_deformation_free_particle(fp):
    d = deformation_from_vertical(fp, lambda t: np.array([1.0]))
    for t in np.linspace(0, 1, 5):
        assert d.X(t)[0] == pytest.approx(t, abs=1e-12)


def test_deformation_zero(heis):
    d = deformation_from_vertical(heis, lambda t: np.zeros(2))
    assert np.max(np.abs(d.trajectory.ys)) == 0.0


def test_deformation_harmonic(ho):
    d = deformation_from_vertical(ho, lambda t: np.array([math.cos(t)]))
    for t in np.linspace(0, 1, 5):
        assert d.X(t)[0] == pytest.approx(math.sin(t), abs=1e-9)


def test_deformation_variational_residual(heis):
    d = deformation_from_vertical(heis, random_vertical(np.random.default_rng(0), 2, 0.0, 1.0))
    assert d.variational_residual() <= 10 * heis.problem.options.ode_tol * max(1.0, float(np.max(np.abs(d.trajectory.ys))))


def test_second_variation_harmonic(ho_half_pi):
    d = deformation_from_vertical(ho_half_pi, lambda t: np.array([2 * math.cos(2 * t)]))
    assert d.X(math.pi / 2)[0] == pytest.approx(0.0, abs=1e-9)
    assert second_variation(ho_half_pi, d) == pytest.approx(3 * math.pi / 4, abs=1e-7)


def test_second_variation_zero(ho):
    d = deformation_from_vertical(ho, lambda t: np.zeros(1))
    assert second_variation(ho, d) == 0.0


@settings(max_examples=10)
@given(st.lists(st.floats(-2, 2), min_size=1, max_size=4))
def test_second_variation_free_particle_positive(fp, coeffs):
    if max(abs(c) for c in coeffs) < 1e-3:
        return
    Y, _ = sine_series(coeffs, 0.0, 1.0)
    d = deformation_from_vertical(fp, Y)
    value = second_variation(fp, d)
    direct = sum(0.5 * (c * (k + 1) * math.pi) ** 2 for k, c in enumerate(coeffs))
    assert value > 0 and value == pytest.approx(direct, rel=1e-9)


def test_second_variation_warns_on_free_endpoint(ho):
    d = deformation_from_vertical(ho, lambda t: np.array([1.0]))
    with pytest.warns(UserWarning):
        second_variation(ho, d)


def test_bilinear_form_symmetric(heis):
    rng = np.random.default_rng(5)
    d1 = deformation_from_vertical(heis, random_vertical(rng, 2, 0, 1))
    d2 = deformation_from_vertical(heis, random_vertical(rng, 2, 0, 1))
    assert bilinear_form(heis, d1, d2) == pytest.approx(bilinear_form(heis, d2, d1), rel=1e-12)


# ---------------------------------------------------------------------------
# gauge invariance


def test_gauge_zero_field(ho):
    Y, _ = sine_series([0.3, -0.2], 0.0, 1.0)
    d = deformation_from_vertical(ho, Y)
    zero = lambda t: np.zeros((1, 1))  # noqa: E731
    assert gauge_shift_integrand(ho, d, zero, zero) == second_variation(ho, d)


@settings(max_examples=10)
@given(st.lists(st.floats(-1, 1), min_size=1, max_size=4), st.lists(st.floats(-2, 2), min_size=1, max_size=4))
def test_gauge_invariance_polynomial_fields(ho, coeffs, poly):
    if max(abs(c) for c in coeffs) < 1e-3:
        return
    Y, _ = sine_series(coeffs, 0.0, 1.0)
    d = deformation_from_vertical(ho, Y)
    C = lambda t: np.array([[np.polyval(poly, t)]])  # noqa: E731
    dC = lambda t: np.array([[np.polyval(np.polyder(poly), t)]])  # noqa: E731
    ref = second_variation(ho, d)
    assert gauge_shift_integrand(ho, d, C, dC) == pytest.approx(ref, rel=1e-8, abs=1e-12)


def test_gauge_boundary_term(ho):
    d = deformation_from_vertical(ho, lambda t: np.array([1.0 + t]))
    eye = lambda t: np.eye(1)  # noqa: E731
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = second_variation(ho, d)
    X0, X1 = d.endpoint_values
    jump = float(X1 @ X1 - X0 @ X0)
    assert gauge_shift_integrand(ho, d, eye) - base == pytest.approx(jump, abs=1e-8)


def test_gauge_invariance_heisenberg_time_dependent_field(heis):
    rng = np.random.default_rng(11)
    Y = random_vertical(rng, 2, 0.0, 1.0)
    d0 = deformation_from_vertical(heis, Y)
    S = rng.normal(size=(3, 3))
    S = S + S.T
    C = lambda t: S * (1 + t**2)  # noqa: E731
    dC = lambda t: S * 2 * t  # noqa: E731
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        base = second_variation(heis, d0)
    X0, X1 = d0.endpoint_values
    jump = float(X1 @ C(1.0) @ X1 - X0 @ C(0.0) @ X0)
    assert gauge_shift_integrand(heis, d0, C, dC) - base == pytest.approx(jump, rel=1e-8, abs=1e-8)


# ---------------------------------------------------------------------------
# boundary pairing


def test_pairing_harmonic(ho_half_pi):
    j = propagate_jacobi(ho_half_pi, [0.0], [1.0])
    d = deformation_from_vertical(ho_half_pi, lambda t: np.array([2 * math.cos(2 * t)]))
    assert boundary_pairing_check(j, d) <= 1e-7


def test_pairing_self(heis):
    rng = np.random.default_rng(2)
    j = propagate_jacobi(heis, rng.normal(size=3), rng.normal(size=3))
    assert boundary_pairing_check(j, j_as_deformation(heis, j)) <= 1e-7


def j_as_deformation(e, j):
    """A Jacobi pair viewed as the deformation it generates."""
    return deformation_from_vertical(e, j.Y, j.X(e.t0))


def test_pairing_zero(ho):
    j = propagate_jacobi(ho, [0.3], [0.5])
    d = deformation_from_vertical(ho, lambda t: np.zeros(1))
    assert boundary_pairing_check(j, d) == 0.0


@settings(max_examples=10)
@given(st.sampled_from(["ho", "heis"]), st.integers(0, 2**32 - 1))
def test_pairing_random(request, fixture, seed):
    e = request.getfixturevalue(fixture)
    rng = np.random.default_rng(seed)
    j = propagate_jacobi(e, rng.normal(size=e.n), rng.normal(size=e.n))
    d = deformation_from_vertical(e, random_vertical(rng, e.r, e.t0, e.t1), rng.normal(size=e.n))
    assert boundary_pairing_check(j, d) <= 1e-7


# ---------------------------------------------------------------------------
# witnesses


def test_negative_witness_harmonic(ho_35):
    w = negative_witness(ho_35, math.pi)
    assert w.value < 0
    X0, X1 = w.deformation.endpoint_values
    assert np.max(np.abs(X0)) <= 1e-8 and np.max(np.abs(X1)) <= 1e-8
    # independent check of the sign
    assert second_variation(ho_35, w.deformation, warn=False) == pytest.approx(w.value, rel=1e-6)
    assert w.deformation.variational_residual() <= 1e-6


def test_negative_witness_rejects_boundary(ho_35):
    with pytest.raises(ValueError):
        negative_witness(ho_35, ho_35.t1)


def test_negative_witness_fails_without_conjugate_point(fp):
    with pytest.raises(WitnessError):
        negative_witness(fp, 0.5)


def test_g_indefinite_witness():
    p = load_problem('n = 1\nr = 1\npsi = ["z1"]\nlagrangian = "-0.5*z1^2"\nt0 = 0.0\nt1 = 1.0\nqa = [0.0]\nqb = [1.0]\n')
    e = flow_extremal(p, [0.0], [-1.0], 0.0, 1.0)
    assert provider(e).matrices(0.5)[4][0, 0] == pytest.approx(-1.0)
    w = g_indefinite_witness(e)
    assert w.value < 0 and w.kind == "G_indefinite"
    X0, X1 = w.deformation.endpoint_values
    assert np.max(np.abs(X0)) <= 1e-8 and np.max(np.abs(X1)) <= 1e-8
