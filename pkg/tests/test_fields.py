import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from secondvar.fields import (
    G_from_pontryagin,
    adapted_hessian,
    field_sample,
    fields_csv,
    h_frame,
    provider,
)
from secondvar.pontryagin import Extremal, RegularityError
from secondvar.problem import load_problem

from . import lqr


def _times(e, k=7):
    return np.linspace(e.t0, e.t1, k)


def test_harmonic_oscillator_blocks(ho):
    for t in _times(ho):
        b = adapted_hessian(ho, t)
        assert np.allclose(b.Hqq, -1.0, atol=1e-12, rtol=0)
        assert np.allclose(b.Hqz, 0.0, atol=1e-12, rtol=0)
        assert np.allclose(b.Hzz, 1.0, atol=1e-12, rtol=0)


def test_free_particle_blocks(fp):
    b = adapted_hessian(fp, 0.5)
    assert np.allclose(b.Hqq, 0) and np.allclose(b.Hqz, 0) and np.allclose(b.Hzz, 1)


def test_heisenberg_mixed_block_carries_costate(heis):
    for t in _times(heis):
        p3 = heis.p(t)[2]
        Hqz = adapted_hessian(heis, t).Hqz
        assert Hqz[0, 1] == pytest.approx(-p3, abs=1e-12)
        assert Hqz[1, 0] == pytest.approx(p3, abs=1e-12)
        assert Hqz[2, 0] == Hqz[2, 1] == Hqz[0, 0] == Hqz[1, 1] == 0.0


def test_harmonic_oscillator_fields(ho):
    for t in _times(ho):
        s = field_sample(ho, t)
        for got, want in ((s.G, 1.0), (s.h, 0.0), (s.tau, 0.0), (s.N, -1.0), (s.M, 1.0)):
            assert np.allclose(got, want, atol=1e-12, rtol=0)


def test_free_particle_fields(fp):
    s = field_sample(fp, 0.3)
    assert np.allclose(s.G, 1) and np.allclose(s.h, 0) and np.allclose(s.tau, 0)
    assert np.allclose(s.N, 0) and np.allclose(s.M, 1)


@pytest.mark.parametrize("fixture", ["ho", "heis", "ex1", "fp"])
def test_G_two_ways(fixture, request):
    e = request.getfixturevalue(fixture)
    for t in _times(e):
        assert np.max(np.abs(field_sample(e, t).G - G_from_pontryagin(e, t))) <= 1e-12


@pytest.mark.parametrize("fixture", ["ho", "heis", "ex1", "heis_conj"])
def test_sample_symmetries_and_M_reconstruction(fixture, request):
    e = request.getfixturevalue(fixture)
    for t in _times(e, 11):
        s = field_sample(e, t)
        assert np.max(np.abs(s.G - s.G.T)) <= 1e-12
        assert np.max(np.abs(s.N - s.N.T)) <= 1e-12
        assert np.max(np.abs(s.M - s.M.T)) <= 1e-12
        assert np.max(np.abs(s.M - s.B @ s.G_inv @ s.B.T)) <= 1e-12
        assert np.max(np.abs(s.G @ s.G_inv - np.eye(e.r))) <= 1e-12
        assert np.max(np.abs(s.h + s.G_inv @ s.Hqz.T)) <= 1e-12


def test_heisenberg_curvature(heis):
    # N = -p3^2 diag(1, 1, 0) along Heisenberg extremals
    for t in _times(heis):
        p3 = heis.p(t)[2]
        assert np.allclose(field_sample(heis, t).N, -(p3**2) * np.diag([1.0, 1.0, 0.0]), atol=1e-10)


def test_singular_G_reports_time():
    p = load_problem('n = 1\nr = 1\npsi = ["z1"]\nlagrangian = "0.25*z1^4"\nt0 = 0.0\nt1 = 1.0\nqa = [0.0]\nqb = [1.0]\n')
    e = Extremal.from_functions(p, 0.0, 1.0, lambda t: [0.5 * (t - 0.3) ** 2], lambda t: [(t - 0.3) ** 3], lambda t: [t - 0.3])
    with pytest.raises(RegularityError) as info:
        field_sample(e, 0.3)
    assert info.value.t == pytest.approx(0.3)


@settings(max_examples=10)
@given(st.integers(0, 2**32 - 1))
def test_lqr_fields_constant(seed):
    m = lqr.random_lqr(np.random.default_rng(seed))
    e = lqr.extremal(m)
    for t in _times(e, 5):
        s = field_sample(e, t)
        assert np.allclose(s.tau, -m.A.T, atol=1e-10, rtol=0)
        assert np.allclose(s.N, m.Q, atol=1e-10, rtol=0)
        assert np.allclose(s.M, m.B @ np.linalg.solve(m.G, m.B.T), atol=1e-10, rtol=0)
        assert np.allclose(s.G, m.G, atol=1e-10, rtol=0)
        assert np.allclose(s.h, 0, atol=1e-10)


def test_cache_matches_direct_evaluation(ho, heis):
    for e in (ho, heis):
        fp = provider(e)
        for t in np.linspace(e.t0, e.t1, 37):
            s = field_sample(e, t)
            T, M, N, B, G, Gi, h = fp.matrices(t)
            tol = 100 * e.problem.options.ode_tol
            for a, b in ((T, s.tau), (M, s.M), (N, s.N), (G, s.G)):
                assert np.max(np.abs(a - b)) <= tol


def test_constant_fields_are_cached(ho):
    assert provider(ho).cached


# ---------------------------------------------------------------------------
# h-transported frame


def test_frame_is_identity_without_connection(ho):
    fr = h_frame(ho)
    for t in _times(ho):
        assert np.allclose(fr.frame(t), np.eye(1), atol=1e-12)


def test_frame_constant_connection(ho):
    fr = h_frame(ho, tau=lambda t: np.eye(1))
    for t in _times(ho):
        assert fr.frame(t)[0, 0] == pytest.approx(math.exp(-t), rel=1e-9)


@pytest.mark.parametrize("fixture", ["heis", "ex1", "heis_conj"])
def test_frame_inverse(fixture, request):
    e = request.getfixturevalue(fixture)
    fr = h_frame(e)
    for t in _times(e, 21):
        assert np.max(np.abs(fr.inverse(t) @ fr.frame(t) - np.eye(e.n))) <= 1e-10


@settings(max_examples=10)
@given(st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.lists(st.floats(-3, 3), min_size=3, max_size=3), st.floats(0, 1))
def test_frame_preserves_pairing(heis, X, pi, s):
    fr = h_frame(heis)
    t = heis.t0 + s * (heis.t1 - heis.t0)
    e, ei = fr.frame(t), fr.inverse(t)
    X, pi = np.array(X), np.array(pi)
    assert (ei @ X) @ (e.T @ pi) == pytest.approx(pi @ X, abs=1e-10 * (1 + np.abs(pi) @ np.abs(X)))


def test_fields_csv_columns(heis):
    text = fields_csv(heis, 3)
    header = text.splitlines()[0].split(",")
    assert header[0] == "t"
    assert header[1:5] == ["G11", "G12", "G21", "G22"]
    assert header[5] == "N11" and header[14] == "M11" and header[23] == "tau11"
    assert len(header) == 1 + 4 + 9 + 9 + 9
    assert len(text.strip().splitlines()) == 4
