"""Vertical fields with known deformations, shared by the Jacobi and acceptance tests."""

import math

import numpy as np


def sine_series(coeffs, a, b):
    """Y whose deformation is X = sum c_k sin(k pi s), s = (t-a)/(b-a), for psi = z, tau = 0."""
    L = b - a

    def Y(t):
        s = (t - a) / L
        return np.array([sum(c * (k + 1) * math.pi / L * math.cos((k + 1) * math.pi * s) for k, c in enumerate(coeffs))])

    def X(t):
        s = (t - a) / L
        return sum(c * math.sin((k + 1) * math.pi * s) for k, c in enumerate(coeffs))

    return Y, X


def random_vertical(rng, r, a, b, modes=3):
    amp = rng.normal(size=(modes, r))
    phase = rng.uniform(0, 2 * math.pi, size=(modes, r))
    L = b - a

    def Y(t):
        s = (t - a) / L
        return sum(amp[k] * np.sin((k + 1) * math.pi * s + phase[k]) for k in range(modes))

    return Y
