"""Shared test helpers: independent oracles and random-input generators.

The oracles here deliberately avoid the library's own code paths so the
tests check two independent routes to the same numbers.
"""

import math

import numpy as np
import pytest

from tensorfit.core import matrix_to_tensor_vec


def cubic_eigenvalues(mat) -> np.ndarray:
    """Closed-form eigenvalues of a symmetric 3x3 matrix via the
    trigonometric solution of the characteristic cubic, sorted descending.
    Independent of the package's Jacobi solver."""
    a = np.asarray(mat, dtype=float)
    p1 = a[0, 1] ** 2 + a[0, 2] ** 2 + a[1, 2] ** 2
    if p1 == 0.0:
        return np.sort(np.diag(a))[::-1]
    q = float(np.trace(a)) / 3.0
    p2 = ((a[0, 0] - q) ** 2 + (a[1, 1] - q) ** 2 + (a[2, 2] - q) ** 2
          + 2.0 * p1)
    p = math.sqrt(p2 / 6.0)
    b = (a - q * np.eye(3)) / p
    r = float(np.linalg.det(b)) / 2.0
    r = min(max(r, -1.0), 1.0)
    phi = math.acos(r) / 3.0
    lam1 = q + 2.0 * p * math.cos(phi)
    lam3 = q + 2.0 * p * math.cos(phi + 2.0 * math.pi / 3.0)
    return np.array([lam1, 3.0 * q - lam1 - lam3, lam3])


def random_psd_vec(rng, lam_range=(0.2e-3, 2.5e-3)) -> np.ndarray:
    """A random positive-definite tensor vector with eigenvalues inside a
    physiological band and a random rotation."""
    lam = rng.uniform(*lam_range, size=3)
    q, _ = np.linalg.qr(rng.normal(size=(3, 3)))
    return matrix_to_tensor_vec((q * lam) @ q.T)


def random_symmetric_vec(rng, scale=1.0) -> np.ndarray:
    v = rng.normal(size=6) * scale
    return v


@pytest.fixture
def rng():
    return np.random.default_rng(20240811)
